#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "cmil/tape.hpp"

// Differentiable primitives. Every op validates shapes up front and records a
// backward rule; shape errors name the op and both operand shapes.

namespace cmil {

namespace detail {

template <typename T>
Tape<T>& same_tape(const char* op, Value<T> a, Value<T> b) {
  if (a.tape() != b.tape()) fail(std::string(op) + ": operands on different tapes");
  return *a.tape();
}

inline bool is_scalar(const Shape& s) { return numel(s) == 1; }

template <typename T, typename FV, typename FD>
Value<T> unary_ew(const char* op, Value<T> a, FV fv, FD fd) {
  Tape<T>& tp = *a.tape();
  const auto& x = a.data();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fv(x[i]);
  const int ia = a.idx();
  const int out = int(tp.num_nodes());
  return tp.emit(op, a.shape(), std::move(y), {ia}, [ia, out, fd](Tape<T>& t) {
    const auto& g = t.node(out).grad;
    if (!t.wants_grad(ia)) return;
    const auto& x = t.data_of(ia);
    const auto& y = t.data_of(out);
    auto& da = t.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * fd(x[i], y[i]);
  });
}

enum class Bin { Add, Sub, Mul, Div };

template <typename T>
Value<T> binary_ew(const char* op, Bin kind, Value<T> a, Value<T> b) {
  Tape<T>& tp = same_tape(op, a, b);
  const bool sa = is_scalar(a.shape());
  const bool sb = is_scalar(b.shape());
  if (!sa && !sb && a.shape() != b.shape())
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  const Shape& os = sb ? a.shape() : (sa ? b.shape() : a.shape());
  const auto& xa = a.data();
  const auto& xb = b.data();
  const std::size_t n = numel(os);
  std::vector<T> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T va = xa[sa ? 0 : i];
    const T vb = xb[sb ? 0 : i];
    switch (kind) {
      case Bin::Add: y[i] = va + vb; break;
      case Bin::Sub: y[i] = va - vb; break;
      case Bin::Mul: y[i] = va * vb; break;
      case Bin::Div: y[i] = va / vb; break;
    }
  }
  const int ia = a.idx(), ib = b.idx();
  const int out = int(tp.num_nodes());
  return tp.emit(op, os, std::move(y), {ia, ib}, [ia, ib, sa, sb, kind, out](Tape<T>& t) {
    const auto& g = t.node(out).grad;
    const auto& xa = t.data_of(ia);
    const auto& xb = t.data_of(ib);
    if (t.wants_grad(ia)) {
      auto& da = t.grad_of(ia);
      for (std::size_t i = 0; i < g.size(); ++i) {
        T d;
        switch (kind) {
          case Bin::Add: case Bin::Sub: d = g[i]; break;
          case Bin::Mul: d = g[i] * xb[sb ? 0 : i]; break;
          case Bin::Div: d = g[i] / xb[sb ? 0 : i]; break;
          default: d = 0;
        }
        da[sa ? 0 : i] += d;
      }
    }
    if (t.wants_grad(ib)) {
      auto& db = t.grad_of(ib);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T va = xa[sa ? 0 : i];
        const T vb = xb[sb ? 0 : i];
        T d;
        switch (kind) {
          case Bin::Add: d = g[i]; break;
          case Bin::Sub: d = -g[i]; break;
          case Bin::Mul: d = g[i] * va; break;
          case Bin::Div: d = -g[i] * va / (vb * vb); break;
          default: d = 0;
        }
        db[sb ? 0 : i] += d;
      }
    }
  });
}

template <typename T>
void require_matrix(const char* op, Value<T> m) {
  if (m.shape().size() != 2)
    fail(std::string(op) + ": expected matrix, got " + shape_str(m.shape()));
}

template <typename T>
void require_vector(const char* op, Value<T> v) {
  if (v.shape().size() != 1)
    fail(std::string(op) + ": expected vector, got " + shape_str(v.shape()));
}

}  // namespace detail

// --- elementwise ------------------------------------------------------------

template <typename T> Value<T> add(Value<T> a, Value<T> b) { return detail::binary_ew("add", detail::Bin::Add, a, b); }
template <typename T> Value<T> sub(Value<T> a, Value<T> b) { return detail::binary_ew("sub", detail::Bin::Sub, a, b); }
template <typename T> Value<T> mul(Value<T> a, Value<T> b) { return detail::binary_ew("mul", detail::Bin::Mul, a, b); }
template <typename T> Value<T> div(Value<T> a, Value<T> b) { return detail::binary_ew("div", detail::Bin::Div, a, b); }

template <typename T> Value<T> operator+(Value<T> a, Value<T> b) { return add(a, b); }
template <typename T> Value<T> operator-(Value<T> a, Value<T> b) { return sub(a, b); }
template <typename T> Value<T> operator*(Value<T> a, Value<T> b) { return mul(a, b); }

// y = alpha * x + beta, elementwise with constant coefficients.
template <typename T>
Value<T> affine(Value<T> x, T alpha, T beta) {
  return detail::unary_ew("affine", x,
                          [alpha, beta](T v) { return alpha * v + beta; },
                          [alpha](T, T) { return alpha; });
}

template <typename T> Value<T> neg(Value<T> x) { return affine(x, T(-1), T(0)); }
template <typename T> Value<T> scale(Value<T> x, T c) { return affine(x, c, T(0)); }
template <typename T> Value<T> add_const(Value<T> x, T c) { return affine(x, T(1), c); }

template <typename T>
Value<T> exp_v(Value<T> x) {
  return detail::unary_ew("exp", x, [](T v) { return std::exp(v); },
                          [](T, T y) { return y; });
}

template <typename T>
Value<T> log_v(Value<T> x) {
  return detail::unary_ew("log", x, [](T v) { return std::log(v); },
                          [](T v, T) { return T(1) / v; });
}

template <typename T>
Value<T> sqrt_v(Value<T> x) {
  return detail::unary_ew("sqrt", x, [](T v) { return std::sqrt(v); },
                          [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Value<T> square(Value<T> x) {
  return detail::unary_ew("square", x, [](T v) { return v * v; },
                          [](T v, T) { return T(2) * v; });
}

template <typename T>
Value<T> reciprocal(Value<T> x) {
  return detail::unary_ew("reciprocal", x, [](T v) { return T(1) / v; },
                          [](T, T y) { return -y * y; });
}

template <typename T>
Value<T> tanh_v(Value<T> x) {
  return detail::unary_ew("tanh", x, [](T v) { return std::tanh(v); },
                          [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Value<T> sigmoid(Value<T> x) {
  return detail::unary_ew("sigmoid", x,
                          [](T v) {
                            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
                            const T e = std::exp(v);
                            return e / (T(1) + e);
                          },
                          [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Value<T> softplus(Value<T> x) {
  return detail::unary_ew("softplus", x,
                          [](T v) {
                            if (v > T(0)) return v + std::log1p(std::exp(-v));
                            return std::log1p(std::exp(v));
                          },
                          [](T v, T) {
                            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
                            const T e = std::exp(v);
                            return e / (T(1) + e);
                          });
}

// Exact (erf-based) GELU.
template <typename T>
Value<T> gelu(Value<T> x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary_ew("gelu", x,
                          [&](T v) { return T(0.5) * v * (T(1) + T(std::erf(double(v) * inv_sqrt2))); },
                          [&](T v, T) {
                            const double cdf = 0.5 * (1.0 + std::erf(double(v) * inv_sqrt2));
                            const double pdf = inv_sqrt2pi * std::exp(-0.5 * double(v) * double(v));
                            return T(cdf + double(v) * pdf);
                          });
}

// Subgradient 0 at the kink.
template <typename T>
Value<T> leaky_relu(Value<T> x, T alpha) {
  return detail::unary_ew("leaky_relu", x,
                          [alpha](T v) { return v > T(0) ? v : alpha * v; },
                          [alpha](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? alpha : T(0)); });
}

// --- matrix / vector ---------------------------------------------------------

template <typename T>
Value<T> matmul(Value<T> a, Value<T> b) {
  Tape<T>& tp = detail::same_tape("matmul", a, b);
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  const std::size_t r = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], c = b.shape()[1];
  if (k != k2)
    fail("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto& A = a.data();
  const auto& B = b.data();
  std::vector<T> y(r * c, T(0));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      if (av == T(0)) continue;
      for (std::size_t j = 0; j < c; ++j) y[i * c + j] += av * B[p * c + j];
    }
  const int ia = a.idx(), ib = b.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("matmul", {r, c}, std::move(y), {ia, ib},
                 [ia, ib, r, k, c, out](Tape<T>& t) {
                   const auto& g = t.node(out).grad;
                   const auto& A = t.data_of(ia);
                   const auto& B = t.data_of(ib);
                   if (t.wants_grad(ia)) {
                     auto& da = t.grad_of(ia);  // g * B^T
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j) {
                         const T gv = g[i * c + j];
                         if (gv == T(0)) continue;
                         for (std::size_t p = 0; p < k; ++p) da[i * k + p] += gv * B[p * c + j];
                       }
                   }
                   if (t.wants_grad(ib)) {
                     auto& db = t.grad_of(ib);  // A^T * g
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         const T av = A[i * k + p];
                         if (av == T(0)) continue;
                         for (std::size_t j = 0; j < c; ++j) db[p * c + j] += av * g[i * c + j];
                       }
                   }
                 });
}

// y = A * B^T with A[r,k], B[c,k].
template <typename T>
Value<T> matmul_nt(Value<T> a, Value<T> b) {
  Tape<T>& tp = detail::same_tape("matmul_nt", a, b);
  detail::require_matrix("matmul_nt", a);
  detail::require_matrix("matmul_nt", b);
  const std::size_t r = a.shape()[0], k = a.shape()[1];
  const std::size_t c = b.shape()[0], k2 = b.shape()[1];
  if (k != k2)
    fail("matmul_nt: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto& A = a.data();
  const auto& B = b.data();
  std::vector<T> y(r * c, T(0));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += A[i * k + p] * B[j * k + p];
      y[i * c + j] = acc;
    }
  const int ia = a.idx(), ib = b.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("matmul_nt", {r, c}, std::move(y), {ia, ib},
                 [ia, ib, r, k, c, out](Tape<T>& t) {
                   const auto& g = t.node(out).grad;
                   const auto& A = t.data_of(ia);
                   const auto& B = t.data_of(ib);
                   if (t.wants_grad(ia)) {
                     auto& da = t.grad_of(ia);  // g * B
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j) {
                         const T gv = g[i * c + j];
                         if (gv == T(0)) continue;
                         for (std::size_t p = 0; p < k; ++p) da[i * k + p] += gv * B[j * k + p];
                       }
                   }
                   if (t.wants_grad(ib)) {
                     auto& db = t.grad_of(ib);  // g^T * A
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j) {
                         const T gv = g[i * c + j];
                         if (gv == T(0)) continue;
                         for (std::size_t p = 0; p < k; ++p) db[j * k + p] += gv * A[i * k + p];
                       }
                   }
                 });
}

// y = A^T * B with A[k,r], B[k,c].
template <typename T>
Value<T> matmul_tn(Value<T> a, Value<T> b) {
  Tape<T>& tp = detail::same_tape("matmul_tn", a, b);
  detail::require_matrix("matmul_tn", a);
  detail::require_matrix("matmul_tn", b);
  const std::size_t k = a.shape()[0], r = a.shape()[1];
  const std::size_t k2 = b.shape()[0], c = b.shape()[1];
  if (k != k2)
    fail("matmul_tn: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto& A = a.data();
  const auto& B = b.data();
  std::vector<T> y(r * c, T(0));
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < r; ++i) {
      const T av = A[p * r + i];
      if (av == T(0)) continue;
      for (std::size_t j = 0; j < c; ++j) y[i * c + j] += av * B[p * c + j];
    }
  const int ia = a.idx(), ib = b.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("matmul_tn", {r, c}, std::move(y), {ia, ib},
                 [ia, ib, r, k, c, out](Tape<T>& t) {
                   const auto& g = t.node(out).grad;
                   const auto& A = t.data_of(ia);
                   const auto& B = t.data_of(ib);
                   if (t.wants_grad(ia)) {
                     auto& da = t.grad_of(ia);  // B * g^Texpressed on A's layout
                     for (std::size_t p = 0; p < k; ++p)
                       for (std::size_t i = 0; i < r; ++i) {
                         T acc = T(0);
                         for (std::size_t j = 0; j < c; ++j) acc += B[p * c + j] * g[i * c + j];
                         da[p * r + i] += acc;
                       }
                   }
                   if (t.wants_grad(ib)) {
                     auto& db = t.grad_of(ib);  // A * g
                     for (std::size_t p = 0; p < k; ++p)
                       for (std::size_t i = 0; i < r; ++i) {
                         const T av = A[p * r + i];
                         if (av == T(0)) continue;
                         for (std::size_t j = 0; j < c; ++j) db[p * c + j] += av * g[i * c + j];
                       }
                   }
                 });
}

template <typename T>
Value<T> matvec(Value<T> a, Value<T> v) {
  Tape<T>& tp = detail::same_tape("matvec", a, v);
  detail::require_matrix("matvec", a);
  detail::require_vector("matvec", v);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  if (c != v.shape()[0])
    fail("matvec: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(v.shape()));
  const auto& A = a.data();
  const auto& x = v.data();
  std::vector<T> y(r, T(0));
  for (std::size_t i = 0; i < r; ++i) {
    T acc = T(0);
    for (std::size_t j = 0; j < c; ++j) acc += A[i * c + j] * x[j];
    y[i] = acc;
  }
  const int ia = a.idx(), iv = v.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("matvec", {r}, std::move(y), {ia, iv}, [ia, iv, r, c, out](Tape<T>& t) {
    const auto& g = t.node(out).grad;
    const auto& A = t.data_of(ia);
    const auto& x = t.data_of(iv);
    if (t.wants_grad(ia)) {
      auto& da = t.grad_of(ia);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) da[i * c + j] += g[i] * x[j];
    }
    if (t.wants_grad(iv)) {
      auto& dv = t.grad_of(iv);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dv[j] += g[i] * A[i * c + j];
    }
  });
}

template <typename T>
Value<T> dot(Value<T> a, Value<T> b) {
  Tape<T>& tp = detail::same_tape("dot", a, b);
  detail::require_vector("dot", a);
  detail::require_vector("dot", b);
  if (a.shape() != b.shape())
    fail("dot: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto& x = a.data();
  const auto& y = b.data();
  T acc = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  const int ia = a.idx(), ib = b.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("dot", {}, {acc}, {ia, ib}, [ia, ib, out](Tape<T>& t) {
    const T g = t.node(out).grad[0];
    const auto& x = t.data_of(ia);
    const auto& y = t.data_of(ib);
    if (t.wants_grad(ia)) {
      auto& da = t.grad_of(ia);
      for (std::size_t i = 0; i < x.size(); ++i) da[i] += g * y[i];
    }
    if (t.wants_grad(ib)) {
      auto& db = t.grad_of(ib);
      for (std::size_t i = 0; i < x.size(); ++i) db[i] += g * x[i];
    }
  });
}

// --- indexing / assembly ------------------------------------------------------

template <typename T>
Value<T> gather_rows(Value<T> m, std::vector<std::uint32_t> idx) {
  Tape<T>& tp = *m.tape();
  detail::require_matrix("gather_rows", m);
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  for (auto i : idx)
    if (i >= r) fail("gather_rows: index " + std::to_string(i) + " out of range for " +
                     shape_str(m.shape()));
  const auto& M = m.data();
  std::vector<T> y(idx.size() * c);
  for (std::size_t k = 0; k < idx.size(); ++k)
    for (std::size_t j = 0; j < c; ++j) y[k * c + j] = M[idx[k] * c + j];
  const int im = m.idx();
  const int out = int(tp.num_nodes());
  auto ix = std::make_shared<std::vector<std::uint32_t>>(std::move(idx));
  return tp.emit("gather_rows", {ix->size(), c}, std::move(y), {im}, [im, c, ix, out](Tape<T>& t) {
    if (!t.wants_grad(im)) return;
    const auto& g = t.node(out).grad;
    auto& dm = t.grad_of(im);
    for (std::size_t k = 0; k < ix->size(); ++k)
      for (std::size_t j = 0; j < c; ++j) dm[(*ix)[k] * c + j] += g[k * c + j];
  });
}

template <typename T>
Value<T> concat_cols(Value<T> a, Value<T> b) {
  Tape<T>& tp = detail::same_tape("concat_cols", a, b);
  detail::require_matrix("concat_cols", a);
  detail::require_matrix("concat_cols", b);
  const std::size_t r = a.shape()[0], c1 = a.shape()[1], c2 = b.shape()[1];
  if (b.shape()[0] != r)
    fail("concat_cols: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto& A = a.data();
  const auto& B = b.data();
  std::vector<T> y(r * (c1 + c2));
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c1; ++j) y[i * (c1 + c2) + j] = A[i * c1 + j];
    for (std::size_t j = 0; j < c2; ++j) y[i * (c1 + c2) + c1 + j] = B[i * c2 + j];
  }
  const int ia = a.idx(), ib = b.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("concat_cols", {r, c1 + c2}, std::move(y), {ia, ib},
                 [ia, ib, r, c1, c2, out](Tape<T>& t) {
                   const auto& g = t.node(out).grad;
                   if (t.wants_grad(ia)) {
                     auto& da = t.grad_of(ia);
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c1; ++j) da[i * c1 + j] += g[i * (c1 + c2) + j];
                   }
                   if (t.wants_grad(ib)) {
                     auto& db = t.grad_of(ib);
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c2; ++j)
                         db[i * c2 + j] += g[i * (c1 + c2) + c1 + j];
                   }
                 });
}

template <typename T>
Value<T> concat_vecs(Value<T> a, Value<T> b) {
  Tape<T>& tp = detail::same_tape("concat_vecs", a, b);
  detail::require_vector("concat_vecs", a);
  detail::require_vector("concat_vecs", b);
  const std::size_t n1 = a.shape()[0], n2 = b.shape()[0];
  std::vector<T> y(n1 + n2);
  for (std::size_t i = 0; i < n1; ++i) y[i] = a.data()[i];
  for (std::size_t i = 0; i < n2; ++i) y[n1 + i] = b.data()[i];
  const int ia = a.idx(), ib = b.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("concat_vecs", {n1 + n2}, std::move(y), {ia, ib},
                 [ia, ib, n1, n2, out](Tape<T>& t) {
                   const auto& g = t.node(out).grad;
                   if (t.wants_grad(ia)) {
                     auto& da = t.grad_of(ia);
                     for (std::size_t i = 0; i < n1; ++i) da[i] += g[i];
                   }
                   if (t.wants_grad(ib)) {
                     auto& db = t.grad_of(ib);
                     for (std::size_t i = 0; i < n2; ++i) db[i] += g[n1 + i];
                   }
                 });
}

template <typename T>
Value<T> stack_scalars(Tape<T>& tp, const std::vector<Value<T>>& xs) {
  if (xs.empty()) fail("stack_scalars: empty input");
  std::vector<T> y(xs.size());
  std::vector<int> parents(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].tape() != &tp) fail("stack_scalars: operand on different tape");
    if (xs[i].size() != 1) fail("stack_scalars: element " + std::to_string(i) + " not scalar");
    y[i] = xs[i].data()[0];
    parents[i] = xs[i].idx();
  }
  const int out = int(tp.num_nodes());
  auto ps = std::make_shared<std::vector<int>>(parents);
  return tp.emit("stack_scalars", {xs.size()}, std::move(y), std::move(parents),
                 [ps, out](Tape<T>& t) {
                   const auto& g = t.node(out).grad;
                   for (std::size_t i = 0; i < ps->size(); ++i)
                     if (t.wants_grad((*ps)[i])) t.grad_of((*ps)[i])[0] += g[i];
                 });
}

template <typename T>
Value<T> element(Value<T> v, std::size_t i) {
  Tape<T>& tp = *v.tape();
  detail::require_vector("element", v);
  if (i >= v.shape()[0]) fail("element: index out of range");
  const int iv = v.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("element", {}, {v.data()[i]}, {iv}, [iv, i, out](Tape<T>& t) {
    if (t.wants_grad(iv)) t.grad_of(iv)[i] += t.node(out).grad[0];
  });
}

// Same data, new shape (numel preserved).
template <typename T>
Value<T> reshape(Value<T> x, Shape shape) {
  Tape<T>& tp = *x.tape();
  if (numel(shape) != x.size())
    fail("reshape: cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  const int ix = x.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("reshape", std::move(shape), x.data(), {ix}, [ix, out](Tape<T>& t) {
    if (!t.wants_grad(ix)) return;
    const auto& g = t.node(out).grad;
    auto& dx = t.grad_of(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

// --- reductions ---------------------------------------------------------------

template <typename T>
Value<T> sum_all(Value<T> x) {
  Tape<T>& tp = *x.tape();
  T acc = T(0);
  for (T v : x.data()) acc += v;
  const int ix = x.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("sum_all", {}, {acc}, {ix}, [ix, out](Tape<T>& t) {
    if (!t.wants_grad(ix)) return;
    const T g = t.node(out).grad[0];
    auto& dx = t.grad_of(ix);
    for (auto& d : dx) d += g;
  });
}

template <typename T>
Value<T> mean_all(Value<T> x) {
  const T n = T(x.size());
  return scale(sum_all(x), T(1) / n);
}

template <typename T>
Value<T> reduce_sum_axis(Value<T> m, int axis) {
  Tape<T>& tp = *m.tape();
  detail::require_matrix("reduce_sum_axis", m);
  if (axis != 0 && axis != 1) fail("reduce_sum_axis: invalid axis " + std::to_string(axis));
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  const auto& M = m.data();
  const std::size_t n = (axis == 0) ? c : r;
  std::vector<T> y(n, T(0));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[axis == 0 ? j : i] += M[i * c + j];
  const int im = m.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("reduce_sum_axis", {n}, std::move(y), {im}, [im, r, c, axis, out](Tape<T>& t) {
    if (!t.wants_grad(im)) return;
    const auto& g = t.node(out).grad;
    auto& dm = t.grad_of(im);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dm[i * c + j] += g[axis == 0 ? j : i];
  });
}

template <typename T>
Value<T> reduce_mean_axis(Value<T> m, int axis) {
  detail::require_matrix("reduce_mean_axis", m);
  const T n = T(axis == 0 ? m.shape()[0] : m.shape()[1]);
  return scale(reduce_sum_axis(m, axis), T(1) / n);
}

template <typename T>
Value<T> rows_sqnorm(Value<T> m) {
  Tape<T>& tp = *m.tape();
  detail::require_matrix("rows_sqnorm", m);
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  const auto& M = m.data();
  std::vector<T> y(r, T(0));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i] += M[i * c + j] * M[i * c + j];
  const int im = m.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("rows_sqnorm", {r}, std::move(y), {im}, [im, r, c, out](Tape<T>& t) {
    if (!t.wants_grad(im)) return;
    const auto& g = t.node(out).grad;
    const auto& M = t.data_of(im);
    auto& dm = t.grad_of(im);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dm[i * c + j] += T(2) * M[i * c + j] * g[i];
  });
}

// --- softmax family -------------------------------------------------------------

namespace detail {
template <typename T>
void softmax_span(const T* x, T* y, std::size_t n) {
  T mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  T z = T(0);
  for (std::size_t i = 0; i < n; ++i) { y[i] = std::exp(x[i] - mx); z += y[i]; }
  for (std::size_t i = 0; i < n; ++i) y[i] /= z;
}
}  // namespace detail

template <typename T>
Value<T> softmax_vec(Value<T> v) {
  Tape<T>& tp = *v.tape();
  detail::require_vector("softmax_vec", v);
  const std::size_t n = v.shape()[0];
  std::vector<T> y(n);
  detail::softmax_span(v.data().data(), y.data(), n);
  const int iv = v.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("softmax_vec", {n}, std::move(y), {iv}, [iv, n, out](Tape<T>& t) {
    if (!t.wants_grad(iv)) return;
    const auto& g = t.node(out).grad;
    const auto& y = t.data_of(out);
    auto& dv = t.grad_of(iv);
    T dotgy = T(0);
    for (std::size_t i = 0; i < n; ++i) dotgy += g[i] * y[i];
    for (std::size_t i = 0; i < n; ++i) dv[i] += y[i] * (g[i] - dotgy);
  });
}

template <typename T>
Value<T> softmax_rows(Value<T> m) {
  Tape<T>& tp = *m.tape();
  detail::require_matrix("softmax_rows", m);
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  std::vector<T> y(r * c);
  for (std::size_t i = 0; i < r; ++i)
    detail::softmax_span(m.data().data() + i * c, y.data() + i * c, c);
  const int im = m.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("softmax_rows", {r, c}, std::move(y), {im}, [im, r, c, out](Tape<T>& t) {
    if (!t.wants_grad(im)) return;
    const auto& g = t.node(out).grad;
    const auto& y = t.data_of(out);
    auto& dm = t.grad_of(im);
    for (std::size_t i = 0; i < r; ++i) {
      T dotgy = T(0);
      for (std::size_t j = 0; j < c; ++j) dotgy += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        dm[i * c + j] += y[i * c + j] * (g[i * c + j] - dotgy);
    }
  });
}

// log(sum_{i in idx} exp(v_i)), max-stabilized; exact for singleton sets.
template <typename T>
Value<T> logsumexp_subset(Value<T> v, std::vector<std::uint32_t> idx) {
  Tape<T>& tp = *v.tape();
  detail::require_vector("logsumexp_subset", v);
  if (idx.empty()) fail("logsumexp_subset: empty index set");
  const auto& x = v.data();
  for (auto i : idx)
    if (i >= x.size()) fail("logsumexp_subset: index out of range");
  T mx = x[idx[0]];
  for (auto i : idx) mx = std::max(mx, x[i]);
  T z = T(0);
  for (auto i : idx) z += std::exp(x[i] - mx);
  const T y = (idx.size() == 1) ? x[idx[0]] : mx + std::log(z);
  const int iv = v.idx();
  const int out = int(tp.num_nodes());
  auto ix = std::make_shared<std::vector<std::uint32_t>>(std::move(idx));
  return tp.emit("logsumexp_subset", {}, {y}, {iv}, [iv, ix, out](Tape<T>& t) {
    if (!t.wants_grad(iv)) return;
    const T g = t.node(out).grad[0];
    const T y = t.node(out).data[0];
    const auto& x = t.data_of(iv);
    auto& dv = t.grad_of(iv);
    for (auto i : *ix) dv[i] += g * std::exp(x[i] - y);
  });
}

// Row-wise log(sum(exp)), max-stabilized.
template <typename T>
Value<T> logsumexp_rows(Value<T> m) {
  Tape<T>& tp = *m.tape();
  detail::require_matrix("logsumexp_rows", m);
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  const auto& M = m.data();
  std::vector<T> y(r);
  for (std::size_t i = 0; i < r; ++i) {
    T mx = M[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, M[i * c + j]);
    T z = T(0);
    for (std::size_t j = 0; j < c; ++j) z += std::exp(M[i * c + j] - mx);
    y[i] = mx + std::log(z);
  }
  const int im = m.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("logsumexp_rows", {r}, std::move(y), {im}, [im, r, c, out](Tape<T>& t) {
    if (!t.wants_grad(im)) return;
    const auto& g = t.node(out).grad;
    const auto& y = t.node(out).data;
    const auto& M = t.data_of(im);
    auto& dm = t.grad_of(im);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        dm[i * c + j] += g[i] * std::exp(M[i * c + j] - y[i]);
  });
}

// Softmax within segments of a vector; entries of empty segments do not exist.
template <typename T>
Value<T> segment_softmax(Value<T> v, std::vector<std::uint32_t> seg, std::size_t n_seg) {
  Tape<T>& tp = *v.tape();
  detail::require_vector("segment_softmax", v);
  const std::size_t n = v.shape()[0];
  if (seg.size() != n) fail("segment_softmax: segment ids length mismatch");
  for (auto s : seg)
    if (s >= n_seg) fail("segment_softmax: segment id out of range");
  const auto& x = v.data();
  std::vector<T> mx(n_seg, std::numeric_limits<T>::lowest());
  for (std::size_t i = 0; i < n; ++i) mx[seg[i]] = std::max(mx[seg[i]], x[i]);
  std::vector<T> z(n_seg, T(0));
  std::vector<T> y(n);
  for (std::size_t i = 0; i < n; ++i) { y[i] = std::exp(x[i] - mx[seg[i]]); z[seg[i]] += y[i]; }
  for (std::size_t i = 0; i < n; ++i) y[i] /= z[seg[i]];
  const int iv = v.idx();
  const int out = int(tp.num_nodes());
  auto sg = std::make_shared<std::vector<std::uint32_t>>(std::move(seg));
  return tp.emit("segment_softmax", {n}, std::move(y), {iv}, [iv, sg, n_seg, out](Tape<T>& t) {
    if (!t.wants_grad(iv)) return;
    const auto& g = t.node(out).grad;
    const auto& y = t.node(out).data;
    auto& dv = t.grad_of(iv);
    std::vector<T> dotgy(n_seg, T(0));
    for (std::size_t i = 0; i < y.size(); ++i) dotgy[(*sg)[i]] += g[i] * y[i];
    for (std::size_t i = 0; i < y.size(); ++i)
      dv[i] += y[i] * (g[i] - dotgy[(*sg)[i]]);
  });
}

// --- segment / group aggregation ------------------------------------------------

template <typename T>
Value<T> segment_sum_rows(Value<T> m, std::vector<std::uint32_t> seg, std::size_t n_seg) {
  Tape<T>& tp = *m.tape();
  detail::require_matrix("segment_sum_rows", m);
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  if (seg.size() != r) fail("segment_sum_rows: segment ids length mismatch");
  for (auto s : seg)
    if (s >= n_seg) fail("segment_sum_rows: segment id out of range");
  const auto& M = m.data();
  std::vector<T> y(n_seg * c, T(0));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[seg[i] * c + j] += M[i * c + j];
  const int im = m.idx();
  const int out = int(tp.num_nodes());
  auto sg = std::make_shared<std::vector<std::uint32_t>>(std::move(seg));
  return tp.emit("segment_sum_rows", {n_seg, c}, std::move(y), {im}, [im, c, sg, out](Tape<T>& t) {
    if (!t.wants_grad(im)) return;
    const auto& g = t.node(out).grad;
    auto& dm = t.grad_of(im);
    for (std::size_t i = 0; i < sg->size(); ++i)
      for (std::size_t j = 0; j < c; ++j) dm[i * c + j] += g[(*sg)[i] * c + j];
  });
}

// Mean over explicit row groups (a row may appear in several groups); empty
// groups produce a zero row.
template <typename T>
Value<T> group_mean_rows(Value<T> m, std::vector<std::vector<std::uint32_t>> groups) {
  Tape<T>& tp = *m.tape();
  detail::require_matrix("group_mean_rows", m);
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  const std::size_t ng = groups.size();
  for (const auto& grp : groups)
    for (auto i : grp)
      if (i >= r) fail("group_mean_rows: row index out of range");
  const auto& M = m.data();
  std::vector<T> y(ng * c, T(0));
  for (std::size_t gidx = 0; gidx < ng; ++gidx) {
    if (groups[gidx].empty()) continue;
    const T w = T(1) / T(groups[gidx].size());
    for (auto i : groups[gidx])
      for (std::size_t j = 0; j < c; ++j) y[gidx * c + j] += w * M[i * c + j];
  }
  const int im = m.idx();
  const int out = int(tp.num_nodes());
  auto gs = std::make_shared<std::vector<std::vector<std::uint32_t>>>(std::move(groups));
  return tp.emit("group_mean_rows", {ng, c}, std::move(y), {im}, [im, c, gs, out](Tape<T>& t) {
    if (!t.wants_grad(im)) return;
    const auto& g = t.node(out).grad;
    auto& dm = t.grad_of(im);
    for (std::size_t gidx = 0; gidx < gs->size(); ++gidx) {
      const auto& grp = (*gs)[gidx];
      if (grp.empty()) continue;
      const T w = T(1) / T(grp.size());
      for (auto i : grp)
        for (std::size_t j = 0; j < c; ++j) dm[i * c + j] += w * g[gidx * c + j];
    }
  });
}

// --- broadcasting helpers ---------------------------------------------------------

// Row i of m scaled by v[i].
template <typename T>
Value<T> scale_rows(Value<T> m, Value<T> v) {
  Tape<T>& tp = detail::same_tape("scale_rows", m, v);
  detail::require_matrix("scale_rows", m);
  detail::require_vector("scale_rows", v);
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  if (v.shape()[0] != r)
    fail("scale_rows: shape mismatch " + shape_str(m.shape()) + " vs " + shape_str(v.shape()));
  const auto& M = m.data();
  const auto& x = v.data();
  std::vector<T> y(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = M[i * c + j] * x[i];
  const int im = m.idx(), iv = v.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("scale_rows", {r, c}, std::move(y), {im, iv}, [im, iv, r, c, out](Tape<T>& t) {
    const auto& g = t.node(out).grad;
    const auto& M = t.data_of(im);
    const auto& x = t.data_of(iv);
    if (t.wants_grad(im)) {
      auto& dm = t.grad_of(im);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dm[i * c + j] += g[i * c + j] * x[i];
    }
    if (t.wants_grad(iv)) {
      auto& dv = t.grad_of(iv);
      for (std::size_t i = 0; i < r; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * M[i * c + j];
        dv[i] += acc;
      }
    }
  });
}

// m + broadcast of b over rows (b has one entry per column).
template <typename T>
Value<T> add_bias_rows(Value<T> m, Value<T> b) {
  Tape<T>& tp = detail::same_tape("add_bias_rows", m, b);
  detail::require_matrix("add_bias_rows", m);
  detail::require_vector("add_bias_rows", b);
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  if (b.shape()[0] != c)
    fail("add_bias_rows: shape mismatch " + shape_str(m.shape()) + " vs " + shape_str(b.shape()));
  const auto& M = m.data();
  const auto& x = b.data();
  std::vector<T> y(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = M[i * c + j] + x[j];
  const int im = m.idx(), ib = b.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("add_bias_rows", {r, c}, std::move(y), {im, ib}, [im, ib, r, c, out](Tape<T>& t) {
    const auto& g = t.node(out).grad;
    if (t.wants_grad(im)) {
      auto& dm = t.grad_of(im);
      for (std::size_t k = 0; k < g.size(); ++k) dm[k] += g[k];
    }
    if (t.wants_grad(ib)) {
      auto& db = t.grad_of(ib);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) db[j] += g[i * c + j];
    }
  });
}

// m + broadcast of b over columns (b has one entry per row).
template <typename T>
Value<T> add_bias_cols(Value<T> m, Value<T> b) {
  Tape<T>& tp = detail::same_tape("add_bias_cols", m, b);
  detail::require_matrix("add_bias_cols", m);
  detail::require_vector("add_bias_cols", b);
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  if (b.shape()[0] != r)
    fail("add_bias_cols: shape mismatch " + shape_str(m.shape()) + " vs " + shape_str(b.shape()));
  const auto& M = m.data();
  const auto& x = b.data();
  std::vector<T> y(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = M[i * c + j] + x[i];
  const int im = m.idx(), ib = b.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("add_bias_cols", {r, c}, std::move(y), {im, ib}, [im, ib, r, c, out](Tape<T>& t) {
    const auto& g = t.node(out).grad;
    if (t.wants_grad(im)) {
      auto& dm = t.grad_of(im);
      for (std::size_t k = 0; k < g.size(); ++k) dm[k] += g[k];
    }
    if (t.wants_grad(ib)) {
      auto& db = t.grad_of(ib);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) db[i] += g[i * c + j];
    }
  });
}

// x * s and x / s with s a scalar Value.
template <typename T>
Value<T> scale_by_scalar(Value<T> x, Value<T> s) {
  if (s.size() != 1) fail("scale_by_scalar: scale must be scalar");
  return mul(x, s);
}

template <typename T>
Value<T> div_by_scalar(Value<T> x, Value<T> s) {
  if (s.size() != 1) fail("div_by_scalar: divisor must be scalar");
  return div(x, s);
}

template <typename T>
Value<T> add_scalar_value(Value<T> x, Value<T> s) {
  if (s.size() != 1) fail("add_scalar_value: addend must be scalar");
  return add(x, s);
}

// --- normalization ------------------------------------------------------------------

template <typename T>
Value<T> layer_norm_rows(Value<T> m, Value<T> gamma, Value<T> beta, T eps = T(1e-5)) {
  Tape<T>& tp = detail::same_tape("layer_norm_rows", m, gamma);
  detail::require_matrix("layer_norm_rows", m);
  detail::require_vector("layer_norm_rows", gamma);
  detail::require_vector("layer_norm_rows", beta);
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  if (gamma.shape()[0] != c || beta.shape()[0] != c)
    fail("layer_norm_rows: parameter length mismatch for " + shape_str(m.shape()));
  const auto& M = m.data();
  const auto& gm = gamma.data();
  const auto& bt = beta.data();
  std::vector<T> y(r * c);
  std::vector<T> xhat(r * c);
  std::vector<T> inv_sd(r);
  for (std::size_t i = 0; i < r; ++i) {
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) mu += M[i * c + j];
    mu /= T(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      const T d = M[i * c + j] - mu;
      var += d * d;
    }
    var /= T(c);
    const T isd = T(1) / std::sqrt(var + eps);
    inv_sd[i] = isd;
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (M[i * c + j] - mu) * isd;
      y[i * c + j] = gm[j] * xhat[i * c + j] + bt[j];
    }
  }
  const int im = m.idx(), ig = gamma.idx(), ib = beta.idx();
  const int out = int(tp.num_nodes());
  auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
  auto sd = std::make_shared<std::vector<T>>(std::move(inv_sd));
  return tp.emit("layer_norm_rows", {r, c}, std::move(y), {im, ig, ib},
                 [im, ig, ib, r, c, xh, sd, out](Tape<T>& t) {
                   const auto& g = t.node(out).grad;
                   const auto& gm = t.data_of(ig);
                   if (t.wants_grad(ig)) {
                     auto& dg = t.grad_of(ig);
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j)
                         dg[j] += g[i * c + j] * (*xh)[i * c + j];
                   }
                   if (t.wants_grad(ib)) {
                     auto& db = t.grad_of(ib);
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j) db[j] += g[i * c + j];
                   }
                   if (t.wants_grad(im)) {
                     auto& dm = t.grad_of(im);
                     for (std::size_t i = 0; i < r; ++i) {
                       T mean_dxh = T(0), mean_dxh_xh = T(0);
                       for (std::size_t j = 0; j < c; ++j) {
                         const T dxh = g[i * c + j] * gm[j];
                         mean_dxh += dxh;
                         mean_dxh_xh += dxh * (*xh)[i * c + j];
                       }
                       mean_dxh /= T(c);
                       mean_dxh_xh /= T(c);
                       for (std::size_t j = 0; j < c; ++j) {
                         const T dxh = g[i * c + j] * gm[j];
                         dm[i * c + j] +=
                             (*sd)[i] * (dxh - mean_dxh - (*xh)[i * c + j] * mean_dxh_xh);
                       }
                     }
                   }
                 });
}

// --- similarity -----------------------------------------------------------------

// Cosine similarity; a zero-norm operand yields 0 with zero gradient and a
// tape note (arises with empty causal selections).
template <typename T>
Value<T> cosine_sim(Value<T> a, Value<T> b) {
  Tape<T>& tp = detail::same_tape("cosine_sim", a, b);
  detail::require_vector("cosine_sim", a);
  detail::require_vector("cosine_sim", b);
  if (a.shape() != b.shape())
    fail("cosine_sim: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto& x = a.data();
  const auto& yv = b.data();
  T xy = T(0), xx = T(0), yy = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    xy += x[i] * yv[i];
    xx += x[i] * x[i];
    yy += yv[i] * yv[i];
  }
  const T tiny = std::numeric_limits<T>::min() * T(1e4);
  const bool degenerate = (xx <= tiny || yy <= tiny);
  if (degenerate) tp.note("cosine_sim: zero-norm operand, similarity defined as 0");
  const T na = std::sqrt(xx), nb = std::sqrt(yy);
  const T cosv = degenerate ? T(0) : xy / (na * nb);
  const int ia = a.idx(), ib = b.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("cosine_sim", {}, {cosv}, {ia, ib},
                 [ia, ib, na, nb, cosv, degenerate, out](Tape<T>& t) {
                   if (degenerate) return;
                   const T g = t.node(out).grad[0];
                   const auto& x = t.data_of(ia);
                   const auto& y = t.data_of(ib);
                   if (t.wants_grad(ia)) {
                     auto& da = t.grad_of(ia);
                     for (std::size_t i = 0; i < x.size(); ++i)
                       da[i] += g * (y[i] / (na * nb) - cosv * x[i] / (na * na));
                   }
                   if (t.wants_grad(ib)) {
                     auto& db = t.grad_of(ib);
                     for (std::size_t i = 0; i < x.size(); ++i)
                       db[i] += g * (x[i] / (na * nb) - cosv * y[i] / (nb * nb));
                   }
                 });
}

// --- straight-through estimator ----------------------------------------------------

// mask = sample + p - detach(p): the forward equals `sample` exactly, the
// backward passes the incoming gradient to p unchanged (identity Jacobian).
// `detached` defaults to p's current data; a finite-difference harness passes
// the base-point probabilities instead so the evaluated function is the same
// smooth surrogate the backward rule differentiates.
template <typename T>
Value<T> ste_mask(Value<T> p, const std::vector<T>& sample,
                  const std::vector<T>* detached = nullptr) {
  Tape<T>& tp = *p.tape();
  detail::require_vector("ste_mask", p);
  if (sample.size() != p.shape()[0])
    fail("ste_mask: length mismatch " + shape_str(p.shape()) + " vs [" +
         std::to_string(sample.size()) + "]");
  for (T v : p.data())
    if (v < T(0) || v > T(1)) fail("ste_mask: probability outside [0,1]");
  for (T v : sample)
    if (v != T(0) && v != T(1)) fail("ste_mask: sample entries must be binary");
  if (detached && detached->size() != sample.size())
    fail("ste_mask: detached probabilities length mismatch");
  std::vector<T> data(sample);
  if (detached)
    for (std::size_t i = 0; i < data.size(); ++i)
      data[i] += p.data()[i] - (*detached)[i];  // zero when detached == p
  const int ip = p.idx();
  const int out = int(tp.num_nodes());
  return tp.emit("ste_mask", p.shape(), std::move(data), {ip}, [ip, out](Tape<T>& t) {
    if (!t.wants_grad(ip)) return;
    const auto& g = t.node(out).grad;
    auto& dp = t.grad_of(ip);
    for (std::size_t i = 0; i < g.size(); ++i) dp[i] += g[i];
  });
}

}  // namespace cmil
