#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cmil/ops.hpp"
#include "cmil/tape.hpp"
#include "cmil/tensor.hpp"

namespace cmil {

// Central finite-difference audit of a scalar loss. `f` rebuilds the loss
// from the current contents of `params` on the given tape; any randomness
// inside f must be frozen (recorded draws) so repeated evaluations see the
// same function. Returns max over coordinates of
//   |analytic - central| / max(1, |central|).
template <typename T, typename F>
T grad_check(std::vector<Tensor<T>*> params, F f, T step) {
  // analytic pass
  for (auto* p : params) p->zero_grad();
  {
    Tape<T> tape;
    Value<T> root = f(tape);
    if (root.size() != 1) fail("grad_check: loss must be scalar");
    if (!std::isfinite(double(root.item())))
      fail("grad_check: non-finite loss at base point");
    tape.backward(root);
  }

  auto eval = [&]() -> T {
    Tape<T> tape;
    tape.set_grad_enabled(false);
    return f(tape).item();
  };

  T max_rel = T(0);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& p = *params[pi];
    for (std::size_t k = 0; k < p.data.size(); ++k) {
      const T saved = p.data[k];
      p.data[k] = saved + step;
      const T fp = eval();
      p.data[k] = saved - step;
      const T fm = eval();
      p.data[k] = saved;
      if (!std::isfinite(double(fp)) || !std::isfinite(double(fm)))
        fail("grad_check: non-finite value at param " + std::to_string(pi) +
             " coord " + std::to_string(k));
      const T central = (fp - fm) / (T(2) * step);
      const T analytic = p.grad.empty() ? T(0) : p.grad[k];
      const T rel = std::abs(analytic - central) / std::max(T(1), std::abs(central));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace cmil
