#pragma once

#include <cmath>

#include "cmil/rng.hpp"
#include "cmil/tensor.hpp"

namespace cmil {

template <typename T>
void init_normal(Tensor<T>& t, Rng rng, double stddev) {
  for (auto& v : t.data) v = T(rng.normal(0.0, stddev));
}

// Scaled by fan-in (last shape dimension is the input width for our
// row-vector-times-matrix convention).
template <typename T>
void init_xavier(Tensor<T>& t, Rng rng) {
  const std::size_t fan_in = t.shape.empty() ? 1 : t.shape[0];
  init_normal(t, rng, 1.0 / std::sqrt(double(fan_in > 0 ? fan_in : 1)));
}

template <typename T>
void init_const(Tensor<T>& t, T v) {
  for (auto& x : t.data) x = v;
}

}  // namespace cmil
