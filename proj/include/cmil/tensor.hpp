#pragma once

#include <cstddef>
#include <deque>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cmil {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

// Dense row-major tensor. Holds learnable parameters and any value that
// outlives a single tape (gradients accumulate into `grad`).
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape), T(0)) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape))
      fail("tensor: data length " + std::to_string(data.size()) +
           " does not match shape " + shape_str(shape));
  }

  std::size_t size() const { return data.size(); }

  void zero_grad() { grad.assign(data.size(), T(0)); }

  T& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }
};

// Named parameter collection; iteration order is registration order so the
// optimizer walk is deterministic. Storage is a deque so tensor addresses
// stay valid as parameters are registered.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Shape shape) {
    for (auto& it : items_)
      if (it.first == name) fail("param store: duplicate name " + name);
    items_.emplace_back(name, Tensor<T>(std::move(shape)));
    return items_.back().second;
  }

  Tensor<T>* find(const std::string& name) {
    for (auto& it : items_)
      if (it.first == name) return &it.second;
    return nullptr;
  }

  const Tensor<T>* find(const std::string& name) const {
    for (auto& it : items_)
      if (it.first == name) return &it.second;
    return nullptr;
  }

  std::deque<std::pair<std::string, Tensor<T>>>& items() { return items_; }
  const std::deque<std::pair<std::string, Tensor<T>>>& items() const { return items_; }

  std::size_t size() const { return items_.size(); }

  void zero_grads() {
    for (auto& it : items_) it.second.zero_grad();
  }

 private:
  std::deque<std::pair<std::string, Tensor<T>>> items_;
};

}  // namespace cmil
