#pragma once

#include <cmath>
#include <vector>

#include "cmil/tensor.hpp"

namespace cmil {

// First-order adaptive-moment optimizer over a ParamStore. Moment buffers are
// keyed by registration index, so stepping order is deterministic.
template <typename T>
class Adam {
 public:
  explicit Adam(ParamStore<T>& params, double lr = 1e-4, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : params_(&params), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params.size());
    v_.resize(params.size());
    std::size_t i = 0;
    for (auto& [name, t] : params.items()) {
      m_[i].assign(t.size(), 0.0);
      v_[i].assign(t.size(), 0.0);
      ++i;
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  // One update from the accumulated gradients; callers zero grads afterwards.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    std::size_t i = 0;
    for (auto& [name, p] : params_->items()) {
      if (!p.grad.empty()) {
        for (std::size_t k = 0; k < p.size(); ++k) {
          const double g = double(p.grad[k]);
          m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g;
          v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g * g;
          const double mh = m_[i][k] / bc1;
          const double vh = v_[i][k] / bc2;
          p.data[k] = T(double(p.data[k]) - lr_ * mh / (std::sqrt(vh) + eps_));
        }
      }
      ++i;
    }
  }

 private:
  ParamStore<T>* params_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace cmil
