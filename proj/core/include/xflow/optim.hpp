#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "xflow/grad.hpp"

namespace xflow {

/// Adam with bias correction; state is created lazily on the first step.
template <typename T>
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<grad::NumArray<T>> params, std::span<const grad::NumArray<T>> grads) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto values = params[i].values();
      const auto g = grads[i].values();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < values.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
        const double update = lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        values[j] = static_cast<T>(static_cast<double>(values[j]) - update);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace xflow
