#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "uvflow/autodiff.hpp"

namespace uvflow {

/// Cosine decay from base to 0 over total steps.
inline double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  double p = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * p));
}

/// Adam with bias correction. Moments are kept in double regardless of the
/// parameter precision so float and double runs share one update rule.
template <typename T>
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(std::vector<ad::BasicParameter<T>>& params, double lr) {
    if (m_.size() != params.size()) {
      m_.assign(params.size(), {});
      v_.assign(params.size(), {});
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].value.size(), 0.0);
        v_[i].assign(params[i].value.size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (p.grad.size() != p.value.size()) continue;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        double g = static_cast<double>(p.grad[k]);
        m[k] = b1_ * m[k] + (1.0 - b1_) * g;
        v[k] = b2_ * v[k] + (1.0 - b2_) * g * g;
        double upd = lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
        p.value[k] = static_cast<T>(static_cast<double>(p.value[k]) - upd);
      }
    }
  }

  long steps() const { return t_; }

 private:
  double b1_, b2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace uvflow
