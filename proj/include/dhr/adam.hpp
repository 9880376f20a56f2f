#ifndef DHR_ADAM_HPP
#define DHR_ADAM_HPP

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "dhr/error.hpp"

namespace dhr {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment optimizer over one flat parameter block, no weight decay.
template <class T>
class Adam {
 public:
  Adam(std::size_t n, AdamConfig config) : config_(config), m_(n, T(0)), v_(n, T(0)) {
    if (!(config_.lr > 0)) throw ArgumentError("learning rate must be positive");
  }

  void step(std::span<T> params, std::span<const T> grad) {
    if (params.size() != m_.size() || grad.size() != m_.size()) throw InternalError("adam: size mismatch");
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const T step_size = static_cast<T>(config_.lr / c1);
    const T sqrt_c2 = static_cast<T>(std::sqrt(c2));
    const T eps = static_cast<T>(config_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = static_cast<T>(b1) * m_[i] + static_cast<T>(1 - b1) * grad[i];
      v_[i] = static_cast<T>(b2) * v_[i] + static_cast<T>(1 - b2) * grad[i] * grad[i];
      params[i] -= step_size * m_[i] / (std::sqrt(v_[i]) / sqrt_c2 + eps);
    }
  }

  std::size_t steps_taken() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return config_; }

 private:
  AdamConfig config_;
  std::vector<T> m_;
  std::vector<T> v_;
  std::size_t t_ = 0;
};

}  // namespace dhr

#endif  // DHR_ADAM_HPP
