// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "kmae/common.hpp"
#include "kmae/tensor.hpp"

namespace kmae {

// Warmup-plus-cosine learning rate schedule. Linear from 0 to lr_peak over
// warmup_steps, cosine decay to 0 at total_steps, 0 beyond.
struct ScheduleConfig {
  long long warmup_steps = 1;
  long long total_steps = 2;
  double lr_peak = 1e-4;

  void validate() const {
    if (warmup_steps < 1 || total_steps <= warmup_steps)
      throw ConfigError("schedule: need 1 <= warmup_steps < total_steps");
    if (!(lr_peak >= 0)) throw ConfigError("schedule: lr_peak must be >= 0");
  }

  static ScheduleConfig paper_preset(long long total_steps) {
    ScheduleConfig c;
    c.total_steps = total_steps;
    c.warmup_steps = std::max<long long>(1, total_steps / 10);
    c.lr_peak = 1e-4;
    return c;
  }
};

inline double lr_at_step(long long step, const ScheduleConfig& cfg) {
  cfg.validate();
  if (step < 0) throw ContractError("lr_at_step: negative step");
  if (step >= cfg.total_steps) return 0.0;
  if (step <= cfg.warmup_steps)
    return cfg.lr_peak * static_cast<double>(step) /
           static_cast<double>(cfg.warmup_steps);
  const double progress = static_cast<double>(step - cfg.warmup_steps) /
                          static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.lr_peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// Bias-corrected Adam. Moment slots are laid out in the order the parameter
// list was handed in; the update loop is strictly sequential so identical
// inputs produce bit-identical state evolution.
template <class T>
class Adam {
 public:
  explicit Adam(std::vector<Tensor<T>> params, T beta1 = T(0.9),
                T beta2 = T(0.999), T epsilon = T(1e-8))
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(static_cast<size_t>(p.size()), T(0));
      v_.emplace_back(static_cast<size_t>(p.size()), T(0));
    }
  }

  long long step_count() const { return step_; }
  const std::vector<Tensor<T>>& params() const { return params_; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  void set_step_count(long long s) { step_ = s; }

  // One update over all parameters; missing gradients count as zero.
  void step(T lr) {
    ++step_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(step_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(step_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      auto& p = params_[pi];
      auto vals = p.value();
      auto& m = m_[pi];
      auto& v = v_[pi];
      const bool has_g = p.has_grad();
      if (has_g && p.grad().size() != vals.size())
        throw DimensionError("adam: gradient/parameter size mismatch");
      for (size_t i = 0; i < vals.size(); ++i) {
        const T g = has_g ? p.grad()[i] : T(0);
        m[i] = beta1_ * m[i] + (T(1) - beta1_) * g;
        v[i] = beta2_ * v[i] + (T(1) - beta2_) * g * g;
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        vals[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  T beta1_, beta2_, eps_;
  long long step_ = 0;
};

}  // namespace kmae
