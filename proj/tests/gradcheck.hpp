// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference gradient checking, test-side oracle.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "kmae/rng.hpp"
#include "kmae/tensor.hpp"

namespace kmae::test {

// Rebuilds the loss with build_loss(), runs backward once for the analytic
// gradients, then compares against central differences coordinate by
// coordinate on every tensor in wiggle. Returns the max relative error.
template <class F>
double gradcheck_max_rel_error(F&& build_loss,
                               std::vector<Tensor<double>> wiggle,
                               double h = 1e-5) {
  for (auto& t : wiggle) t.zero_grad();
  Tensor<double> loss = build_loss();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& t : wiggle) {
    if (t.has_grad())
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    else
      analytic.emplace_back(static_cast<size_t>(t.size()), 0.0);
  }

  double max_rel = 0.0;
  for (size_t ti = 0; ti < wiggle.size(); ++ti) {
    auto vals = wiggle[ti].value();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = build_loss().item();
      vals[i] = orig - h;
      const double fm = build_loss().item();
      vals[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double g = analytic[ti][i];
      const double rel = std::abs(fd - g) / std::max(std::abs(fd) + std::abs(g), 1e-6);
      if (rel > max_rel) max_rel = rel;
    }
  }
  return max_rel;
}

inline Tensor<double> random_tensor(std::vector<int> shape, Rng& rng,
                                    double scale = 1.0,
                                    bool requires_grad = true) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape), requires_grad);
  for (auto& v : t.value()) v = rng.normal() * scale;
  return t;
}

}  // namespace kmae::test
