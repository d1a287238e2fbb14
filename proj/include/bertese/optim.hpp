// SPDX-License-Identifier: Apache-2.0
//
// Adam with decoupled weight decay, plus global-norm gradient clipping.

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "bertese/model.hpp"

namespace bertese {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
class AdamW {
 public:
  AdamW(std::vector<NamedParam<T>> params, AdamWOptions opts = {})
      : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      first_.emplace_back(p.tensor.numel(), 0.0);
      second_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  const std::vector<NamedParam<T>>& params() const { return params_; }
  std::int64_t step_count() const { return step_; }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// One update with the gradients currently held by the parameters.
  /// Parameters without a gradient are treated as having a zero gradient.
  void step(double lr) {
    if (!(lr > 0)) throw std::invalid_argument("AdamW: learning rate must be positive");
    ++step_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto values = p.tensor.data();
      const auto grad = p.tensor.grad();
      const bool has_grad = p.tensor.has_grad();
      auto& m = first_[i];
      auto& v = second_[i];
      const double decay = p.decay ? 1.0 - lr * opts_.weight_decay : 1.0;
      for (std::size_t k = 0; k < values.size(); ++k) {
        const double g = has_grad ? static_cast<double>(grad[k]) : 0.0;
        m[k] = opts_.beta1 * m[k] + (1.0 - opts_.beta1) * g;
        v[k] = opts_.beta2 * v[k] + (1.0 - opts_.beta2) * g * g;
        const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + opts_.epsilon);
        values[k] = static_cast<T>(static_cast<double>(values[k]) * decay - lr * update);
      }
    }
  }

 private:
  std::vector<NamedParam<T>> params_;
  AdamWOptions opts_;
  std::vector<std::vector<double>> first_, second_;
  std::int64_t step_ = 0;
};

/// Scales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<NamedParam<T>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double s = max_norm / norm;
    for (auto p : params) {
      if (!p.tensor.has_grad()) continue;
      for (T& g : p.tensor.mutable_grad()) g = static_cast<T>(static_cast<double>(g) * s);
    }
  }
  return norm;
}

}  // namespace bertese
