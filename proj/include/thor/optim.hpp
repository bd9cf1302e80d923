// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "thor/config.hpp"
#include "thor/errors.hpp"
#include "thor/experts.hpp"

namespace thor {

/// First/second moment estimates and step count of one parameter.
struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;

  bool operator==(const AdamMoments&) const = default;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

/// One bias-corrected Adam step on a single parameter.
inline void adam_update(std::span<double> param, std::span<const double> grad, AdamMoments& state, double lr,
                        const AdamHyper& h) {
  if (grad.size() != param.size()) throw ShapeError("adam_update: gradient size differs from parameter size");
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * grad[i];
    state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + h.eps);
  }
}

/// Linear warmup to `peak`, then inverse square-root decay. Steps are 1-based.
inline double learning_rate_at(std::size_t step, double peak, std::size_t warmup) {
  const double s = static_cast<double>(std::max<std::size_t>(step, 1));
  if (warmup == 0) return peak / std::sqrt(s);
  const double w = static_cast<double>(warmup);
  return peak * std::min(s / w, std::sqrt(w / s));
}

/// Adam over a fixed list of named parameters. Parameters without a gradient
/// in a step (e.g. experts that were not activated) are left untouched.
class Adam {
 public:
  Adam(std::vector<NamedTensor> params, const AdamHyper& hyper) : params_(std::move(params)), hyper_(hyper) {
    state_.resize(params_.size());
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      if (!p.has_grad()) continue;
      adam_update(p.data(), p.grad(), state_[i], lr, hyper_);
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  const std::vector<NamedTensor>& parameters() const { return params_; }
  const std::vector<AdamMoments>& moments() const { return state_; }
  std::vector<AdamMoments>& mutable_moments() { return state_; }

 private:
  std::vector<NamedTensor> params_;
  AdamHyper hyper_;
  std::vector<AdamMoments> state_;
};

inline AdamHyper adam_hyper(const TrainingConfig& c) { return {c.beta1, c.beta2, c.adam_eps}; }

}  // namespace thor
