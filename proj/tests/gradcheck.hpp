// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "thor/rng.hpp"
#include "thor/tensor.hpp"

namespace thor::testing {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst;
};

/// Compares backward() against central differences for every element of every input.
inline GradCheckResult grad_check(const std::function<ad::Tensor()>& loss, std::vector<ad::Tensor> inputs,
                                  double step = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  loss().backward();
  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                      : std::vector<double>(t.numel(), 0.0);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double saved = t.data()[i];
      t.data()[i] = saved + step;
      const double up = loss().item();
      t.data()[i] = saved - step;
      const double down = loss().item();
      t.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
      const double err = std::abs(numeric - analytic[i]) / denom;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst = "input " + std::to_string(k) + "[" + std::to_string(i) + "] analytic " +
                       std::to_string(analytic[i]) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return result;
}

inline ad::Tensor random_parameter(ad::Shape shape, std::uint64_t seed, double stddev = 1.0) {
  Rng rng(seed);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return ad::Tensor::parameter(std::move(shape), std::move(v));
}

}  // namespace thor::testing
