// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "thor/config.hpp"
#include "thor/errors.hpp"

namespace thor {

struct Preset {
  std::string name;
  std::string description;
  RunConfig config;
};

namespace detail {

/// Shared desk-scale base: a cipher task with local reordering and a small
/// training split, so regularization has room to matter.
inline RunConfig cipher_base(const std::string& name) {
  RunConfig c;
  c.name = name;
  c.run_dir = "runs/" + name;
  c.model.dropout_rate = 0.1;
  c.task.kind = TaskKind::kCipher;
  c.task.reorder_window = 3;
  c.task.train_size = 250;
  c.task.valid_size = 200;
  c.task.test_size = 200;
  c.training.learning_rate = 0.005;
  c.training.warmup_steps = 100;
  c.training.batch_tokens = 256;
  c.training.total_steps = 3000;
  c.eval_interval = 250;
  c.telemetry_interval = 50;
  return c;
}

inline RunConfig thor(const std::string& name, Objective objective, std::size_t experts = 2) {
  RunConfig c = cipher_base(name);
  c.experts = {experts, RoutingMode::kThorStochastic, 1};
  c.training.objective = objective;
  return c;
}

inline RunConfig switch_model(const std::string& name, RoutingMode mode, Objective objective) {
  RunConfig c = cipher_base(name);
  c.experts = {2, mode, 1};
  c.training.objective = objective;
  return c;
}

}  // namespace detail

inline std::vector<Preset> presets() {
  using detail::switch_model;
  using detail::thor;
  std::vector<Preset> out;
  out.push_back({"thor-tiny-cipher", "THOR, 2 stochastic experts, CE + CE + alpha*CR with alpha = 5",
                 thor("thor-tiny-cipher", Objective::kThorFull)});
  out.push_back({"thor-ce1-cr", "loss ablation: first-pass CE plus consistency term",
                 thor("thor-ce1-cr", Objective::kCe1Cr)});
  out.push_back({"thor-ce1-ce2", "loss ablation: two CE terms, no consistency term",
                 thor("thor-ce1-ce2", Objective::kCe1Ce2)});
  out.push_back({"thor-ce1-only", "loss ablation: one pass, one random expert per layer",
                 thor("thor-ce1-only", Objective::kCe1Only)});
  {
    RunConfig c = detail::cipher_base("vanilla-tiny-cipher");
    c.experts = {1, RoutingMode::kThorStochastic, 1};
    c.training.objective = Objective::kBaselineCe;
    out.push_back({"vanilla-tiny-cipher", "dense transformer baseline (one expert per layer)", c});
  }
  out.push_back({"switch-no-balance", "token-level top-1 gate, CE only (no balancing loss)",
                 switch_model("switch-no-balance", RoutingMode::kSwitchToken, Objective::kBaselineCe)});
  out.push_back({"switch-with-balance", "token-level top-1 gate, CE + 0.01 * load-balancing loss",
                 switch_model("switch-with-balance", RoutingMode::kSwitchToken, Objective::kSwitchCePlusAux)});
  out.push_back({"switch-sentence", "sentence-level top-1 gate on mean token representation, CE + balancing",
                 switch_model("switch-sentence", RoutingMode::kSwitchSentence, Objective::kSwitchCePlusAux)});
  out.push_back({"switch-random", "uniformly random top-1 routing per token, no gate",
                 switch_model("switch-random", RoutingMode::kSwitchRandom, Objective::kBaselineCe)});
  {
    RunConfig c = switch_model("gated-top2", RoutingMode::kGatedTopK, Objective::kSwitchCePlusAux);
    c.experts.top_k = 2;
    out.push_back({"gated-top2", "softmax gate, top-2 weighted expert mixture, CE + balancing", c});
  }
  for (std::size_t n : {2u, 4u, 8u}) {
    const std::string name = "thor-experts-" + std::to_string(n);
    out.push_back({name,
                   "expert-count sweep point (N = " + std::to_string(n) +
                       "); compare train CE and valid BLEU across N. Reports the trend, asserts nothing",
                   thor(name, Objective::kThorFull, n)});
  }
  return out;
}

inline RunConfig preset(const std::string& name) {
  for (auto& p : presets())
    if (p.name == name) return p.config;
  std::string names;
  for (const auto& p : presets()) names += (names.empty() ? "" : ", ") + p.name;
  throw ConfigError("preset", "unknown preset '" + name + "' (available: " + names + ")");
}

}  // namespace thor
