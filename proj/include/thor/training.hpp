// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "thor/config.hpp"
#include "thor/errors.hpp"
#include "thor/experts.hpp"
#include "thor/ops.hpp"
#include "thor/optim.hpp"
#include "thor/tasks.hpp"
#include "thor/transformer.hpp"

namespace thor {

/// Scalar values of one training step. Terms an objective does not use are 0.
struct LossBreakdown {
  double ce1 = 0.0;
  double ce2 = 0.0;
  double cr = 0.0;
  double aux = 0.0;
  double total = 0.0;

  bool operator==(const LossBreakdown&) const = default;
};

/// Loss graph plus its breakdown, before any backward pass.
struct LossGraph {
  Tensor total;
  LossBreakdown values;
};

/// Per-step knobs shared by every objective.
struct StepOptions {
  double alpha = 5.0;
  double label_smoothing = 0.1;
  double aux_coefficient = 0.01;
  const ExpertChoice* forced_choice = nullptr;    // overrides the sampled experts
  std::vector<RoutingFragment>* telemetry = nullptr;
};

inline StepOptions step_options(const TrainingConfig& c) {
  return {c.alpha, c.label_smoothing, c.aux_coefficient, nullptr, nullptr};
}

inline bool is_thor_objective(Objective o) {
  return o == Objective::kThorFull || o == Objective::kCe1Cr || o == Objective::kCe1Ce2 || o == Objective::kCe1Only;
}

/// Route plan that activates expert `choice.layers[l][slot]` in layer l.
inline RoutePlan plan_for_slot(const ExpertChoice& choice, std::size_t slot) {
  RoutePlan plan;
  plan.reserve(choice.layers.size());
  for (const auto& layer : choice.layers) plan.emplace_back(FixedExpert{layer.at(slot)});
  return plan;
}

/// Symmetric consistency term: 0.5 * (KL(p1 || p2) + KL(p2 || p1)) over non-pad rows.
inline Tensor consistency_term(const Tensor& logits1, const Tensor& logits2, std::span<const std::uint8_t> rows) {
  Tensor p1 = ad::softmax(logits1), p2 = ad::softmax(logits2);
  return ad::scale(ad::add(ad::kl_divergence(p1, p2, rows), ad::kl_divergence(p2, p1, rows)), 0.5);
}

inline std::vector<std::uint8_t> target_rows(const Batch& b) {
  std::vector<std::uint8_t> rows(b.target_out.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = b.target_out[i] == kPadId ? 0 : 1;
  return rows;
}

/// Builds the loss for a THOR objective: two passes through a sampled expert
/// pair (one pass for CE1_only), with the terms the variant keeps.
inline LossGraph thor_loss(const Seq2SeqTransformer& model, const Batch& batch, Objective variant,
                           const StepOptions& opts, Rng& rng) {
  if (model.expert_config().mode != RoutingMode::kThorStochastic) {
    throw RoutingError("THOR objectives need a model with stochastic expert layers");
  }
  if (!is_thor_objective(variant)) throw ConfigError("training.objective", "not a THOR objective: " + enum_name(variant));
  const std::size_t L = model.num_expert_layers(), N = model.expert_config().num_experts;
  const bool single = variant == Objective::kCe1Only;
  const ExpertChoice choice =
      opts.forced_choice ? *opts.forced_choice : thor_select(rng, L, N, single ? SelectCount::kOne : SelectCount::kPair);
  if (choice.layers.size() != L) throw RoutingError("expert choice must cover every expert layer");

  ForwardOptions fwd{true, &rng, nullptr, opts.telemetry, nullptr};
  const RoutePlan plan1 = plan_for_slot(choice, 0);
  fwd.plan = &plan1;
  Tensor logits1 = model.forward(batch, fwd);
  Tensor ce1 = ad::cross_entropy(logits1, batch.target_out, kPadId, opts.label_smoothing);

  LossGraph g;
  g.values.ce1 = ce1.item();
  if (single) {
    g.total = ce1;
    g.values.total = g.total.item();
    return g;
  }

  const RoutePlan plan2 = plan_for_slot(choice, 1);
  fwd.plan = &plan2;
  Tensor logits2 = model.forward(batch, fwd);
  Tensor ce2 = ad::cross_entropy(logits2, batch.target_out, kPadId, opts.label_smoothing);
  Tensor cr;
  if (variant != Objective::kCe1Ce2) {
    cr = consistency_term(logits1, logits2, target_rows(batch));
    g.values.cr = cr.item();
  }

  switch (variant) {
    case Objective::kThorFull:
      g.values.ce2 = ce2.item();
      g.total = opts.alpha == 0.0 ? ad::add(ce1, ce2) : ad::add(ad::add(ce1, ce2), ad::scale(cr, opts.alpha));
      break;
    case Objective::kCe1Cr:
      g.total = ad::add(ce1, ad::scale(cr, opts.alpha));
      break;
    case Objective::kCe1Ce2:
      g.values.ce2 = ce2.item();
      g.total = ad::add(ce1, ce2);
      break;
    default:
      break;
  }
  g.values.total = g.total.item();
  return g;
}

/// Single-pass CE loss for vanilla, gated and Switch models, plus the mean
/// load-balancing term over gated layers when the objective asks for it.
inline LossGraph baseline_loss(const Seq2SeqTransformer& model, const Batch& batch, Objective objective,
                               const StepOptions& opts, Rng& rng) {
  if (objective != Objective::kBaselineCe && objective != Objective::kSwitchCePlusAux) {
    throw ConfigError("training.objective", "not a baseline objective: " + enum_name(objective));
  }
  const auto& ec = model.expert_config();
  if (ec.mode == RoutingMode::kThorStochastic && ec.num_experts > 1) {
    throw RoutingError("stochastic experts need a THOR objective");
  }
  std::vector<Tensor> aux_terms;
  ForwardOptions fwd{true, &rng, nullptr, opts.telemetry, ec.has_gate() ? &aux_terms : nullptr};
  Tensor logits = model.forward(batch, fwd);
  Tensor ce = ad::cross_entropy(logits, batch.target_out, kPadId, opts.label_smoothing);
  LossGraph g;
  g.values.ce1 = ce.item();
  g.total = ce;
  if (!aux_terms.empty()) {
    Tensor aux = aux_terms[0];
    for (std::size_t i = 1; i < aux_terms.size(); ++i) aux = ad::add(aux, aux_terms[i]);
    aux = ad::scale(aux, 1.0 / static_cast<double>(aux_terms.size()));
    g.values.aux = aux.item();
    if (objective == Objective::kSwitchCePlusAux && opts.aux_coefficient != 0.0) {
      g.total = ad::add(ce, ad::scale(aux, opts.aux_coefficient));
    }
  } else if (objective == Objective::kSwitchCePlusAux) {
    throw RoutingError("switch-ce-aux needs a gated routing mode");
  }
  g.values.total = g.total.item();
  return g;
}

inline LossGraph objective_loss(const Seq2SeqTransformer& model, const Batch& batch, Objective objective,
                                const StepOptions& opts, Rng& rng) {
  return is_thor_objective(objective) ? thor_loss(model, batch, objective, opts, rng)
                                      : baseline_loss(model, batch, objective, opts, rng);
}

/// Backward through the loss and one optimizer update at `lr`.
inline LossBreakdown apply_step(LossGraph graph, Adam& optimizer, double lr) {
  optimizer.zero_grad();
  graph.total.backward();
  optimizer.step(lr);
  return graph.values;
}

/// Full THOR iteration: sampled expert pair, two passes, CE + CE + alpha * CR.
inline LossBreakdown thor_training_step(const Seq2SeqTransformer& model, Adam& optimizer, const Batch& batch,
                                        const StepOptions& opts, Rng& rng, double lr) {
  return apply_step(thor_loss(model, batch, Objective::kThorFull, opts, rng), optimizer, lr);
}

/// Loss-term ablations of the THOR objective.
inline LossBreakdown ablation_step(const Seq2SeqTransformer& model, Adam& optimizer, const Batch& batch,
                                   Objective variant, const StepOptions& opts, Rng& rng, double lr) {
  if (variant != Objective::kCe1Cr && variant != Objective::kCe1Ce2 && variant != Objective::kCe1Only) {
    throw ConfigError("training.objective", "unknown ablation variant '" + enum_name(variant) + "'");
  }
  return apply_step(thor_loss(model, batch, variant, opts, rng), optimizer, lr);
}

/// Single forward CE step (+ balancing term for switch-ce-aux).
inline LossBreakdown baseline_step(const Seq2SeqTransformer& model, Adam& optimizer, const Batch& batch,
                                   Objective objective, const StepOptions& opts, Rng& rng, double lr) {
  return apply_step(baseline_loss(model, batch, objective, opts, rng), optimizer, lr);
}

inline LossBreakdown training_step(const Seq2SeqTransformer& model, Adam& optimizer, const Batch& batch,
                                   Objective objective, const StepOptions& opts, Rng& rng, double lr) {
  return apply_step(objective_loss(model, batch, objective, opts, rng), optimizer, lr);
}

}  // namespace thor
