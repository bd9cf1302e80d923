// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "thor/config.hpp"
#include "thor/errors.hpp"
#include "thor/ops.hpp"
#include "thor/rng.hpp"
#include "thor/tensor.hpp"

namespace thor {

using ad::Tensor;

/// Initializes one named parameter from its own stream so that models which
/// differ only in optional parameters (e.g. a gate) share every other value.
inline Tensor init_normal(const std::string& name, ad::Shape shape, double stddev, std::uint64_t seed) {
  Rng rng(derive_seed(seed, hash_name(name)));
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::parameter(std::move(shape), std::move(v));
}

inline Tensor init_constant(ad::Shape shape, double value) {
  const auto n = ad::numel(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, value));
}

using NamedTensor = std::pair<std::string, Tensor>;

/// Position-wise feed-forward expert: W2 relu(x W1 + b1) + b2.
struct ExpertFFN {
  Tensor w1, b1, w2, b2;

  static ExpertFFN create(const std::string& prefix, std::size_t d_model, std::size_t d_ff, std::uint64_t seed) {
    return {init_normal(prefix + ".w1", {d_model, d_ff}, 0.02, seed), init_constant({d_ff}, 0.0),
            init_normal(prefix + ".w2", {d_ff, d_model}, 0.02, seed), init_constant({d_model}, 0.0)};
  }

  Tensor forward(const Tensor& x) const {
    ad::FlopScope scope(ad::FlopCategory::kExpert);
    return ad::add_bias(ad::matmul(ad::relu(ad::add_bias(ad::matmul(x, w1), b1)), w2), b2);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    out.emplace_back(prefix + ".w1", w1);
    out.emplace_back(prefix + ".b1", b1);
    out.emplace_back(prefix + ".w2", w2);
    out.emplace_back(prefix + ".b2", b2);
  }
};

// ---------------------------------------------------------------------------
// Routing primitives

/// Row-wise softmax(x W_g^T): the gate value of every unit for every expert.
inline Tensor gate_scores(const Tensor& x, const std::optional<Tensor>& gate) {
  if (!gate || !gate->defined()) throw RoutingError("gate_scores: this routing mode has no gate");
  ad::FlopScope scope(ad::FlopCategory::kGate);
  return ad::softmax(ad::matmul_nt(x, *gate), -1);
}

/// Index of the largest value in a row; ties go to the lowest index.
inline std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

/// Indices of the k largest values, descending; ties go to the lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k) {
  std::vector<std::size_t> idx(row.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  idx.resize(k);
  return idx;
}

/// Evaluates each expert on the rows assigned to it and scatters the results
/// back. `scale`, when given, is an [m x 1] column multiplying each row's
/// output. Cost is independent of the number of experts.
inline Tensor dispatch_rows(std::span<const ExpertFFN> experts, const Tensor& x,
                            std::span<const std::size_t> assignment, const std::optional<Tensor>& scale = std::nullopt) {
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (assignment.size() != m) throw ShapeError("dispatch_rows: assignment length differs from row count");
  std::vector<std::vector<std::size_t>> groups(experts.size());
  for (std::size_t r = 0; r < m; ++r) {
    if (assignment[r] >= experts.size()) throw RoutingError("expert index " + std::to_string(assignment[r]) + " out of range");
    groups[assignment[r]].push_back(r);
  }
  std::vector<Tensor> parts;
  std::vector<std::vector<std::size_t>> index;
  for (std::size_t e = 0; e < experts.size(); ++e) {
    if (groups[e].empty()) continue;
    Tensor y = experts[e].forward(groups[e].size() == m ? x : ad::take_rows(x, groups[e]));
    if (scale) {
      ad::FlopScope scope(ad::FlopCategory::kRouting);
      y = ad::scale_rows(y, groups[e].size() == m ? *scale : ad::take_rows(*scale, groups[e]));
    }
    parts.push_back(std::move(y));
    index.push_back(std::move(groups[e]));
  }
  ad::FlopScope scope(ad::FlopCategory::kRouting);
  return ad::combine_rows(parts, index, m, d);
}

/// Output of combine_top_k together with the top-1 assignment of every unit.
struct TopKResult {
  Tensor output;
  std::vector<std::size_t> top1;
};

/// Sum over the K highest-gated experts of p_i(x) E_i(x), per unit.
inline TopKResult combine_top_k(std::span<const ExpertFFN> experts, const Tensor& x, const Tensor& gates,
                                std::size_t k) {
  const std::size_t m = x.dim(0), d = x.dim(1), n = experts.size();
  if (k < 1 || k > n) throw RoutingError("combine_top_k: K must satisfy 1 <= K <= N");
  if (gates.dim(0) != m || gates.dim(1) != n) throw ShapeError("combine_top_k: gate shape " + ad::to_string(gates.shape()));
  std::vector<std::vector<std::size_t>> groups(n);
  TopKResult result;
  result.top1.resize(m);
  const auto gv = gates.values();
  for (std::size_t r = 0; r < m; ++r) {
    const auto top = top_k_indices(gv.subspan(r * n, n), k);
    result.top1[r] = top[0];
    for (auto e : top) groups[e].push_back(r);
  }
  std::vector<Tensor> parts;
  std::vector<std::vector<std::size_t>> index;
  for (std::size_t e = 0; e < n; ++e) {
    if (groups[e].empty()) continue;
    Tensor y = experts[e].forward(groups[e].size() == m ? x : ad::take_rows(x, groups[e]));
    const std::vector<std::size_t> cols(groups[e].size(), e);
    ad::FlopScope scope(ad::FlopCategory::kRouting);
    parts.push_back(ad::scale_rows(y, ad::pick(gates, groups[e], cols)));
    index.push_back(std::move(groups[e]));
  }
  ad::FlopScope scope(ad::FlopCategory::kRouting);
  result.output = ad::combine_rows(parts, index, m, d);
  return result;
}

/// Uniform average of every expert's output.
inline Tensor ensemble_experts(std::span<const ExpertFFN> experts, const Tensor& x) {
  Tensor acc = experts[0].forward(x);
  for (std::size_t e = 1; e < experts.size(); ++e) {
    Tensor y = experts[e].forward(x);
    ad::FlopScope scope(ad::FlopCategory::kRouting);
    acc = ad::add(acc, y);
  }
  if (experts.size() == 1) return acc;
  ad::FlopScope scope(ad::FlopCategory::kRouting);
  return ad::scale(acc, 1.0 / static_cast<double>(experts.size()));
}

/// Per-layer expert indices. One entry per layer for dispatch, two for a THOR
/// training pair, N for ensemble.
struct ExpertChoice {
  std::vector<std::vector<std::size_t>> layers;

  bool operator==(const ExpertChoice&) const = default;
};

enum class SelectCount { kOne, kPair, kAll };

/// Gate-free random selection. A pair is an ordered draw without replacement
/// when N >= 2 and (0, 0) when N == 1.
inline ExpertChoice thor_select(Rng& rng, std::size_t num_layers, std::size_t num_experts, SelectCount count) {
  if (num_experts == 0) throw RoutingError("thor_select: no experts");
  ExpertChoice choice;
  choice.layers.resize(num_layers);
  for (auto& layer : choice.layers) {
    switch (count) {
      case SelectCount::kOne:
        layer = {rng.uniform_index(num_experts)};
        break;
      case SelectCount::kPair: {
        if (num_experts == 1) {
          layer = {0, 0};
          break;
        }
        const std::size_t i = rng.uniform_index(num_experts);
        std::size_t j = rng.uniform_index(num_experts - 1);
        if (j >= i) ++j;
        layer = {i, j};
        break;
      }
      case SelectCount::kAll:
        layer.resize(num_experts);
        for (std::size_t e = 0; e < num_experts; ++e) layer[e] = e;
        break;
    }
  }
  return choice;
}

/// N * sum_i f_i P_i, where f_i is the fraction of units dispatched to expert i
/// (a constant) and P_i the mean gate probability of expert i. Only units with
/// `include[r] != 0` count; an empty `include` counts every unit.
inline Tensor load_balancing_loss(std::span<const std::size_t> assignments, const Tensor& gates,
                                  std::span<const std::uint8_t> include = {}) {
  if (!gates.defined()) throw RoutingError("load_balancing_loss: gateless routing has no gate probabilities");
  const std::size_t m = gates.dim(0), n = gates.dim(1);
  if (assignments.size() != m) throw ShapeError("load_balancing_loss: assignment length differs from gate rows");
  std::vector<double> fraction(n, 0.0);
  std::size_t units = 0;
  for (std::size_t r = 0; r < m; ++r) {
    if (!include.empty() && !include[r]) continue;
    fraction.at(assignments[r]) += 1.0;
    ++units;
  }
  if (units == 0) throw ValidationError("load_balancing_loss: no routed units");
  for (auto& f : fraction) f /= static_cast<double>(units);
  std::vector<double> weights(m * n, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    if (!include.empty() && !include[r]) continue;
    for (std::size_t i = 0; i < n; ++i) weights[r * n + i] = fraction[i] / static_cast<double>(units);
  }
  return ad::scale(ad::sum(ad::mul(gates, Tensor::constant({m, n}, std::move(weights)))), static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Telemetry

/// Raw counts from one routing decision of one layer.
struct RoutingFragment {
  std::size_t layer = 0;
  std::vector<std::size_t> counts;
  std::vector<double> confidence_sums;
  bool gated = false;

  RoutingFragment() = default;
  RoutingFragment(std::size_t layer_index, std::size_t num_experts, bool has_gate)
      : layer(layer_index), counts(num_experts, 0), confidence_sums(num_experts, 0.0), gated(has_gate) {}

  void add(std::size_t expert, double confidence = 0.0) {
    ++counts.at(expert);
    confidence_sums[expert] += confidence;
  }
};

/// Per-expert load and mean routing confidence of one layer over an interval.
struct RoutingTelemetry {
  std::size_t step = 0;
  std::size_t layer = 0;
  std::vector<double> loads;
  std::vector<std::optional<double>> confidences;  // absent: gateless or no units

  bool operator==(const RoutingTelemetry&) const = default;
};

/// Aggregates fragments of a single layer. Experts that received no unit
/// report load 0 and an absent confidence.
inline RoutingTelemetry record_telemetry(std::span<const RoutingFragment> fragments, std::size_t step) {
  if (fragments.empty()) throw ValidationError("record_telemetry: empty interval");
  const std::size_t n = fragments[0].counts.size();
  std::vector<double> counts(n, 0.0), conf(n, 0.0);
  bool gated = false;
  double total = 0.0;
  for (const auto& f : fragments) {
    if (f.layer != fragments[0].layer || f.counts.size() != n) {
      throw ValidationError("record_telemetry: fragments from different layers");
    }
    gated = gated || f.gated;
    for (std::size_t i = 0; i < n; ++i) {
      counts[i] += static_cast<double>(f.counts[i]);
      conf[i] += f.confidence_sums[i];
      total += static_cast<double>(f.counts[i]);
    }
  }
  if (total == 0.0) throw ValidationError("record_telemetry: no routed units in the interval");
  RoutingTelemetry t;
  t.step = step;
  t.layer = fragments[0].layer;
  t.loads.resize(n);
  t.confidences.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    t.loads[i] = counts[i] / total;
    if (gated && counts[i] > 0.0) t.confidences[i] = conf[i] / counts[i];
  }
  return t;
}

// ---------------------------------------------------------------------------
// Expert layer

/// How one expert layer routes during a forward pass.
struct UseLayerRouting {};
struct FixedExpert {
  std::size_t expert = 0;
};
struct PerRowExperts {
  std::vector<std::size_t> experts;
};
struct PerSentenceExperts {
  std::vector<std::size_t> experts;
};
struct EnsembleExperts {};

using RouteDirective = std::variant<UseLayerRouting, FixedExpert, PerRowExperts, PerSentenceExperts, EnsembleExperts>;

/// One directive per expert layer (encoder layers first). Empty = UseLayerRouting everywhere.
using RoutePlan = std::vector<RouteDirective>;

/// Rows of a layer input grouped as `batch` sentences of `len` positions.
struct SentenceLayout {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<std::uint8_t> pad;  // batch x len, 1 at pad positions

  bool is_pad(std::size_t row) const { return !pad.empty() && pad[row] != 0; }
  std::size_t sentence_of(std::size_t row) const { return row / len; }
};

/// [batch x rows] constant whose product with x averages each sentence's non-pad rows.
inline Tensor sentence_mean_matrix(const SentenceLayout& layout) {
  const std::size_t m = layout.batch * layout.len;
  std::vector<double> w(layout.batch * m, 0.0);
  for (std::size_t b = 0; b < layout.batch; ++b) {
    std::size_t count = 0;
    for (std::size_t t = 0; t < layout.len; ++t) count += layout.is_pad(b * layout.len + t) ? 0 : 1;
    for (std::size_t t = 0; t < layout.len; ++t) {
      const std::size_t r = b * layout.len + t;
      if (!layout.is_pad(r)) w[b * m + r] = 1.0 / static_cast<double>(count);
    }
  }
  return Tensor::constant({layout.batch, m}, std::move(w));
}

/// Mutable per-pass state threaded through the model.
struct RoutingState {
  bool training = false;
  Rng* rng = nullptr;                              // dropout and SwitchRandom draws
  std::vector<RoutingFragment>* telemetry = nullptr;
  std::vector<Tensor>* aux_losses = nullptr;       // one load-balancing term per gated layer
};

/// N parallel experts plus the routing rule that selects among them.
class ExpertLayer {
 public:
  ExpertLayer(std::string prefix, std::size_t layer_index, const ModelConfig& model, const ExpertConfig& config,
              std::uint64_t seed)
      : prefix_(std::move(prefix)), layer_index_(layer_index), config_(config) {
    if (config.num_experts == 0) throw ConfigError("experts.num_experts", "must be positive");
    for (std::size_t e = 0; e < config.num_experts; ++e) {
      experts_.push_back(ExpertFFN::create(prefix_ + ".expert." + std::to_string(e), model.d_model, model.d_ff, seed));
    }
    if (config.has_gate()) gate_ = init_normal(prefix_ + ".gate", {config.num_experts, model.d_model}, 0.02, seed);
  }

  std::size_t layer_index() const { return layer_index_; }
  std::size_t num_experts() const { return experts_.size(); }
  RoutingMode mode() const { return config_.mode; }
  const std::optional<Tensor>& gate() const { return gate_; }
  std::span<const ExpertFFN> experts() const { return experts_; }
  std::span<ExpertFFN> mutable_experts() { return experts_; }

  /// `sentence_input`, when defined, is the [batch x d] representation used by
  /// sentence-level gating; otherwise the masked mean of `x` is used.
  Tensor forward(const Tensor& x, const SentenceLayout& layout, const Tensor& sentence_input,
                 const RouteDirective& directive, RoutingState& state) const {
    const std::size_t m = x.dim(0), n = experts_.size();
    if (m != layout.batch * layout.len) throw ShapeError("expert layer: layout does not match input rows");

    if (std::holds_alternative<FixedExpert>(directive)) {
      const auto e = std::get<FixedExpert>(directive).expert;
      if (e >= n) throw RoutingError("fixed expert " + std::to_string(e) + " out of range");
      record_assignment(layout, std::vector<std::size_t>(m, e), {}, state);
      return experts_[e].forward(x);
    }
    if (const auto* rows = std::get_if<PerRowExperts>(&directive)) {
      record_assignment(layout, rows->experts, {}, state);
      return dispatch_rows(experts_, x, rows->experts);
    }
    if (const auto* sent = std::get_if<PerSentenceExperts>(&directive)) {
      if (sent->experts.size() != layout.batch) throw ShapeError("per-sentence directive size differs from batch");
      std::vector<std::size_t> assignment(m);
      for (std::size_t r = 0; r < m; ++r) assignment[r] = sent->experts[layout.sentence_of(r)];
      record_assignment(layout, assignment, {}, state);
      return dispatch_rows(experts_, x, assignment);
    }
    if (std::holds_alternative<EnsembleExperts>(directive)) return ensemble_experts(experts_, x);

    switch (config_.mode) {
      case RoutingMode::kThorStochastic:
        if (n != 1) throw RoutingError("THOR expert layers need an explicit expert choice");
        record_assignment(layout, std::vector<std::size_t>(m, 0), {}, state);
        return experts_[0].forward(x);
      case RoutingMode::kSwitchRandom: {
        if (state.rng == nullptr) throw RoutingError("random routing needs an rng");
        std::vector<std::size_t> assignment(m);
        for (auto& a : assignment) a = state.rng->uniform_index(n);
        record_assignment(layout, assignment, {}, state);
        return dispatch_rows(experts_, x, assignment);
      }
      case RoutingMode::kSwitchToken:
        return route_tokens(x, layout, state);
      case RoutingMode::kSwitchSentence:
        return route_sentences(x, layout, sentence_input, state);
      case RoutingMode::kGatedTopK:
        return route_top_k(x, layout, state);
    }
    throw RoutingError("unknown routing mode");
  }

  void collect(std::vector<NamedTensor>& out) const {
    for (std::size_t e = 0; e < experts_.size(); ++e) experts_[e].collect(prefix_ + ".expert." + std::to_string(e), out);
    if (gate_) out.emplace_back(prefix_ + ".gate", *gate_);
  }

 private:
  void record_assignment(const SentenceLayout& layout, std::span<const std::size_t> assignment,
                         std::span<const double> confidence, RoutingState& state, bool per_sentence = false) const {
    if (!state.telemetry) return;
    RoutingFragment f(layer_index_, experts_.size(), !confidence.empty());
    for (std::size_t u = 0; u < assignment.size(); ++u) {
      if (!per_sentence && layout.is_pad(u)) continue;
      f.add(assignment[u], confidence.empty() ? 0.0 : confidence[u]);
    }
    state.telemetry->push_back(std::move(f));
  }

  std::vector<std::uint8_t> non_pad_rows(const SentenceLayout& layout, std::size_t m) const {
    std::vector<std::uint8_t> include(m, 1);
    for (std::size_t r = 0; r < m; ++r) include[r] = layout.is_pad(r) ? 0 : 1;
    return include;
  }

  Tensor route_tokens(const Tensor& x, const SentenceLayout& layout, RoutingState& state) const {
    const std::size_t m = x.dim(0), n = experts_.size();
    Tensor gates = gate_scores(x, gate_);
    std::vector<std::size_t> choice(m);
    std::vector<double> conf(m);
    for (std::size_t r = 0; r < m; ++r) {
      choice[r] = argmax_row(gates.values().subspan(r * n, n));
      conf[r] = gates.values()[r * n + choice[r]];
    }
    record_assignment(layout, choice, conf, state);
    if (state.aux_losses) state.aux_losses->push_back(load_balancing_loss(choice, gates, non_pad_rows(layout, m)));
    std::vector<std::size_t> rows(m);
    for (std::size_t r = 0; r < m; ++r) rows[r] = r;
    Tensor scale;
    {
      ad::FlopScope scope(ad::FlopCategory::kRouting);
      scale = ad::pick(gates, rows, choice);
    }
    return dispatch_rows(experts_, x, choice, scale);
  }

  Tensor route_sentences(const Tensor& x, const SentenceLayout& layout, const Tensor& sentence_input,
                         RoutingState& state) const {
    const std::size_t m = x.dim(0), n = experts_.size(), B = layout.batch;
    Tensor repr = sentence_input;
    if (!repr.defined()) {
      ad::FlopScope scope(ad::FlopCategory::kGate);
      repr = ad::matmul(sentence_mean_matrix(layout), x);
    }
    Tensor gates = gate_scores(repr, gate_);
    std::vector<std::size_t> choice(B), sentences(B);
    std::vector<double> conf(B);
    for (std::size_t b = 0; b < B; ++b) {
      choice[b] = argmax_row(gates.values().subspan(b * n, n));
      conf[b] = gates.values()[b * n + choice[b]];
      sentences[b] = b;
    }
    record_assignment(layout, choice, conf, state, /*per_sentence=*/true);
    if (state.aux_losses) state.aux_losses->push_back(load_balancing_loss(choice, gates));
    std::vector<std::size_t> row_choice(m), row_sentence(m);
    for (std::size_t r = 0; r < m; ++r) {
      row_sentence[r] = layout.sentence_of(r);
      row_choice[r] = choice[row_sentence[r]];
    }
    Tensor scale;
    {
      ad::FlopScope scope(ad::FlopCategory::kRouting);
      scale = ad::take_rows(ad::pick(gates, sentences, choice), row_sentence);
    }
    return dispatch_rows(experts_, x, row_choice, scale);
  }

  Tensor route_top_k(const Tensor& x, const SentenceLayout& layout, RoutingState& state) const {
    const std::size_t m = x.dim(0), n = experts_.size();
    Tensor gates = gate_scores(x, gate_);
    auto result = combine_top_k(experts_, x, gates, config_.top_k);
    std::vector<double> conf(m);
    for (std::size_t r = 0; r < m; ++r) conf[r] = gates.values()[r * n + result.top1[r]];
    record_assignment(layout, result.top1, conf, state);
    if (state.aux_losses) state.aux_losses->push_back(load_balancing_loss(result.top1, gates, non_pad_rows(layout, m)));
    return result.output;
  }

  std::string prefix_;
  std::size_t layer_index_;
  ExpertConfig config_;
  std::vector<ExpertFFN> experts_;
  std::optional<Tensor> gate_;
};

}  // namespace thor
