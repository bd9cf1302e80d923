// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "thor/bleu.hpp"
#include "thor/config.hpp"
#include "thor/errors.hpp"
#include "thor/experts.hpp"
#include "thor/rng.hpp"
#include "thor/tasks.hpp"
#include "thor/transformer.hpp"

namespace thor {

/// Random expert choices of one sentence: one per layer (sentence level) and
/// one per (layer, position) (token level). Only the table the mode needs is filled.
struct SentenceRouting {
  std::vector<std::size_t> per_layer;
  std::vector<std::vector<std::size_t>> per_position;  // [layer][position]
};

inline SentenceRouting sample_sentence_routing(DecodeMode mode, std::size_t layers, std::size_t num_experts,
                                               std::size_t max_len, Rng& rng) {
  SentenceRouting r;
  if (mode == DecodeMode::kDispatchSentence) {
    r.per_layer.resize(layers);
    for (auto& e : r.per_layer) e = rng.uniform_index(num_experts);
  } else if (mode == DecodeMode::kDispatchToken) {
    r.per_position.assign(layers, std::vector<std::size_t>(max_len));
    for (auto& layer : r.per_position)
      for (auto& e : layer) e = rng.uniform_index(num_experts);
  }
  return r;
}

/// Whether decode modes apply. Gated models always follow their learned gate.
inline bool uses_random_dispatch(const Seq2SeqTransformer& model) { return !model.expert_config().has_gate(); }

/// Per-sentence routings for a batch. Sentence `indices[b]` draws from
/// derive_seed(seed, indices[b]) so results do not depend on batch composition.
inline std::vector<SentenceRouting> sample_batch_routing(const Seq2SeqTransformer& model, DecodeMode mode,
                                                         std::span<const std::size_t> indices, std::uint64_t seed) {
  std::vector<SentenceRouting> out;
  out.reserve(indices.size());
  for (auto idx : indices) {
    Rng rng(derive_seed(seed, idx));
    out.push_back(sample_sentence_routing(mode, model.num_expert_layers(), model.expert_config().num_experts,
                                          model.model_config().max_seq_len, rng));
  }
  return out;
}

/// Route plan for rows laid out as routings.size() sentences. `src_len` and
/// `tgt_len` give the row count per sentence for encoder and decoder layers.
inline RoutePlan plan_from_routing(const Seq2SeqTransformer& model, DecodeMode mode,
                                   std::span<const SentenceRouting> routings, std::size_t src_len, std::size_t tgt_len) {
  if (!uses_random_dispatch(model)) return {};
  const std::size_t L = model.num_expert_layers(), enc_layers = model.model_config().n_enc_layers;
  RoutePlan plan;
  plan.reserve(L);
  for (std::size_t l = 0; l < L; ++l) {
    switch (mode) {
      case DecodeMode::kEnsemble:
        plan.emplace_back(EnsembleExperts{});
        break;
      case DecodeMode::kDispatchSentence: {
        PerSentenceExperts d;
        for (const auto& r : routings) d.experts.push_back(r.per_layer.at(l));
        plan.emplace_back(std::move(d));
        break;
      }
      case DecodeMode::kDispatchToken: {
        const std::size_t len = l < enc_layers ? src_len : tgt_len;
        PerRowExperts d;
        d.experts.reserve(routings.size() * len);
        for (const auto& r : routings)
          for (std::size_t t = 0; t < len; ++t) d.experts.push_back(r.per_position.at(l).at(t));
        plan.emplace_back(std::move(d));
        break;
      }
    }
  }
  return plan;
}

/// Teacher-forced logits with random expert dispatch (sentence or token level).
inline Tensor dispatch_forward(const Seq2SeqTransformer& model, const Batch& batch, DecodeMode mode, std::uint64_t seed) {
  if (mode == DecodeMode::kEnsemble) throw ConfigError("decode.mode", "dispatch_forward needs a dispatch mode");
  const auto routing = sample_batch_routing(model, mode, batch.indices, seed);
  const RoutePlan plan = plan_from_routing(model, mode, routing, batch.src_len, batch.tgt_len);
  ForwardOptions opts;
  opts.plan = &plan;
  return model.forward(batch, opts);
}

/// Teacher-forced logits with every expert evaluated and averaged per layer.
inline Tensor ensemble_forward(const Seq2SeqTransformer& model, const Batch& batch) {
  const RoutePlan plan = plan_from_routing(model, DecodeMode::kEnsemble, {}, batch.src_len, batch.tgt_len);
  ForwardOptions opts;
  opts.plan = &plan;
  return model.forward(batch, opts);
}

inline Tensor mode_forward(const Seq2SeqTransformer& model, const Batch& batch, DecodeMode mode, std::uint64_t seed) {
  return mode == DecodeMode::kEnsemble ? ensemble_forward(model, batch) : dispatch_forward(model, batch, mode, seed);
}

// ---------------------------------------------------------------------------
// Decoding

namespace detail {

inline bool generatable(int token) { return token == kEosId || token >= kNumReserved; }

/// Copies an encoder output so each of `rows` decoder sentences sees sentence `source`.
inline EncoderOutput repeat_encoding(const EncoderOutput& enc, std::size_t source, std::size_t rows) {
  const std::size_t S = enc.layout.len;
  std::vector<std::size_t> memory_rows, summary_rows(rows, source);
  EncoderOutput out;
  out.layout.batch = rows;
  out.layout.len = S;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t t = 0; t < S; ++t) memory_rows.push_back(source * S + t);
    if (!enc.layout.pad.empty()) {
      out.layout.pad.insert(out.layout.pad.end(), enc.layout.pad.begin() + static_cast<std::ptrdiff_t>(source * S),
                            enc.layout.pad.begin() + static_cast<std::ptrdiff_t>((source + 1) * S));
    }
  }
  out.memory = ad::take_rows(enc.memory, memory_rows);
  if (enc.sentence_summary.defined()) out.sentence_summary = ad::take_rows(enc.sentence_summary, summary_rows);
  return out;
}

inline std::vector<double> last_position_log_probs(const Tensor& logits, std::size_t batch, std::size_t len) {
  const std::size_t V = logits.cols();
  std::vector<double> out(batch * V);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = logits.values().data() + ((b * len) + len - 1) * V;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < V; ++v)
      if (generatable(static_cast<int>(v))) mx = std::max(mx, row[v]);
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v)
      if (generatable(static_cast<int>(v))) z += std::exp(row[v] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t v = 0; v < V; ++v)
      out[b * V + v] = generatable(static_cast<int>(v)) ? row[v] - lse : -std::numeric_limits<double>::infinity();
  }
  return out;
}

}  // namespace detail

/// Greedy decoding of a batch. Returns each sentence's tokens without bos/eos.
/// The decoder recomputes the whole prefix each step; expert choices are
/// keyed by position so earlier positions see the same experts every step.
inline std::vector<std::vector<int>> greedy_decode(const Seq2SeqTransformer& model, const Batch& batch,
                                                   const DecodeConfig& decode) {
  ad::NoGradGuard guard;
  const std::size_t B = batch.size;
  const auto routing = uses_random_dispatch(model) ? sample_batch_routing(model, decode.mode, batch.indices, decode.seed)
                                                   : std::vector<SentenceRouting>(B);
  ForwardOptions opts;
  const RoutePlan enc_plan = plan_from_routing(model, decode.mode, routing, batch.src_len, 1);
  opts.plan = &enc_plan;
  const auto enc = model.encode(batch.source, B, batch.src_len, batch.source_pad, opts);
  std::vector<std::vector<int>> prefix(B, std::vector<int>{kBosId});
  std::vector<bool> done(B, false);
  for (std::size_t step = 0; step < decode.max_decode_len; ++step) {
    const std::size_t len = step + 1;
    std::vector<int> ids;
    ids.reserve(B * len);
    for (const auto& p : prefix) ids.insert(ids.end(), p.begin(), p.end());
    const RoutePlan plan = plan_from_routing(model, decode.mode, routing, batch.src_len, len);
    opts.plan = &plan;
    Tensor logits = model.decode(enc, ids, B, len, {}, opts);
    const auto lp = detail::last_position_log_probs(logits, B, len);
    const std::size_t V = logits.cols();
    bool all_done = true;
    for (std::size_t b = 0; b < B; ++b) {
      if (done[b]) {
        prefix[b].push_back(kPadId);
        continue;
      }
      std::size_t best = kEosId;
      for (std::size_t v = 0; v < V; ++v)
        if (lp[b * V + v] > lp[b * V + best]) best = v;
      prefix[b].push_back(static_cast<int>(best));
      if (static_cast<int>(best) == kEosId) done[b] = true;
      all_done = all_done && done[b];
    }
    if (all_done) break;
  }
  std::vector<std::vector<int>> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 1; t < prefix[b].size(); ++t) {
      if (prefix[b][t] == kEosId || prefix[b][t] == kPadId) break;
      out[b].push_back(prefix[b][t]);
    }
  }
  return out;
}

struct Hypothesis {
  std::vector<int> tokens;  // generated tokens, eos excluded
  double log_prob = 0.0;
  double score = 0.0;       // log_prob / length^penalty, length counting eos
  bool finished = false;
};

struct BeamResult {
  Hypothesis best;
  std::vector<Hypothesis> finished;  // every hypothesis that left the beam
};

inline double length_normalized(double log_prob, std::size_t length, double penalty) {
  return log_prob / std::pow(static_cast<double>(std::max<std::size_t>(length, 1)), penalty);
}

/// Beam search for sentence `row` of `batch`. Expert routing is drawn once per
/// sentence and shared by every hypothesis for the whole decode.
inline BeamResult beam_search(const Seq2SeqTransformer& model, const Batch& batch, std::size_t row,
                              const DecodeConfig& decode) {
  if (decode.beam_size == 0) throw ConfigError("decode.beam_size", "must be positive");
  ad::NoGradGuard guard;
  const std::size_t K = decode.beam_size;
  const bool dispatch = uses_random_dispatch(model);
  const std::vector<std::size_t> one = {batch.indices.at(row)};
  const auto routing = dispatch ? sample_batch_routing(model, decode.mode, one, decode.seed)
                                : std::vector<SentenceRouting>(1);

  const std::size_t S = batch.src_len;
  const std::span<const int> src(batch.source.data() + row * S, S);
  const std::span<const std::uint8_t> src_pad(batch.source_pad.data() + row * S, S);
  ForwardOptions opts;
  const RoutePlan enc_plan = plan_from_routing(model, decode.mode, routing, S, 1);
  opts.plan = &enc_plan;
  const auto enc = model.encode(src, 1, S, src_pad, opts);

  struct Live {
    std::vector<int> prefix;
    double log_prob;
  };
  std::vector<Live> live = {{{kBosId}, 0.0}};
  BeamResult result;
  for (std::size_t step = 0; step < decode.max_decode_len && !live.empty() && result.finished.size() < K; ++step) {
    const std::size_t n = live.size(), len = step + 1;
    const auto enc_n = detail::repeat_encoding(enc, 0, n);
    std::vector<int> ids;
    for (const auto& h : live) ids.insert(ids.end(), h.prefix.begin(), h.prefix.end());
    const std::vector<SentenceRouting> shared(n, routing[0]);
    const RoutePlan plan = plan_from_routing(model, decode.mode, shared, S, len);
    opts.plan = &plan;
    Tensor logits = model.decode(enc_n, ids, n, len, {}, opts);
    const auto lp = detail::last_position_log_probs(logits, n, len);
    const std::size_t V = logits.cols();

    struct Candidate {
      double log_prob;
      std::size_t hyp;
      int token;
    };
    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < n; ++h)
      for (std::size_t v = 0; v < V; ++v)
        if (detail::generatable(static_cast<int>(v))) cands.push_back({live[h].log_prob + lp[h * V + v], h, static_cast<int>(v)});
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.log_prob > b.log_prob; });

    std::vector<Live> next;
    const bool last_step = step + 1 == decode.max_decode_len;
    for (std::size_t c = 0; c < std::min(K, cands.size()); ++c) {
      const auto& cand = cands[c];
      Hypothesis fin;
      fin.tokens.assign(live[cand.hyp].prefix.begin() + 1, live[cand.hyp].prefix.end());
      fin.log_prob = cand.log_prob;
      if (cand.token == kEosId) {
        fin.score = length_normalized(cand.log_prob, fin.tokens.size() + 1, decode.length_penalty);
        fin.finished = true;
        result.finished.push_back(std::move(fin));
      } else if (last_step) {
        fin.tokens.push_back(cand.token);
        fin.score = length_normalized(cand.log_prob, fin.tokens.size(), decode.length_penalty);
        result.finished.push_back(std::move(fin));
      } else {
        auto prefix = live[cand.hyp].prefix;
        prefix.push_back(cand.token);
        next.push_back({std::move(prefix), cand.log_prob});
      }
    }
    live = std::move(next);
  }
  if (result.finished.empty()) throw ConfigError("decode.max_decode_len", "must be positive");
  result.best = *std::max_element(result.finished.begin(), result.finished.end(), [](const auto& a, const auto& b) {
    return a.score < b.score;
  });
  return result;
}

/// Decodes every sentence of a batch (greedy when beam_size == 1).
inline std::vector<std::vector<int>> decode_batch(const Seq2SeqTransformer& model, const Batch& batch,
                                                  const DecodeConfig& decode) {
  if (decode.beam_size == 1) return greedy_decode(model, batch, decode);
  std::vector<std::vector<int>> out;
  for (std::size_t r = 0; r < batch.size; ++r) out.push_back(beam_search(model, batch, r, decode).best.tokens);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Fixed-size batches over a split in its natural order.
inline std::vector<Batch> eval_batches(const std::vector<Example>& split, std::size_t batch_size = 64) {
  std::vector<Batch> out;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(split.size(), start + batch_size); ++i) idx.push_back(i);
    out.push_back(make_batch(split, idx));
  }
  return out;
}

struct EvalReport {
  double bleu = 0.0;
  double exact_match = 0.0;  // fraction of sentences reproduced exactly
  std::vector<std::vector<int>> hypotheses;
};

inline EvalReport score_hypotheses(const std::vector<Example>& split, std::vector<std::vector<int>> hyps) {
  std::vector<std::vector<int>> refs;
  std::size_t exact = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    refs.push_back(split[i].target);
    exact += hyps[i] == split[i].target ? 1 : 0;
  }
  EvalReport r;
  r.bleu = bleu(hyps, refs);
  r.exact_match = static_cast<double>(exact) / static_cast<double>(split.size());
  r.hypotheses = std::move(hyps);
  return r;
}

inline EvalReport evaluate(const Seq2SeqTransformer& model, const std::vector<Example>& split,
                           const DecodeConfig& decode) {
  if (split.empty()) throw ValidationError("evaluate: empty split");
  std::vector<std::vector<int>> hyps;
  for (const auto& b : eval_batches(split)) {
    auto part = decode_batch(model, b, decode);
    hyps.insert(hyps.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return score_hypotheses(split, std::move(hyps));
}

/// FLOPs of one teacher-forced forward pass over `batch` under `mode`.
inline ad::FlopCounter forward_flops(const Seq2SeqTransformer& model, const Batch& batch, DecodeMode mode,
                                     std::uint64_t seed = 0) {
  ad::NoGradGuard guard;
  ad::FlopCounter counter;
  ad::FlopCounting counting(counter);
  mode_forward(model, batch, mode, seed);
  return counter;
}

// ---------------------------------------------------------------------------
// Prediction variance

/// Running mean and sample variance.
class Welford {
 public:
  void add(double x) {
    ++n_;
    const double delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta * (x - mean_);
  }
  std::size_t count() const { return n_; }
  double mean() const { return mean_; }
  double variance() const { return n_ < 2 ? 0.0 : m2_ / static_cast<double>(n_ - 1); }

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

struct VarianceReport {
  std::vector<std::uint64_t> seeds;
  std::vector<double> scores;        // corpus BLEU per run
  double mean = 0.0;
  double variance = 0.0;             // sample variance of the corpus BLEU
  double token_prob_variance = 0.0;  // mean over reference tokens of the per-token probability variance
};

/// Re-evaluates the split once per seed under random dispatch and reports the
/// spread of the corpus metric and of teacher-forced reference probabilities.
inline VarianceReport prediction_variance(const Seq2SeqTransformer& model, const std::vector<Example>& split,
                                          DecodeConfig decode, std::span<const std::uint64_t> seeds) {
  if (seeds.size() < 2) throw ValidationError("prediction_variance: needs at least 2 runs");
  if (decode.mode == DecodeMode::kEnsemble) throw ConfigError("decode.mode", "variance needs a dispatch mode");
  ad::NoGradGuard guard;
  VarianceReport report;
  report.seeds.assign(seeds.begin(), seeds.end());
  const auto batches = eval_batches(split);
  std::vector<Welford> token_stats;
  Welford corpus;
  for (auto seed : seeds) {
    decode.seed = seed;
    const double score = evaluate(model, split, decode).bleu;
    report.scores.push_back(score);
    corpus.add(score);
    std::size_t k = 0;
    for (const auto& b : batches) {
      Tensor probs = ad::softmax(dispatch_forward(model, b, decode.mode, seed));
      const std::size_t V = probs.cols();
      for (std::size_t r = 0; r < b.target_out.size(); ++r) {
        if (b.target_out[r] == kPadId) continue;
        if (k == token_stats.size()) token_stats.emplace_back();
        token_stats[k++].add(probs.values()[r * V + static_cast<std::size_t>(b.target_out[r])]);
      }
    }
  }
  report.mean = corpus.mean();
  report.variance = corpus.variance();
  double total = 0.0;
  for (const auto& w : token_stats) total += w.variance();
  report.token_prob_variance = token_stats.empty() ? 0.0 : total / static_cast<double>(token_stats.size());
  return report;
}

}  // namespace thor
