// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "thor/errors.hpp"

namespace thor {

enum class RoutingMode { kGatedTopK, kSwitchToken, kSwitchSentence, kSwitchRandom, kThorStochastic };
enum class Objective { kThorFull, kCe1Cr, kCe1Ce2, kCe1Only, kBaselineCe, kSwitchCePlusAux };
enum class DecodeMode { kDispatchSentence, kDispatchToken, kEnsemble };
enum class TaskKind { kCopy, kReverse, kCipher };

/// Reserved token ids shared by every task vocabulary.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReserved = 4;

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_head = 8;
  std::size_t d_ff = 64;
  std::size_t n_enc_layers = 1;
  std::size_t n_dec_layers = 1;
  std::size_t vocab_src = 20;
  std::size_t vocab_tgt = 20;
  double dropout_rate = 0.1;
  std::size_t max_seq_len = 32;

  std::size_t num_expert_layers() const { return n_enc_layers + n_dec_layers; }
  bool operator==(const ModelConfig&) const = default;
};

/// Expert-layer parameters shared by every FFN sublayer of a model.
struct ExpertConfig {
  std::size_t num_experts = 2;
  RoutingMode mode = RoutingMode::kThorStochastic;
  std::size_t top_k = 1;  // used by kGatedTopK only

  bool has_gate() const {
    return mode == RoutingMode::kGatedTopK || mode == RoutingMode::kSwitchToken ||
           mode == RoutingMode::kSwitchSentence;
  }
  bool operator==(const ExpertConfig&) const = default;
};

struct TrainingConfig {
  Objective objective = Objective::kThorFull;
  double alpha = 5.0;
  double learning_rate = 0.0015;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  std::size_t warmup_steps = 4000;
  std::size_t batch_tokens = 4096;
  std::size_t total_steps = 1000;
  std::uint64_t seed = 1;
  double label_smoothing = 0.1;
  double aux_coefficient = 0.01;

  bool uses_cr() const {
    return objective == Objective::kThorFull || objective == Objective::kCe1Cr;
  }
  bool operator==(const TrainingConfig&) const = default;
};

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kDispatchSentence;
  std::size_t beam_size = 5;
  double length_penalty = 1.0;
  std::size_t max_decode_len = 24;
  std::uint64_t seed = 0;

  bool operator==(const DecodeConfig&) const = default;
};

struct TaskSpec {
  TaskKind kind = TaskKind::kCipher;
  std::size_t vocab_size = 20;  // includes the reserved ids
  std::size_t min_len = 3;
  std::size_t max_len = 8;
  std::size_t train_size = 1000;
  std::size_t valid_size = 100;
  std::size_t test_size = 100;
  std::uint64_t seed = 7;
  /// Symbol map for kCipher over content ids (size vocab_size - kNumReserved).
  /// Empty means "draw a permutation from `seed`".
  std::vector<int> permutation;
  /// Targets are reversed within consecutive blocks of this width (0/1 = no reordering).
  std::size_t reorder_window = 0;

  std::size_t num_symbols() const { return vocab_size > kNumReserved ? vocab_size - kNumReserved : 0; }
  bool operator==(const TaskSpec&) const = default;
};

struct RunConfig {
  std::string name = "custom";
  ModelConfig model;
  ExpertConfig experts;
  TrainingConfig training;
  DecodeConfig decode;
  TaskSpec task;
  std::string run_dir = "runs/custom";
  std::size_t telemetry_interval = 50;
  std::size_t eval_interval = 250;
  std::size_t checkpoint_interval = 0;  // 0 = final and best only
  std::size_t validation_beam_size = 1;

  bool operator==(const RunConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Enum names

namespace detail {
template <class E>
struct EnumNames;

template <>
struct EnumNames<RoutingMode> {
  static constexpr const char* kWhat = "routing mode";
  static inline const std::vector<std::pair<RoutingMode, std::string>> kNames = {
      {RoutingMode::kGatedTopK, "gated-topk"},
      {RoutingMode::kSwitchToken, "switch-token"},
      {RoutingMode::kSwitchSentence, "switch-sentence"},
      {RoutingMode::kSwitchRandom, "switch-random"},
      {RoutingMode::kThorStochastic, "thor"}};
};
template <>
struct EnumNames<Objective> {
  static constexpr const char* kWhat = "objective";
  static inline const std::vector<std::pair<Objective, std::string>> kNames = {
      {Objective::kThorFull, "thor-full"},     {Objective::kCe1Cr, "ce1-cr"},
      {Objective::kCe1Ce2, "ce1-ce2"},         {Objective::kCe1Only, "ce1-only"},
      {Objective::kBaselineCe, "baseline-ce"}, {Objective::kSwitchCePlusAux, "switch-ce-aux"}};
};
template <>
struct EnumNames<DecodeMode> {
  static constexpr const char* kWhat = "decode mode";
  static inline const std::vector<std::pair<DecodeMode, std::string>> kNames = {
      {DecodeMode::kDispatchSentence, "dispatch-s"},
      {DecodeMode::kDispatchToken, "dispatch-t"},
      {DecodeMode::kEnsemble, "ensemble"}};
};
template <>
struct EnumNames<TaskKind> {
  static constexpr const char* kWhat = "task kind";
  static inline const std::vector<std::pair<TaskKind, std::string>> kNames = {
      {TaskKind::kCopy, "copy"}, {TaskKind::kReverse, "reverse"}, {TaskKind::kCipher, "cipher"}};
};
}  // namespace detail

template <class E>
std::string enum_name(E value) {
  for (const auto& [v, n] : detail::EnumNames<E>::kNames)
    if (v == value) return n;
  return "?";
}

template <class E>
E parse_enum(const std::string& text, const std::string& field) {
  for (const auto& [v, n] : detail::EnumNames<E>::kNames)
    if (n == text) return v;
  std::string options;
  for (const auto& [v, n] : detail::EnumNames<E>::kNames) options += (options.empty() ? "" : ", ") + n;
  throw ConfigError(field, "unknown " + std::string(detail::EnumNames<E>::kWhat) + " '" + text + "' (expected one of " +
                               options + ")");
}

// ---------------------------------------------------------------------------
// JSON mapping. Missing keys keep their defaults; unknown keys are rejected.

using Json = nlohmann::json;

namespace detail {

class Reader {
 public:
  Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const std::string field = join(key);
    try {
      if constexpr (std::is_same_v<T, RoutingMode> || std::is_same_v<T, Objective> ||
                    std::is_same_v<T, DecodeMode> || std::is_same_v<T, TaskKind>) {
        out = parse_enum<T>(it->template get<std::string>(), field);
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!it->is_number_unsigned()) {
          throw ConfigError(field, "expected a non-negative integer, got " + it->dump());
        }
        out = it->template get<T>();
      } else {
        out = it->template get<T>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(field, std::string("type error: ") + e.what());
    }
  }

  Reader section(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    static const Json empty = Json::object();
    return Reader(it == j_.end() ? empty : *it, join(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(join(it.key().c_str()), "unknown field");
    }
  }

 private:
  std::string join(const char* key) const { return path_.empty() ? std::string(key) : path_ + "." + key; }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline Json to_json(const RunConfig& c) {
  Json j;
  j["name"] = c.name;
  j["run_dir"] = c.run_dir;
  j["telemetry_interval"] = c.telemetry_interval;
  j["eval_interval"] = c.eval_interval;
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["validation_beam_size"] = c.validation_beam_size;
  j["model"] = {{"d_model", c.model.d_model},
                {"n_heads", c.model.n_heads},
                {"d_head", c.model.d_head},
                {"d_ff", c.model.d_ff},
                {"n_enc_layers", c.model.n_enc_layers},
                {"n_dec_layers", c.model.n_dec_layers},
                {"vocab_src", c.model.vocab_src},
                {"vocab_tgt", c.model.vocab_tgt},
                {"dropout_rate", c.model.dropout_rate},
                {"max_seq_len", c.model.max_seq_len}};
  j["experts"] = {{"num_experts", c.experts.num_experts},
                  {"mode", enum_name(c.experts.mode)},
                  {"top_k", c.experts.top_k}};
  j["training"] = {{"objective", enum_name(c.training.objective)},
                   {"alpha", c.training.alpha},
                   {"learning_rate", c.training.learning_rate},
                   {"beta1", c.training.beta1},
                   {"beta2", c.training.beta2},
                   {"adam_eps", c.training.adam_eps},
                   {"warmup_steps", c.training.warmup_steps},
                   {"batch_tokens", c.training.batch_tokens},
                   {"total_steps", c.training.total_steps},
                   {"seed", c.training.seed},
                   {"label_smoothing", c.training.label_smoothing},
                   {"aux_coefficient", c.training.aux_coefficient}};
  j["decode"] = {{"mode", enum_name(c.decode.mode)},
                 {"beam_size", c.decode.beam_size},
                 {"length_penalty", c.decode.length_penalty},
                 {"max_decode_len", c.decode.max_decode_len},
                 {"seed", c.decode.seed}};
  j["task"] = {{"kind", enum_name(c.task.kind)},
               {"vocab_size", c.task.vocab_size},
               {"min_len", c.task.min_len},
               {"max_len", c.task.max_len},
               {"train_size", c.task.train_size},
               {"valid_size", c.task.valid_size},
               {"test_size", c.task.test_size},
               {"seed", c.task.seed},
               {"permutation", c.task.permutation},
               {"reorder_window", c.task.reorder_window}};
  return j;
}

/// Checks cross-field invariants; throws ConfigError naming the field path.
inline void validate(const RunConfig& c) {
  const auto& m = c.model;
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(field, "must be positive");
  };
  positive(m.d_model, "model.d_model");
  positive(m.n_heads, "model.n_heads");
  positive(m.d_head, "model.d_head");
  positive(m.d_ff, "model.d_ff");
  positive(m.n_enc_layers, "model.n_enc_layers");
  positive(m.n_dec_layers, "model.n_dec_layers");
  positive(m.max_seq_len, "model.max_seq_len");
  if (m.n_heads * m.d_head != m.d_model) throw ConfigError("model.d_head", "n_heads * d_head must equal d_model");
  if (m.vocab_src <= kNumReserved) throw ConfigError("model.vocab_src", "must exceed the reserved token count");
  if (m.vocab_tgt <= kNumReserved) throw ConfigError("model.vocab_tgt", "must exceed the reserved token count");
  if (!(m.dropout_rate >= 0.0 && m.dropout_rate < 1.0)) throw ConfigError("model.dropout_rate", "must lie in [0, 1)");

  positive(c.experts.num_experts, "experts.num_experts");
  if (c.experts.mode == RoutingMode::kGatedTopK &&
      (c.experts.top_k < 1 || c.experts.top_k > c.experts.num_experts)) {
    throw ConfigError("experts.top_k", "must satisfy 1 <= top_k <= num_experts");
  }

  const auto& t = c.training;
  if (!(t.alpha >= 0.0)) throw ConfigError("training.alpha", "must be >= 0");
  if (!(t.learning_rate > 0.0)) throw ConfigError("training.learning_rate", "must be positive");
  if (!(t.beta1 >= 0.0 && t.beta1 < 1.0)) throw ConfigError("training.beta1", "must lie in [0, 1)");
  if (!(t.beta2 >= 0.0 && t.beta2 < 1.0)) throw ConfigError("training.beta2", "must lie in [0, 1)");
  if (!(t.adam_eps > 0.0)) throw ConfigError("training.adam_eps", "must be positive");
  if (!(t.label_smoothing >= 0.0 && t.label_smoothing < 1.0)) {
    throw ConfigError("training.label_smoothing", "must lie in [0, 1)");
  }
  if (!(t.aux_coefficient >= 0.0)) throw ConfigError("training.aux_coefficient", "must be >= 0");
  const bool thor_objective = t.objective == Objective::kThorFull || t.objective == Objective::kCe1Cr ||
                              t.objective == Objective::kCe1Ce2 || t.objective == Objective::kCe1Only;
  if (thor_objective && c.experts.mode != RoutingMode::kThorStochastic) {
    throw ConfigError("training.objective", "'" + enum_name(t.objective) + "' requires experts.mode = thor");
  }
  if (!thor_objective && c.experts.mode == RoutingMode::kThorStochastic && c.experts.num_experts > 1) {
    throw ConfigError("training.objective", "thor experts need a thor objective");
  }
  if (t.objective == Objective::kSwitchCePlusAux && !c.experts.has_gate()) {
    throw ConfigError("training.objective", "switch-ce-aux needs a gated routing mode");
  }
  if (t.batch_tokens < c.task.max_len) throw ConfigError("training.batch_tokens", "must be >= task.max_len");

  positive(c.decode.beam_size, "decode.beam_size");
  positive(c.decode.max_decode_len, "decode.max_decode_len");
  if (c.decode.max_decode_len + 1 > m.max_seq_len) {
    throw ConfigError("decode.max_decode_len", "must leave room for bos within model.max_seq_len");
  }
  positive(c.validation_beam_size, "validation_beam_size");

  const auto& k = c.task;
  if (k.vocab_size <= kNumReserved) throw ConfigError("task.vocab_size", "must exceed the reserved token count");
  if (k.vocab_size > m.vocab_src || k.vocab_size > m.vocab_tgt) {
    throw ConfigError("task.vocab_size", "exceeds the model vocabulary");
  }
  if (k.min_len == 0 || k.min_len > k.max_len) throw ConfigError("task.min_len", "must satisfy 1 <= min_len <= max_len");
  if (k.max_len + 1 > m.max_seq_len) throw ConfigError("task.max_len", "sequence plus eos exceeds model.max_seq_len");
  if (k.max_len + 1 > c.decode.max_decode_len) {
    throw ConfigError("decode.max_decode_len", "must cover task.max_len plus eos");
  }
  if (!k.permutation.empty()) {
    if (k.permutation.size() != k.num_symbols()) throw ConfigError("task.permutation", "must map every content symbol");
    std::vector<int> sorted = k.permutation;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
      if (sorted[i] != static_cast<int>(i)) throw ConfigError("task.permutation", "is not a permutation of 0..n-1");
  }
  positive(c.telemetry_interval, "telemetry_interval");
  positive(c.eval_interval, "eval_interval");
}

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  detail::Reader r(j, "");
  r.get("name", c.name);
  r.get("run_dir", c.run_dir);
  r.get("telemetry_interval", c.telemetry_interval);
  r.get("eval_interval", c.eval_interval);
  r.get("checkpoint_interval", c.checkpoint_interval);
  r.get("validation_beam_size", c.validation_beam_size);
  {
    auto s = r.section("model");
    s.get("d_model", c.model.d_model);
    s.get("n_heads", c.model.n_heads);
    s.get("d_head", c.model.d_head);
    s.get("d_ff", c.model.d_ff);
    s.get("n_enc_layers", c.model.n_enc_layers);
    s.get("n_dec_layers", c.model.n_dec_layers);
    s.get("vocab_src", c.model.vocab_src);
    s.get("vocab_tgt", c.model.vocab_tgt);
    s.get("dropout_rate", c.model.dropout_rate);
    s.get("max_seq_len", c.model.max_seq_len);
    s.finish();
  }
  {
    auto s = r.section("experts");
    s.get("num_experts", c.experts.num_experts);
    s.get("mode", c.experts.mode);
    s.get("top_k", c.experts.top_k);
    s.finish();
  }
  {
    auto s = r.section("training");
    s.get("objective", c.training.objective);
    s.get("alpha", c.training.alpha);
    s.get("learning_rate", c.training.learning_rate);
    s.get("beta1", c.training.beta1);
    s.get("beta2", c.training.beta2);
    s.get("adam_eps", c.training.adam_eps);
    s.get("warmup_steps", c.training.warmup_steps);
    s.get("batch_tokens", c.training.batch_tokens);
    s.get("total_steps", c.training.total_steps);
    s.get("seed", c.training.seed);
    s.get("label_smoothing", c.training.label_smoothing);
    s.get("aux_coefficient", c.training.aux_coefficient);
    s.finish();
  }
  {
    auto s = r.section("decode");
    s.get("mode", c.decode.mode);
    s.get("beam_size", c.decode.beam_size);
    s.get("length_penalty", c.decode.length_penalty);
    s.get("max_decode_len", c.decode.max_decode_len);
    s.get("seed", c.decode.seed);
    s.finish();
  }
  {
    auto s = r.section("task");
    s.get("kind", c.task.kind);
    s.get("vocab_size", c.task.vocab_size);
    s.get("min_len", c.task.min_len);
    s.get("max_len", c.task.max_len);
    s.get("train_size", c.task.train_size);
    s.get("valid_size", c.task.valid_size);
    s.get("test_size", c.task.test_size);
    s.get("seed", c.task.seed);
    s.get("permutation", c.task.permutation);
    s.get("reorder_window", c.task.reorder_window);
    s.finish();
  }
  r.finish();
  return c;
}

inline std::string serialize_config(const RunConfig& c) { return to_json(c).dump(2); }

inline RunConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<root>", std::string("malformed config: ") + e.what());
  }
  return run_config_from_json(j);
}

/// Applies a `section.field=value` override to a JSON config. The value is read
/// as JSON when it parses, otherwise as a plain string.
inline void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  Json* cursor = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError(path, "empty path component");
    if (dot == std::string::npos) {
      (*cursor)[key] = value;
      break;
    }
    cursor = &(*cursor)[key];
    if (!cursor->is_object()) *cursor = Json::object();
    start = dot + 1;
  }
}

}  // namespace thor
