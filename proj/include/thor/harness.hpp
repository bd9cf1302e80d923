// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "thor/checkpoint.hpp"
#include "thor/config.hpp"
#include "thor/errors.hpp"
#include "thor/inference.hpp"
#include "thor/optim.hpp"
#include "thor/tasks.hpp"
#include "thor/training.hpp"
#include "thor/transformer.hpp"

namespace thor {

namespace fs = std::filesystem;

/// Appends one JSON object per line.
class JsonlWriter {
 public:
  JsonlWriter() = default;
  JsonlWriter(const fs::path& path, bool append) : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw IoError("cannot write " + path.string());
  }
  void write(const Json& record) {
    if (!out_.is_open()) return;
    out_ << record.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline Json to_json(const RoutingTelemetry& t) {
  Json conf = Json::array();
  for (const auto& c : t.confidences) conf.push_back(c ? Json(*c) : Json(nullptr));
  return {{"step", t.step}, {"layer", t.layer}, {"loads", t.loads}, {"confidences", conf}};
}

inline RoutingTelemetry telemetry_from_json(const Json& j) {
  RoutingTelemetry t;
  t.step = j.at("step").get<std::size_t>();
  t.layer = j.at("layer").get<std::size_t>();
  t.loads = j.at("loads").get<std::vector<double>>();
  for (const auto& c : j.at("confidences")) {
    t.confidences.push_back(c.is_null() ? std::nullopt : std::optional<double>(c.get<double>()));
  }
  return t;
}

struct ValidationRecord {
  std::size_t step = 0;
  double bleu = 0.0;
  double exact_match = 0.0;
};

struct RunPaths {
  fs::path dir;
  fs::path metrics() const { return dir / "metrics.jsonl"; }
  fs::path telemetry() const { return dir / "telemetry.jsonl"; }
  fs::path validation() const { return dir / "validation.jsonl"; }
  fs::path config() const { return dir / "config.json"; }
  fs::path final_checkpoint() const { return dir / "final.ckpt"; }
  fs::path best_checkpoint() const { return dir / "best.ckpt"; }
  fs::path step_checkpoint(std::size_t step) const { return dir / ("step-" + std::to_string(step) + ".ckpt"); }
};

/// A training run: model, optimizer, data stream and output sinks. Writes
/// nothing to disk when constructed with `persist == false`.
class TrainingRun {
 public:
  explicit TrainingRun(RunConfig config, bool persist = true)
      : config_(std::move(config)), persist_(persist), data_(generate_dataset(config_.task)) {
    validate(config_);
    init(false);
    progress_.rng = Rng(derive_seed(config_.training.seed, 0x7a11));
  }

  /// Continues a run from a checkpoint; outputs are appended in `config.run_dir`.
  static TrainingRun resume(const Checkpoint& ck, bool persist = true) {
    return TrainingRun(ck, persist);
  }

  const RunConfig& config() const { return config_; }
  const Dataset& data() const { return data_; }
  const Seq2SeqTransformer& model() const { return *model_; }
  const Adam& optimizer() const { return *optimizer_; }
  const TrainingProgress& progress() const { return progress_; }
  const std::vector<LossBreakdown>& losses() const { return losses_; }
  const std::vector<RoutingTelemetry>& telemetry() const { return telemetry_; }
  const std::vector<ValidationRecord>& validations() const { return validations_; }
  double best_bleu() const { return progress_.best_bleu; }
  RunPaths paths() const { return {fs::path(config_.run_dir)}; }

  /// Model holding the parameters of the best validation point so far (the
  /// current parameters if no validation has happened).
  Seq2SeqTransformer best_model() const {
    Seq2SeqTransformer m(config_.model, config_.experts, config_.training.seed);
    Checkpoint ck;
    ck.parameters = best_params_.empty() ? make_checkpoint(config_, *model_, nullptr, progress_).parameters : best_params_;
    restore_parameters(ck, m);
    return m;
  }

  Checkpoint checkpoint() const { return make_checkpoint(config_, *model_, optimizer_.get(), progress_); }

  LossBreakdown step() {
    const std::size_t s = progress_.step + 1;
    const Batch batch = iterator_->next();
    const double lr = learning_rate_at(s, config_.training.learning_rate, config_.training.warmup_steps);
    StepOptions opts = step_options(config_.training);
    opts.telemetry = &fragments_;
    const LossBreakdown loss = training_step(*model_, *optimizer_, batch, config_.training.objective, opts,
                                             progress_.rng, lr);
    progress_.step = s;
    progress_.epoch = iterator_->epoch();
    progress_.cursor = iterator_->cursor();
    losses_.push_back(loss);
    metrics_.write({{"step", s}, {"ce1", loss.ce1}, {"ce2", loss.ce2}, {"cr", loss.cr}, {"aux", loss.aux},
                    {"total", loss.total}, {"lr", lr}});
    if (s % config_.telemetry_interval == 0) flush_telemetry(s);
    if (s % config_.eval_interval == 0 || s == config_.training.total_steps) validate_now(s);
    if (persist_ && config_.checkpoint_interval > 0 && s % config_.checkpoint_interval == 0) {
      save_checkpoint(paths().step_checkpoint(s), checkpoint());
    }
    return loss;
  }

  void run_until(std::size_t last_step) {
    while (progress_.step < last_step) step();
  }

  /// Trains to total_steps and writes the final checkpoint.
  void run() {
    run_until(config_.training.total_steps);
    if (persist_) save_checkpoint(paths().final_checkpoint(), checkpoint());
  }

 private:
  TrainingRun(const Checkpoint& ck, bool persist)
      : config_(ck.config), persist_(persist), data_(generate_dataset(config_.task)) {
    validate(config_);
    init(true);
    restore_parameters(ck, *model_);
    restore_optimizer(ck, *optimizer_);
    progress_ = ck.progress;
    iterator_->seek(progress_.epoch, progress_.cursor);
    if (persist_ && fs::exists(paths().best_checkpoint())) best_params_ = load_checkpoint(paths().best_checkpoint()).parameters;
  }

  void init(bool append) {
    model_ = std::make_unique<Seq2SeqTransformer>(config_.model, config_.experts, config_.training.seed);
    optimizer_ = std::make_unique<Adam>(model_->parameters(), adam_hyper(config_.training));
    iterator_ = std::make_unique<BatchIterator>(data_.train, config_.training.batch_tokens,
                                                derive_seed(config_.training.seed, 0xba7c));
    if (!persist_) return;
    const auto p = paths();
    std::error_code ec;
    fs::create_directories(p.dir, ec);
    if (ec || !fs::is_directory(p.dir)) throw IoError("run_dir '" + p.dir.string() + "' is not writable");
    if (!append) {
      std::ofstream cfg(p.config());
      if (!cfg) throw IoError("run_dir '" + p.dir.string() + "' is not writable");
      cfg << serialize_config(config_) << '\n';
    }
    metrics_ = JsonlWriter(p.metrics(), append);
    telemetry_out_ = JsonlWriter(p.telemetry(), append);
    validation_out_ = JsonlWriter(p.validation(), append);
  }

  void flush_telemetry(std::size_t s) {
    std::map<std::size_t, std::vector<RoutingFragment>> by_layer;
    for (auto& f : fragments_) by_layer[f.layer].push_back(std::move(f));
    fragments_.clear();
    for (const auto& [layer, frags] : by_layer) {
      auto t = record_telemetry(frags, s);
      telemetry_out_.write(to_json(t));
      telemetry_.push_back(std::move(t));
    }
  }

  void validate_now(std::size_t s) {
    DecodeConfig d = config_.decode;
    d.beam_size = config_.validation_beam_size;
    const auto report = evaluate(*model_, data_.valid, d);
    validations_.push_back({s, report.bleu, report.exact_match});
    validation_out_.write({{"step", s}, {"bleu", report.bleu}, {"exact_match", report.exact_match}});
    if (report.bleu > progress_.best_bleu) {
      progress_.best_bleu = report.bleu;
      progress_.best_step = s;
      best_params_ = make_checkpoint(config_, *model_, nullptr, progress_).parameters;
      if (persist_) save_checkpoint(paths().best_checkpoint(), make_checkpoint(config_, *model_, nullptr, progress_));
    }
  }

  RunConfig config_;
  bool persist_;
  Dataset data_;
  std::unique_ptr<Seq2SeqTransformer> model_;
  std::unique_ptr<Adam> optimizer_;
  std::unique_ptr<BatchIterator> iterator_;
  TrainingProgress progress_;
  std::vector<LossBreakdown> losses_;
  std::vector<RoutingFragment> fragments_;
  std::vector<RoutingTelemetry> telemetry_;
  std::vector<ValidationRecord> validations_;
  std::vector<NamedValues> best_params_;
  JsonlWriter metrics_;
  JsonlWriter telemetry_out_;
  JsonlWriter validation_out_;
};

// ---------------------------------------------------------------------------
// Routing analysis

struct RoutingAnalysisOptions {
  double collapse_threshold = 0.9;
  std::size_t collapse_window = 3;  // consecutive intervals
  double random_delta = 0.05;
};

struct RoutingAnalysis {
  std::vector<RoutingTelemetry> records;
  std::size_t num_experts = 0;
  bool collapse = false;
  /// Absent when no record carries confidences (gateless routing).
  std::optional<bool> random_signature;
  double final_spread = 0.0;  // mean over layers of max load - min load in the last interval
  double final_max_load = 0.0;
};

inline std::vector<RoutingTelemetry> read_telemetry(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing telemetry: " + path.string());
  std::vector<RoutingTelemetry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(telemetry_from_json(Json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed telemetry record: " + std::string(e.what()));
    }
  }
  if (out.empty()) throw IoError("missing telemetry: " + path.string() + " has no records");
  return out;
}

inline RoutingAnalysis analyze_routing(std::vector<RoutingTelemetry> records, const RoutingAnalysisOptions& opts = {}) {
  if (records.empty()) throw ValidationError("analyze_routing: no telemetry");
  RoutingAnalysis a;
  a.num_experts = records.front().loads.size();
  std::map<std::size_t, std::vector<const RoutingTelemetry*>> by_layer;
  for (const auto& r : records) by_layer[r.layer].push_back(&r);

  bool any_conf = false, all_near = true;
  for (const auto& r : records) {
    for (const auto& c : r.confidences) {
      if (!c) continue;
      any_conf = true;
      if (std::abs(*c - 1.0 / static_cast<double>(a.num_experts)) > opts.random_delta) all_near = false;
    }
  }
  if (any_conf) a.random_signature = all_near;

  double spread = 0.0;
  for (const auto& [layer, recs] : by_layer) {
    std::size_t run = 0;
    for (const auto* r : recs) {
      const double mx = *std::max_element(r->loads.begin(), r->loads.end());
      run = mx > opts.collapse_threshold ? run + 1 : 0;
      if (run >= opts.collapse_window) a.collapse = true;
    }
    const auto& last = recs.back()->loads;
    const double mx = *std::max_element(last.begin(), last.end()), mn = *std::min_element(last.begin(), last.end());
    spread += mx - mn;
    a.final_max_load = std::max(a.final_max_load, mx);
  }
  a.final_spread = spread / static_cast<double>(by_layer.size());
  a.records = std::move(records);
  return a;
}

/// Columnar text table of the analysis, one row per (step, layer).
inline std::string format_routing_table(const RoutingAnalysis& a) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "step\tlayer";
  for (std::size_t i = 0; i < a.num_experts; ++i) out << "\tload_" << i;
  for (std::size_t i = 0; i < a.num_experts; ++i) out << "\tconf_" << i;
  out << '\n';
  for (const auto& r : a.records) {
    out << r.step << '\t' << r.layer;
    for (double l : r.loads) out << '\t' << l;
    for (const auto& c : r.confidences) {
      if (c) out << '\t' << *c;
      else out << "\t-";
    }
    out << '\n';
  }
  out << "# collapse: " << (a.collapse ? "yes" : "no") << '\n';
  out << "# random-routing signature: "
      << (a.random_signature ? (*a.random_signature ? "yes" : "no") : std::string("n/a (no gate)")) << '\n';
  out << "# final load spread: " << a.final_spread << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Alpha sweep

struct SweepRow {
  double alpha = 0.0;
  double best_bleu = 0.0;
};

/// One run per alpha with the THOR objective and a shared seed.
inline std::vector<SweepRow> sweep_alpha(const RunConfig& base, const std::vector<double>& alphas, bool persist = true) {
  if (alphas.empty()) throw ConfigError("alphas", "need at least one value");
  std::vector<SweepRow> rows;
  for (double alpha : alphas) {
    RunConfig c = base;
    c.training.objective = Objective::kThorFull;
    c.training.alpha = alpha;
    std::ostringstream name;
    name << "alpha-" << alpha;
    c.run_dir = (fs::path(base.run_dir) / name.str()).string();
    TrainingRun run(c, persist);
    run.run();
    rows.push_back({alpha, run.best_bleu()});
  }
  return rows;
}

inline std::string format_sweep_table(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << "alpha\tbest_valid_bleu\n";
  for (const auto& r : rows) out << r.alpha << '\t' << r.best_bleu << '\n';
  return out.str();
}

}  // namespace thor
