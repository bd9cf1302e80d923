// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "thor/checkpoint.hpp"
#include "thor/config.hpp"
#include "thor/harness.hpp"
#include "thor/inference.hpp"
#include "thor/presets.hpp"
#include "thor/tasks.hpp"

namespace {

namespace fs = std::filesystem;
using thor::Json;

// Config sources shared by every verb that builds a RunConfig.
struct ConfigSource {
  std::string preset;
  std::string file;
  std::vector<std::string> sets;
};

void add_config_options(CLI::App* cmd, ConfigSource& src) {
  cmd->add_option("--preset", src.preset, "start from a named preset (see list-presets)");
  cmd->add_option("--config", src.file, "JSON config file; applied over the preset")->check(CLI::ExistingFile);
  cmd->add_option("--set", src.sets, "field override, e.g. --set training.alpha=2 (repeatable)");
  cmd->allow_extras();
}

// Remaining `--a.b=value` / `--a.b value` arguments become overrides.
std::vector<std::string> extra_overrides(const CLI::App* cmd) {
  std::vector<std::string> out;
  const auto extras = cmd->remaining();
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string arg = extras[i];
    if (arg.rfind("--", 0) != 0) throw thor::ConfigError(arg, "unexpected argument");
    arg = arg.substr(2);
    if (arg.find('=') == std::string::npos) {
      if (i + 1 >= extras.size()) throw thor::ConfigError(arg, "missing value");
      arg += "=" + extras[++i];
    }
    out.push_back(arg);
  }
  return out;
}

fs::path resolve_run_dir(const std::string& run_dir) {
  fs::path p(run_dir);
  if (const char* root = std::getenv("THOR_RUN_ROOT"); root != nullptr && *root != '\0' && p.is_relative()) {
    return fs::path(root) / p;
  }
  return p;
}

thor::RunConfig build_config(const ConfigSource& src, const CLI::App* cmd) {
  Json j = thor::to_json(src.preset.empty() ? thor::RunConfig{} : thor::preset(src.preset));
  if (!src.file.empty()) {
    std::ifstream in(src.file);
    Json file;
    try {
      file = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw thor::ConfigError(src.file, std::string("malformed config: ") + e.what());
    }
    thor::run_config_from_json(file);  // rejects unknown fields with their path
    j.merge_patch(file);
  }
  for (const auto& s : src.sets) thor::apply_override(j, s);
  for (const auto& s : extra_overrides(cmd)) thor::apply_override(j, s);
  auto config = thor::run_config_from_json(j);
  config.run_dir = resolve_run_dir(config.run_dir).string();
  thor::validate(config);
  return config;
}

std::vector<thor::Example> pick_split(const thor::Dataset& d, const std::string& name) {
  if (name == "train") return d.train;
  if (name == "valid") return d.valid;
  if (name == "test") return d.test;
  throw thor::ConfigError("split", "expected train, valid or test, got '" + name + "'");
}

int cmd_train(const ConfigSource& src, const CLI::App* cmd, const std::string& resume) {
  if (!resume.empty()) {
    auto ck = thor::load_checkpoint(resume);
    std::cout << "resuming " << ck.config.name << " from step " << ck.progress.step << "\n";
    auto run = thor::TrainingRun::resume(ck);
    run.run();
    std::cout << "done: step " << run.progress().step << ", best valid BLEU " << run.best_bleu() << "\n";
    return 0;
  }
  auto config = build_config(src, cmd);
  thor::TrainingRun run(config);
  std::cout << "training " << config.name << " -> " << config.run_dir << " (" << run.model().parameter_count()
            << " parameters)\n";
  const std::size_t total = config.training.total_steps;
  while (run.progress().step < total) {
    const auto loss = run.step();
    const auto s = run.progress().step;
    if (s % config.eval_interval == 0 || s == total) {
      std::cout << "step " << s << "  ce1 " << loss.ce1 << "  cr " << loss.cr << "  total " << loss.total
                << "  valid BLEU " << run.validations().back().bleu << "\n";
    }
  }
  thor::save_checkpoint(run.paths().final_checkpoint(), run.checkpoint());
  std::cout << "best valid BLEU " << run.best_bleu() << " at step " << run.progress().best_step << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string split = "test";
  std::string mode;
  std::size_t beam = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool self_test = false;
};

void print_flops(const thor::Seq2SeqTransformer& model, const std::vector<thor::Example>& split, std::uint64_t seed) {
  const auto batch = thor::eval_batches(split).front();
  std::cout << "forward FLOPs over the first evaluation batch (" << batch.size << " sentences):\n";
  std::cout << "  mode        expert      total\n";
  for (auto mode : {thor::DecodeMode::kDispatchSentence, thor::DecodeMode::kDispatchToken, thor::DecodeMode::kEnsemble}) {
    const auto c = thor::forward_flops(model, batch, mode, seed);
    std::cout << "  " << std::left << std::setw(10) << thor::enum_name(mode) << std::right << std::setw(10)
              << c[thor::ad::FlopCategory::kExpert] << std::setw(11) << c.total() << "\n";
  }
}

int cmd_eval(const EvalArgs& a) {
  const auto ck = thor::load_checkpoint(a.checkpoint);
  auto config = ck.config;
  if (!a.mode.empty()) config.decode.mode = thor::parse_enum<thor::DecodeMode>(a.mode, "decode.mode");
  if (a.beam > 0) config.decode.beam_size = a.beam;
  if (a.seed_set) config.decode.seed = a.seed;
  const auto data = thor::generate_dataset(config.task);
  const auto split = pick_split(data, a.split);
  thor::EvalReport report;
  if (a.self_test) {
    std::vector<std::vector<int>> refs;
    for (const auto& e : split) refs.push_back(e.target);
    report = thor::score_hypotheses(split, refs);
    std::cout << "self-test (references as hypotheses)\n";
  } else {
    thor::Seq2SeqTransformer model(config.model, config.experts, config.training.seed);
    thor::restore_parameters(ck, model);
    report = thor::evaluate(model, split, config.decode);
    print_flops(model, split, config.decode.seed);
  }
  std::cout << std::fixed << std::setprecision(2) << "split " << a.split << "  mode "
            << thor::enum_name(config.decode.mode) << "  beam " << config.decode.beam_size << "\n"
            << "BLEU " << report.bleu << "  exact match " << 100.0 * report.exact_match << "%\n";
  return 0;
}

int main_impl(int argc, char** argv) {
  CLI::App app{"THOR stochastic experts and Switch baselines on synthetic transduction tasks"};
  app.require_subcommand(1);

  ConfigSource train_src;
  std::string resume;
  auto* train = app.add_subcommand("train", "train a model and write metrics, telemetry and checkpoints");
  add_config_options(train, train_src);
  train->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "decode a split and report BLEU, exact match and FLOPs");
  eval->add_option("--checkpoint", eval_args.checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_args.split, "train, valid or test");
  eval->add_option("--mode", eval_args.mode, "dispatch-s, dispatch-t or ensemble");
  eval->add_option("--beam", eval_args.beam, "beam size (default from the checkpoint config)");
  auto* seed_opt = eval->add_option("--seed", eval_args.seed, "routing seed");
  eval->add_flag("--self-test", eval_args.self_test, "score the references against themselves");

  std::string analyze_dir;
  thor::RoutingAnalysisOptions analyze_opts;
  auto* analyze = app.add_subcommand("analyze-routing", "tabulate expert loads and confidences of a run");
  analyze->add_option("--run-dir", analyze_dir)->required();
  analyze->add_option("--window", analyze_opts.collapse_window, "consecutive intervals for the collapse flag");
  analyze->add_option("--threshold", analyze_opts.collapse_threshold, "load above which an interval counts as collapsed");
  analyze->add_option("--delta", analyze_opts.random_delta, "tolerance around 1/N for the random-routing signature");

  std::string var_ckpt, var_split = "test";
  std::size_t var_runs = 20;
  std::uint64_t var_seed_base = 0;
  std::size_t var_beam = 1;
  auto* variance = app.add_subcommand("variance", "spread of BLEU across random-dispatch seeds");
  variance->add_option("--checkpoint", var_ckpt)->required()->check(CLI::ExistingFile);
  variance->add_option("--runs", var_runs, "number of seeds (>= 2)");
  variance->add_option("--seed-base", var_seed_base, "seeds are seed-base, seed-base+1, ...");
  variance->add_option("--split", var_split);
  variance->add_option("--beam", var_beam);

  ConfigSource sweep_src;
  std::vector<double> alphas = {0, 2, 4, 6, 8};
  auto* sweep = app.add_subcommand("sweep-alpha", "train one THOR run per alpha and tabulate validation BLEU");
  add_config_options(sweep, sweep_src);
  sweep->add_option("--alphas", alphas)->delimiter(',');

  app.add_subcommand("list-presets", "print the available presets");

  ConfigSource gen_src;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "write the task splits as parallel text files");
  add_config_options(gen, gen_src);
  gen->add_option("--out", gen_out)->required();

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) return cmd_train(train_src, train, resume);
  if (eval->parsed()) {
    eval_args.seed_set = seed_opt->count() > 0;
    return cmd_eval(eval_args);
  }
  if (analyze->parsed()) {
    auto a = thor::analyze_routing(thor::read_telemetry(thor::RunPaths{analyze_dir}.telemetry()), analyze_opts);
    std::cout << thor::format_routing_table(a);
    return 0;
  }
  if (variance->parsed()) {
    const auto ck = thor::load_checkpoint(var_ckpt);
    thor::Seq2SeqTransformer model(ck.config.model, ck.config.experts, ck.config.training.seed);
    thor::restore_parameters(ck, model);
    const auto data = thor::generate_dataset(ck.config.task);
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < var_runs; ++i) seeds.push_back(var_seed_base + i);
    auto decode = ck.config.decode;
    decode.beam_size = var_beam;
    const auto r = thor::prediction_variance(model, pick_split(data, var_split), decode, seeds);
    std::cout << std::setprecision(6) << "seed\tbleu\n";
    for (std::size_t i = 0; i < r.seeds.size(); ++i) std::cout << r.seeds[i] << '\t' << r.scores[i] << '\n';
    std::cout << "mean " << r.mean << "\nvariance " << r.variance << "\ntoken probability variance "
              << r.token_prob_variance << '\n';
    return 0;
  }
  if (sweep->parsed()) {
    const auto base = build_config(sweep_src, sweep);
    std::cout << thor::format_sweep_table(thor::sweep_alpha(base, alphas));
    return 0;
  }
  if (app.got_subcommand("list-presets")) {
    for (const auto& p : thor::presets()) std::cout << std::left << std::setw(22) << p.name << p.description << '\n';
    return 0;
  }
  if (gen->parsed()) {
    const auto config = build_config(gen_src, gen);
    thor::write_dataset(gen_out, thor::generate_dataset(config.task));
    std::cout << "wrote train/valid/test splits to " << gen_out << '\n';
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return main_impl(argc, argv);
  } catch (const thor::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
