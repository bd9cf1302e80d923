// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "thor/config.hpp"
#include "thor/errors.hpp"
#include "thor/optim.hpp"
#include "thor/rng.hpp"
#include "thor/transformer.hpp"

namespace thor {

// File layout:
//   "THORCKPT <version>\n"
//   "<header byte count>\n"
//   header JSON (config, counters, rng, tensor directory)
//   "\n"
//   raw little-endian float64 blobs at the offsets named in the directory
inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "THORCKPT";

/// Loop position needed to continue a run exactly where it stopped.
struct TrainingProgress {
  std::size_t step = 0;
  Rng rng;
  std::size_t epoch = 0;
  std::size_t cursor = 0;
  double best_bleu = -1.0;
  std::size_t best_step = 0;

  bool operator==(const TrainingProgress&) const = default;
};

struct NamedValues {
  std::string name;
  ad::Shape shape;
  std::vector<double> values;

  bool operator==(const NamedValues&) const = default;
};

struct Checkpoint {
  RunConfig config;
  std::vector<NamedValues> parameters;
  std::vector<AdamMoments> moments;  // parallel to parameters; empty if no optimizer was saved
  TrainingProgress progress;
};

namespace detail {

inline void append_le(std::string& out, std::span<const double> values) {
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
}

inline std::vector<double> read_le(const std::string& blob, std::size_t offset, std::size_t count) {
  if (offset + count * 8 > blob.size()) throw IoError("checkpoint payload truncated");
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[offset + i * 8 + static_cast<std::size_t>(b)]))
              << (8 * b);
    }
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

}  // namespace detail

/// Serializes a checkpoint to bytes. Equal checkpoints give equal bytes.
inline std::string encode_checkpoint(const Checkpoint& ck) {
  Json header;
  header["version"] = kCheckpointVersion;
  header["config"] = to_json(ck.config);
  header["progress"] = {{"step", ck.progress.step},           {"rng", ck.progress.rng.serialize()},
                        {"epoch", ck.progress.epoch},         {"cursor", ck.progress.cursor},
                        {"best_bleu", ck.progress.best_bleu}, {"best_step", ck.progress.best_step}};
  std::string payload;
  Json tensors = Json::array();
  for (const auto& p : ck.parameters) {
    tensors.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", payload.size()}});
    detail::append_le(payload, p.values);
  }
  header["tensors"] = std::move(tensors);
  Json moments = Json::array();
  for (const auto& m : ck.moments) {
    Json entry = {{"t", m.t}, {"size", m.m.size()}, {"offset", payload.size()}};
    detail::append_le(payload, m.m);
    detail::append_le(payload, m.v);
    moments.push_back(std::move(entry));
  }
  header["moments"] = std::move(moments);
  const std::string text = header.dump();
  std::ostringstream out;
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n' << text.size() << '\n' << text << '\n' << payload;
  return out.str();
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  int version = 0;
  std::size_t header_size = 0;
  in >> magic >> version >> header_size;
  if (!in || magic != kCheckpointMagic) throw IoError("not a checkpoint file");
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  in.get();
  const auto header_start = static_cast<std::size_t>(in.tellg());
  if (header_start + header_size + 1 > bytes.size()) throw IoError("checkpoint header truncated");
  Checkpoint ck;
  try {
    const Json header = Json::parse(bytes.substr(header_start, header_size));
    const std::string payload = bytes.substr(header_start + header_size + 1);
    ck.config = run_config_from_json(header.at("config"));
    const auto& p = header.at("progress");
    ck.progress.step = p.at("step").get<std::size_t>();
    ck.progress.rng = Rng::deserialize(p.at("rng").get<std::string>());
    ck.progress.epoch = p.at("epoch").get<std::size_t>();
    ck.progress.cursor = p.at("cursor").get<std::size_t>();
    ck.progress.best_bleu = p.at("best_bleu").get<double>();
    ck.progress.best_step = p.at("best_step").get<std::size_t>();
    for (const auto& t : header.at("tensors")) {
      NamedValues nv;
      nv.name = t.at("name").get<std::string>();
      nv.shape = t.at("shape").get<ad::Shape>();
      nv.values = detail::read_le(payload, t.at("offset").get<std::size_t>(), ad::numel(nv.shape));
      ck.parameters.push_back(std::move(nv));
    }
    for (const auto& m : header.at("moments")) {
      AdamMoments am;
      am.t = m.at("t").get<std::size_t>();
      const auto size = m.at("size").get<std::size_t>();
      const auto offset = m.at("offset").get<std::size_t>();
      am.m = detail::read_le(payload, offset, size);
      am.v = detail::read_le(payload, offset + size * 8, size);
      ck.moments.push_back(std::move(am));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (!ck.moments.empty() && ck.moments.size() != ck.parameters.size()) {
    throw IoError("checkpoint optimizer state does not match its parameters");
  }
  return ck;
}

/// Snapshot of a model (and optionally its optimizer) for persistence.
inline Checkpoint make_checkpoint(const RunConfig& config, const Seq2SeqTransformer& model, const Adam* optimizer,
                                  const TrainingProgress& progress) {
  Checkpoint ck;
  ck.config = config;
  ck.progress = progress;
  for (const auto& [name, t] : model.parameters()) {
    ck.parameters.push_back({name, t.shape(), std::vector<double>(t.values().begin(), t.values().end())});
  }
  if (optimizer) ck.moments = optimizer->moments();
  return ck;
}

/// Copies checkpoint values into a model built from the same config.
inline void restore_parameters(const Checkpoint& ck, Seq2SeqTransformer& model) {
  auto params = model.parameters();
  if (params.size() != ck.parameters.size()) {
    throw ValidationError("checkpoint holds " + std::to_string(ck.parameters.size()) + " tensors, model has " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    const auto& saved = ck.parameters[i];
    if (saved.name != name || saved.shape != t.shape()) {
      throw ValidationError("checkpoint tensor '" + saved.name + "' " + ad::to_string(saved.shape) +
                            " does not match model tensor '" + name + "' " + ad::to_string(t.shape()));
    }
    std::copy(saved.values.begin(), saved.values.end(), t.data().begin());
  }
}

inline void restore_optimizer(const Checkpoint& ck, Adam& optimizer) {
  if (ck.moments.empty()) return;
  if (ck.moments.size() != optimizer.parameters().size()) throw ValidationError("optimizer state size mismatch");
  optimizer.mutable_moments() = ck.moments;
}

inline void write_file_atomically(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomically(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace thor
