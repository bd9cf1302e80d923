// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "thor/config.hpp"
#include "thor/errors.hpp"
#include "thor/rng.hpp"

namespace thor {

struct Example {
  std::vector<int> source;
  std::vector<int> target;

  bool operator==(const Example&) const = default;
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
};

/// Permutation of content-symbol indices used by the cipher task.
inline std::vector<int> resolve_permutation(const TaskSpec& spec) {
  if (!spec.permutation.empty()) return spec.permutation;
  std::vector<int> perm(spec.num_symbols());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(spec.seed, 0x51f0));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
  return perm;
}

/// Target sequence for `source` under the task. `perm` is only read for kCipher.
inline std::vector<int> transduce(const TaskSpec& spec, const std::vector<int>& perm, const std::vector<int>& source) {
  switch (spec.kind) {
    case TaskKind::kCopy:
      return source;
    case TaskKind::kReverse:
      return {source.rbegin(), source.rend()};
    case TaskKind::kCipher: {
      std::vector<int> out(source.size());
      for (std::size_t i = 0; i < source.size(); ++i) out[i] = perm.at(source[i] - kNumReserved) + kNumReserved;
      const std::size_t w = spec.reorder_window;
      if (w > 1) {
        for (std::size_t start = 0; start < out.size(); start += w) {
          std::reverse(out.begin() + static_cast<std::ptrdiff_t>(start),
                       out.begin() + static_cast<std::ptrdiff_t>(std::min(start + w, out.size())));
        }
      }
      return out;
    }
  }
  return source;
}

/// Number of distinct sequences the task can produce, saturating at `cap`.
inline std::size_t sequence_space(const TaskSpec& spec, std::size_t cap) {
  std::size_t total = 0;
  const std::size_t k = spec.num_symbols();
  for (std::size_t len = spec.min_len; len <= spec.max_len; ++len) {
    std::size_t count = 1;
    for (std::size_t i = 0; i < len; ++i) {
      if (k == 0 || count > cap / k) {
        count = k == 0 ? 0 : cap;
        break;
      }
      count *= k;
    }
    total = std::min(cap, total + count);
  }
  return total;
}

/// Deterministic train/valid/test splits, pairwise disjoint by source content.
inline Dataset generate_dataset(const TaskSpec& spec) {
  if (spec.vocab_size <= static_cast<std::size_t>(kNumReserved)) {
    throw ConfigError("task.vocab_size", "must exceed the reserved token count");
  }
  if (spec.min_len == 0 || spec.min_len > spec.max_len) throw ConfigError("task.min_len", "invalid length range");
  const std::size_t needed = spec.train_size + spec.valid_size + spec.test_size;
  const std::size_t space = sequence_space(spec, needed * 2 + 1);
  // Rejection sampling needs headroom beyond the requested count.
  if (space < needed * 2) {
    throw ConfigError("task", "infeasible: " + std::to_string(needed) + " distinct sequences requested but only " +
                                  std::to_string(space) + " exist (need 2x headroom)");
  }
  const auto perm = resolve_permutation(spec);
  Rng rng(spec.seed);
  std::set<std::vector<int>> seen;
  auto draw = [&](std::size_t count) {
    std::vector<Example> out;
    out.reserve(count);
    while (out.size() < count) {
      const std::size_t len = spec.min_len + rng.uniform_index(spec.max_len - spec.min_len + 1);
      std::vector<int> src(len);
      for (auto& s : src) s = kNumReserved + static_cast<int>(rng.uniform_index(spec.num_symbols()));
      if (!seen.insert(src).second) continue;
      out.push_back({src, transduce(spec, perm, src)});
    }
    return out;
  };
  Dataset d;
  d.train = draw(spec.train_size);
  d.valid = draw(spec.valid_size);
  d.test = draw(spec.test_size);
  return d;
}

// ---------------------------------------------------------------------------
// Batches

/// Row-major [size x len] id grids. Sources end in eos; target_in is bos +
/// target, target_out is target + eos. Pad masks hold 1 exactly at pad slots.
struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<int> source;
  std::vector<int> target_in;
  std::vector<int> target_out;
  std::vector<std::uint8_t> source_pad;
  std::vector<std::uint8_t> target_pad;
  std::vector<std::size_t> indices;  // positions in the originating split
};

inline Batch make_batch(const std::vector<Example>& split, std::span<const std::size_t> indices) {
  Batch b;
  b.size = indices.size();
  for (auto i : indices) {
    b.src_len = std::max(b.src_len, split.at(i).source.size() + 1);
    b.tgt_len = std::max(b.tgt_len, split.at(i).target.size() + 1);
  }
  b.source.assign(b.size * b.src_len, kPadId);
  b.target_in.assign(b.size * b.tgt_len, kPadId);
  b.target_out.assign(b.size * b.tgt_len, kPadId);
  b.source_pad.assign(b.size * b.src_len, 1);
  b.target_pad.assign(b.size * b.tgt_len, 1);
  b.indices.assign(indices.begin(), indices.end());
  for (std::size_t r = 0; r < b.size; ++r) {
    const auto& ex = split[indices[r]];
    for (std::size_t t = 0; t < ex.source.size(); ++t) b.source[r * b.src_len + t] = ex.source[t];
    b.source[r * b.src_len + ex.source.size()] = kEosId;
    std::fill_n(b.source_pad.begin() + static_cast<std::ptrdiff_t>(r * b.src_len), ex.source.size() + 1, 0);
    b.target_in[r * b.tgt_len] = kBosId;
    for (std::size_t t = 0; t < ex.target.size(); ++t) {
      b.target_in[r * b.tgt_len + t + 1] = ex.target[t];
      b.target_out[r * b.tgt_len + t] = ex.target[t];
    }
    b.target_out[r * b.tgt_len + ex.target.size()] = kEosId;
    std::fill_n(b.target_pad.begin() + static_cast<std::ptrdiff_t>(r * b.tgt_len), ex.target.size() + 1, 0);
  }
  return b;
}

inline std::size_t example_length(const Example& e) { return std::max(e.source.size(), e.target.size()); }

/// Length-bucketed epochs under a token budget (batch size x longest example).
/// Epoch order is a pure function of (seed, epoch).
class BatchIterator {
 public:
  BatchIterator(const std::vector<Example>& split, std::size_t token_budget, std::uint64_t seed)
      : split_(&split), budget_(token_budget), seed_(seed) {
    if (split.empty()) throw ValidationError("batch iterator over an empty split");
    std::size_t longest = 0;
    for (const auto& e : split) longest = std::max(longest, example_length(e));
    if (budget_ < longest) {
      throw ConfigError("training.batch_tokens", "budget " + std::to_string(budget_) +
                                                     " is below the longest example (" + std::to_string(longest) + ")");
    }
  }

  std::vector<std::vector<std::size_t>> epoch_plan(std::size_t epoch) const {
    const auto& split = *split_;
    std::vector<std::size_t> order(split.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed_, epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return example_length(split[a]) < example_length(split[b]);
    });
    std::vector<std::vector<std::size_t>> batches;
    std::vector<std::size_t> current;
    std::size_t longest = 0;
    for (auto idx : order) {
      const std::size_t len = example_length(split[idx]);
      if (!current.empty() && (current.size() + 1) * std::max(longest, len) > budget_) {
        batches.push_back(std::move(current));
        current.clear();
        longest = 0;
      }
      current.push_back(idx);
      longest = std::max(longest, len);
    }
    if (!current.empty()) batches.push_back(std::move(current));
    for (std::size_t i = batches.size(); i > 1; --i) std::swap(batches[i - 1], batches[rng.uniform_index(i)]);
    return batches;
  }

  Batch next() {
    if (plan_.empty() || cursor_ >= plan_.size()) {
      if (!plan_.empty()) ++epoch_;
      plan_ = epoch_plan(epoch_);
      cursor_ = 0;
    }
    return make_batch(*split_, plan_[cursor_++]);
  }

  std::size_t epoch() const { return epoch_; }
  std::size_t cursor() const { return cursor_; }

  /// Restores a position previously read through epoch()/cursor().
  void seek(std::size_t epoch, std::size_t cursor) {
    epoch_ = epoch;
    plan_ = epoch_plan(epoch_);
    cursor_ = cursor;
  }

 private:
  const std::vector<Example>* split_;
  std::size_t budget_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::vector<std::size_t>> plan_;
};

// ---------------------------------------------------------------------------
// Plain-text persistence: one sequence per line, space-separated ids.

inline void write_sequences(const std::filesystem::path& path, const std::vector<std::vector<int>>& seqs) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& s : seqs) {
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? " " : "") << s[i];
    out << '\n';
  }
}

inline std::vector<std::vector<int>> read_sequences(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::vector<int>> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<int> seq;
    int v;
    while (ls >> v) seq.push_back(v);
    if (!ls.eof()) throw IoError("malformed id in " + path.string() + ": '" + line + "'");
    out.push_back(std::move(seq));
  }
  return out;
}

/// Writes <dir>/<split>.src and <dir>/<split>.tgt for each split.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& d) {
  std::filesystem::create_directories(dir);
  auto emit = [&](const std::string& name, const std::vector<Example>& split) {
    std::vector<std::vector<int>> src, tgt;
    for (const auto& e : split) {
      src.push_back(e.source);
      tgt.push_back(e.target);
    }
    write_sequences(dir / (name + ".src"), src);
    write_sequences(dir / (name + ".tgt"), tgt);
  };
  emit("train", d.train);
  emit("valid", d.valid);
  emit("test", d.test);
}

inline std::vector<Example> read_split(const std::filesystem::path& dir, const std::string& name) {
  auto src = read_sequences(dir / (name + ".src"));
  auto tgt = read_sequences(dir / (name + ".tgt"));
  if (src.size() != tgt.size()) throw IoError("split '" + name + "' has mismatched source/target line counts");
  std::vector<Example> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = {std::move(src[i]), std::move(tgt[i])};
  return out;
}

}  // namespace thor
