// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <vector>

#include "thor/errors.hpp"

namespace thor {

struct BleuResult {
  double score = 0.0;  // in [0, 100]
  std::vector<double> precisions;
  double brevity_penalty = 0.0;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
};

namespace detail {

template <class Token>
std::map<std::vector<Token>, std::size_t> ngram_counts(const std::vector<Token>& seq, std::size_t n) {
  std::map<std::vector<Token>, std::size_t> counts;
  if (seq.size() < n) return counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++counts[std::vector<Token>(seq.begin() + i, seq.begin() + i + n)];
  return counts;
}

}  // namespace detail

/// Corpus BLEU with one reference per hypothesis: geometric mean of clipped
/// n-gram precisions times the brevity penalty. A zero precision for n >= 2
/// is replaced by 1 / (candidates + 1); a zero unigram precision yields 0.
template <class Token>
BleuResult corpus_bleu(const std::vector<std::vector<Token>>& hypotheses,
                       const std::vector<std::vector<Token>>& references, std::size_t max_n = 4) {
  if (hypotheses.empty()) throw ValidationError("bleu: empty corpus");
  if (hypotheses.size() != references.size()) {
    throw ValidationError("bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                          std::to_string(references.size()) + " references");
  }
  if (max_n == 0) throw ValidationError("bleu: max_n must be positive");
  std::vector<std::size_t> matches(max_n, 0), totals(max_n, 0);
  BleuResult r;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& hyp = hypotheses[s];
    const auto& ref = references[s];
    r.hypothesis_length += hyp.size();
    r.reference_length += ref.size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto hc = detail::ngram_counts(hyp, n);
      const auto rc = detail::ngram_counts(ref, n);
      for (const auto& [gram, count] : hc) {
        totals[n - 1] += count;
        auto it = rc.find(gram);
        if (it != rc.end()) matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  if (r.reference_length == 0) throw ValidationError("bleu: references are all empty");
  r.precisions.resize(max_n);
  for (std::size_t n = 0; n < max_n; ++n) {
    if (n > 0 && matches[n] == 0) {
      r.precisions[n] = 1.0 / static_cast<double>(totals[n] + 1);
    } else {
      r.precisions[n] = totals[n] ? static_cast<double>(matches[n]) / static_cast<double>(totals[n]) : 0.0;
    }
  }
  const double c = static_cast<double>(r.hypothesis_length), ref_len = static_cast<double>(r.reference_length);
  r.brevity_penalty = c == 0.0 ? 0.0 : (c > ref_len ? 1.0 : std::exp(1.0 - ref_len / c));
  if (r.precisions[0] == 0.0 || r.brevity_penalty == 0.0) {
    r.score = 0.0;
    return r;
  }
  double log_sum = 0.0;
  for (double p : r.precisions) log_sum += std::log(p);
  r.score = 100.0 * r.brevity_penalty * std::exp(log_sum / static_cast<double>(max_n));
  return r;
}

template <class Token>
double bleu(const std::vector<std::vector<Token>>& hypotheses, const std::vector<std::vector<Token>>& references,
            std::size_t max_n = 4) {
  return corpus_bleu(hypotheses, references, max_n).score;
}

}  // namespace thor
