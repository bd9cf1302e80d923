// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "thor/bleu.hpp"
#include "thor/tasks.hpp"

namespace thor {
namespace {

TaskSpec small_task(TaskKind kind) {
  TaskSpec s;
  s.kind = kind;
  s.train_size = 200;
  s.valid_size = 50;
  s.test_size = 50;
  return s;
}

TEST(Tasks, CopyTargetsEqualSources) {
  const auto d = generate_dataset(small_task(TaskKind::kCopy));
  ASSERT_EQ(d.train.size(), 200u);
  for (const auto& e : d.train) EXPECT_EQ(e.target, e.source);
}

TEST(Tasks, ReverseTargetsAreReversedSources) {
  const auto d = generate_dataset(small_task(TaskKind::kReverse));
  for (const auto& e : d.valid) EXPECT_EQ(e.target, std::vector<int>(e.source.rbegin(), e.source.rend()));
}

TEST(Tasks, IdentityCipherIsCopy) {
  auto spec = small_task(TaskKind::kCipher);
  spec.permutation.resize(spec.num_symbols());
  for (std::size_t i = 0; i < spec.permutation.size(); ++i) spec.permutation[i] = static_cast<int>(i);
  const auto d = generate_dataset(spec);
  for (const auto& e : d.test) EXPECT_EQ(e.target, e.source);
}

TEST(Tasks, CipherReordersWithinBlocks) {
  auto spec = small_task(TaskKind::kCipher);
  spec.permutation.resize(spec.num_symbols());
  for (std::size_t i = 0; i < spec.permutation.size(); ++i) spec.permutation[i] = static_cast<int>(i);
  spec.reorder_window = 3;
  const std::vector<int> src = {4, 5, 6, 7, 8, 9, 10};
  EXPECT_EQ(transduce(spec, spec.permutation, src), (std::vector<int>{6, 5, 4, 9, 8, 7, 10}));
}

TEST(Tasks, DrawnPermutationIsABijection) {
  const auto perm = resolve_permutation(small_task(TaskKind::kCipher));
  std::set<int> values(perm.begin(), perm.end());
  EXPECT_EQ(values.size(), perm.size());
  EXPECT_EQ(*values.begin(), 0);
  EXPECT_EQ(*values.rbegin(), static_cast<int>(perm.size()) - 1);
}

TEST(Tasks, SplitsAreDisjointAndInRange) {
  const auto spec = small_task(TaskKind::kCipher);
  const auto d = generate_dataset(spec);
  std::set<std::vector<int>> seen;
  for (const auto* split : {&d.train, &d.valid, &d.test}) {
    for (const auto& e : *split) {
      EXPECT_TRUE(seen.insert(e.source).second);
      EXPECT_GE(e.source.size(), spec.min_len);
      EXPECT_LE(e.source.size(), spec.max_len);
      for (int id : e.source) {
        EXPECT_GE(id, kNumReserved);
        EXPECT_LT(id, static_cast<int>(spec.vocab_size));
      }
    }
  }
}

TEST(Tasks, GenerationIsDeterministic) {
  const auto a = generate_dataset(small_task(TaskKind::kCipher));
  const auto b = generate_dataset(small_task(TaskKind::kCipher));
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
}

TEST(Tasks, InfeasibleSizesAreRejected) {
  auto spec = small_task(TaskKind::kCopy);
  spec.vocab_size = 6;
  spec.min_len = 1;
  spec.max_len = 2;
  EXPECT_THROW(generate_dataset(spec), ConfigError);
}

TEST(Batches, LayoutMarksEosBosAndPads) {
  const std::vector<Example> split = {{{4, 5}, {6, 7}}, {{8, 9, 10}, {11, 12, 13}}};
  const std::vector<std::size_t> idx = {0, 1};
  const auto b = make_batch(split, idx);
  EXPECT_EQ(b.src_len, 4u);
  EXPECT_EQ(b.tgt_len, 4u);
  EXPECT_EQ(b.source, (std::vector<int>{4, 5, kEosId, kPadId, 8, 9, 10, kEosId}));
  EXPECT_EQ(b.target_in, (std::vector<int>{kBosId, 6, 7, kPadId, kBosId, 11, 12, 13}));
  EXPECT_EQ(b.target_out, (std::vector<int>{6, 7, kEosId, kPadId, 11, 12, 13, kEosId}));
  EXPECT_EQ(b.source_pad, (std::vector<std::uint8_t>{0, 0, 0, 1, 0, 0, 0, 0}));
  EXPECT_EQ(b.target_pad, (std::vector<std::uint8_t>{0, 0, 0, 1, 0, 0, 0, 0}));
}

TEST(Batches, EpochCoversSplitExactlyOnceWithinBudget) {
  const auto d = generate_dataset(small_task(TaskKind::kReverse));
  const std::size_t budget = 40;
  BatchIterator it(d.train, budget, 3);
  std::multiset<std::size_t> seen;
  for (const auto& batch : it.epoch_plan(0)) {
    std::size_t longest = 0;
    for (auto i : batch) longest = std::max(longest, example_length(d.train[i]));
    EXPECT_LE(batch.size() * longest, budget);
    seen.insert(batch.begin(), batch.end());
  }
  ASSERT_EQ(seen.size(), d.train.size());
  for (std::size_t i = 0; i < d.train.size(); ++i) EXPECT_EQ(seen.count(i), 1u);
}

TEST(Batches, SentenceBudgetGivesSingletons) {
  // Budget of one max-length sentence on a split where every sentence has that length.
  auto spec = small_task(TaskKind::kCopy);
  spec.min_len = spec.max_len;
  const auto d = generate_dataset(spec);
  BatchIterator it(d.train, spec.max_len, 1);
  for (const auto& batch : it.epoch_plan(0)) EXPECT_EQ(batch.size(), 1u);
}

TEST(Batches, FixedSeedGivesSameStream) {
  const auto d = generate_dataset(small_task(TaskKind::kCopy));
  BatchIterator a(d.train, 64, 9), b(d.train, 64, 9);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(a.next().indices, b.next().indices);
}

TEST(Batches, SeekReproducesTheStream) {
  const auto d = generate_dataset(small_task(TaskKind::kCopy));
  BatchIterator a(d.train, 64, 9);
  for (int i = 0; i < 23; ++i) a.next();
  BatchIterator b(d.train, 64, 9);
  b.seek(a.epoch(), a.cursor());
  for (int i = 0; i < 30; ++i) EXPECT_EQ(a.next().indices, b.next().indices);
}

TEST(Batches, BudgetBelowLongestExampleIsRejected) {
  const auto d = generate_dataset(small_task(TaskKind::kCopy));
  EXPECT_THROW(BatchIterator(d.train, 3, 0), ConfigError);
}

TEST(Bleu, HandExample) {
  // Unigram 4/5, bigram 3/4, trigram 2/3, 4-gram 1/2, equal lengths.
  const std::vector<std::vector<std::string>> hyp = {{"a", "b", "c", "d", "e"}};
  const std::vector<std::vector<std::string>> ref = {{"a", "b", "c", "d", "f"}};
  const auto r = corpus_bleu(hyp, ref);
  const double expected = 100.0 * std::pow(0.8 * 0.75 * (2.0 / 3.0) * 0.5, 0.25);
  EXPECT_NEAR(r.score, expected, 1e-9);
  EXPECT_NEAR(r.score, 66.87, 0.01);
  EXPECT_DOUBLE_EQ(r.brevity_penalty, 1.0);
}

TEST(Bleu, IdenticalCorpusScoresHundred) {
  const std::vector<std::vector<int>> c = {{4, 5, 6, 7}, {8, 9, 10, 11, 12}};
  EXPECT_DOUBLE_EQ(bleu(c, c), 100.0);
}

TEST(Bleu, NoUnigramOverlapScoresZero) {
  EXPECT_DOUBLE_EQ(bleu(std::vector<std::vector<int>>{{4, 5, 6}}, std::vector<std::vector<int>>{{7, 8, 9}}), 0.0);
}

TEST(Bleu, ShortHypothesisIsPenalized) {
  const auto r = corpus_bleu(std::vector<std::vector<int>>{{4, 5, 6, 7}}, std::vector<std::vector<int>>{{4, 5, 6, 7, 8}});
  EXPECT_NEAR(r.brevity_penalty, std::exp(1.0 - 5.0 / 4.0), 1e-12);
}

TEST(Bleu, MismatchedCorpusSizesAreRejected) {
  EXPECT_THROW(bleu(std::vector<std::vector<int>>{{4}}, std::vector<std::vector<int>>{}), ValidationError);
}

TEST(TextIo, DatasetRoundTrips) {
  const auto d = generate_dataset(small_task(TaskKind::kCipher));
  const auto dir = std::filesystem::temp_directory_path() / "thor_text_io";
  write_dataset(dir, d);
  EXPECT_EQ(read_split(dir, "train"), d.train);
  EXPECT_EQ(read_split(dir, "test"), d.test);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace thor
