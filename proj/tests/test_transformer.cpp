// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "gradcheck.hpp"
#include "thor/transformer.hpp"

namespace thor {
namespace {

using testing::grad_check;

ModelConfig small_model(std::size_t layers = 2) {
  ModelConfig m;
  m.d_model = 8;
  m.n_heads = 2;
  m.d_head = 4;
  m.d_ff = 12;
  m.n_enc_layers = layers;
  m.n_dec_layers = layers;
  m.vocab_src = 11;
  m.vocab_tgt = 11;
  m.dropout_rate = 0.0;
  m.max_seq_len = 10;
  return m;
}

Batch sample_batch() {
  const std::vector<Example> split = {{{4, 7, 9}, {5, 6, 10, 8}}, {{8, 5}, {9, 4}}};
  const std::vector<std::size_t> idx = {0, 1};
  return make_batch(split, idx);
}

// Redraws every parameter at a larger scale so gradients sit well above rounding noise.
void randomize(const Seq2SeqTransformer& model, std::uint64_t seed, double stddev) {
  Rng rng(seed);
  for (auto [name, t] : model.parameters())
    for (auto& v : t.data()) v = (name.find("norm") != std::string::npos ? 1.0 : 0.0) + stddev * rng.normal();
}

std::vector<Tensor> parameter_tensors(const Seq2SeqTransformer& model) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : model.parameters()) out.push_back(t);
  return out;
}

TEST(Positions, SinusoidalValues) {
  const auto p = sinusoidal_positions(3, 4);
  EXPECT_DOUBLE_EQ(p[0], 0.0);
  EXPECT_DOUBLE_EQ(p[1], 1.0);
  EXPECT_DOUBLE_EQ(p[4 + 0], std::sin(1.0));
  EXPECT_DOUBLE_EQ(p[4 + 1], std::cos(1.0));
  EXPECT_DOUBLE_EQ(p[4 + 2], std::sin(1.0 / 100.0));
  EXPECT_DOUBLE_EQ(p[8 + 3], std::cos(2.0 / 100.0));
}

TEST(Transformer, EndToEndGradientMatchesFiniteDifferences) {
  Seq2SeqTransformer model(small_model(2), ExpertConfig{2, RoutingMode::kThorStochastic, 1}, 1);
  randomize(model, 3, 0.3);
  const Batch b = sample_batch();
  const RoutePlan plan = {FixedExpert{0}, FixedExpert{1}, FixedExpert{1}, FixedExpert{0}};
  ForwardOptions opts;
  opts.plan = &plan;
  auto loss = [&] { return ad::cross_entropy(model.forward(b, opts), b.target_out, kPadId, 0.1); };
  const auto r = grad_check(loss, parameter_tensors(model));
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

TEST(Transformer, GatedModelGradientMatchesFiniteDifferences) {
  Seq2SeqTransformer model(small_model(1), ExpertConfig{2, RoutingMode::kGatedTopK, 2}, 2);
  randomize(model, 4, 0.3);
  const Batch b = sample_batch();
  auto loss = [&] { return ad::cross_entropy(model.forward(b, {}), b.target_out, kPadId, 0.0); };
  const auto r = grad_check(loss, parameter_tensors(model));
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

TEST(Transformer, LogitShapeIsPositionsByVocabulary) {
  for (auto mode : {RoutingMode::kThorStochastic, RoutingMode::kSwitchToken, RoutingMode::kSwitchSentence,
                    RoutingMode::kSwitchRandom, RoutingMode::kGatedTopK}) {
    Seq2SeqTransformer model(small_model(1), ExpertConfig{1, mode, 1}, 1);
    Rng rng(1);
    ForwardOptions opts;
    opts.rng = &rng;
    const Batch b = sample_batch();
    const auto logits = model.forward(b, opts);
    EXPECT_EQ(logits.shape(), (ad::Shape{b.size * b.tgt_len, 11})) << enum_name(mode);
  }
}

TEST(Transformer, SingleExpertIsTheSameNetworkInEveryGatelessMode) {
  // Same seed and same parameter names: THOR, random routing and a fixed plan all agree.
  const Batch b = sample_batch();
  Seq2SeqTransformer thor_model(small_model(1), ExpertConfig{1, RoutingMode::kThorStochastic, 1}, 5);
  Seq2SeqTransformer random_model(small_model(1), ExpertConfig{1, RoutingMode::kSwitchRandom, 1}, 5);
  Rng rng(1);
  ForwardOptions random_opts;
  random_opts.rng = &rng;
  const RoutePlan plan = {FixedExpert{0}, FixedExpert{0}};
  ForwardOptions plan_opts;
  plan_opts.plan = &plan;
  const auto a = thor_model.forward(b, {});
  const auto c = random_model.forward(b, random_opts);
  const auto d = thor_model.forward(b, plan_opts);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_EQ(a.values()[i], c.values()[i]);
    EXPECT_EQ(a.values()[i], d.values()[i]);
  }
}

TEST(Transformer, SingleExpertGatedModelsMatchGatelessOnes) {
  // With one expert the gate value is exactly 1, so gated modes reduce to the plain FFN.
  const Batch b = sample_batch();
  Seq2SeqTransformer plain(small_model(1), ExpertConfig{1, RoutingMode::kThorStochastic, 1}, 5);
  const auto ref = plain.forward(b, {});
  for (auto mode : {RoutingMode::kSwitchToken, RoutingMode::kGatedTopK}) {
    Seq2SeqTransformer gated(small_model(1), ExpertConfig{1, mode, 1}, 5);
    const auto y = gated.forward(b, {});
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.values()[i], ref.values()[i]) << enum_name(mode);
  }
}

TEST(Transformer, DecoderIsCausal) {
  Seq2SeqTransformer model(small_model(2), ExpertConfig{1, RoutingMode::kThorStochastic, 1}, 1);
  randomize(model, 6, 0.3);
  Batch b = sample_batch();
  const auto before = model.forward(b, {});
  b.target_in[2] = 9;  // row 0, position 2
  const auto after = model.forward(b, {});
  const std::size_t V = 11;
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t j = 0; j < V; ++j) EXPECT_EQ(before.at(t, j), after.at(t, j)) << "position " << t;
  double change = 0.0;
  for (std::size_t j = 0; j < V; ++j) change += std::abs(before.at(2, j) - after.at(2, j));
  EXPECT_GT(change, 1e-6);
}

TEST(Transformer, PaddingDoesNotLeakIntoRealPositions) {
  Seq2SeqTransformer model(small_model(2), ExpertConfig{1, RoutingMode::kThorStochastic, 1}, 1);
  randomize(model, 7, 0.3);
  const std::vector<Example> one = {{{8, 5}, {9, 4}}};
  const std::vector<std::size_t> idx0 = {0};
  const Batch alone = make_batch(one, idx0);
  const Batch padded = sample_batch();  // row 1 is the same example, padded to longer lengths
  const auto a = model.forward(alone, {});
  const auto p = model.forward(padded, {});
  const std::size_t V = 11;
  for (std::size_t t = 0; t < alone.tgt_len; ++t)
    for (std::size_t j = 0; j < V; ++j)
      EXPECT_NEAR(a.at(t, j), p.at(padded.tgt_len + t, j), 1e-12) << "position " << t;
}

TEST(Transformer, RejectsOverlongAndInvalidInput) {
  Seq2SeqTransformer model(small_model(1), ExpertConfig{1, RoutingMode::kThorStochastic, 1}, 1);
  const std::vector<int> ids(11, 4);
  const std::vector<std::uint8_t> pad(11, 0);
  EXPECT_THROW(model.encode(ids, 1, 11, pad, {}), ValidationError);
  const std::vector<int> bad = {4, 99};
  const std::vector<std::uint8_t> pad2(2, 0);
  EXPECT_THROW(model.encode(bad, 1, 2, pad2, {}), ValidationError);
  EXPECT_THROW(model.encode(bad, 2, 2, {}, {}), ShapeError);
}

TEST(Transformer, ParameterNamesAreUniqueAndStable) {
  Seq2SeqTransformer a(small_model(2), ExpertConfig{3, RoutingMode::kSwitchToken, 1}, 1);
  Seq2SeqTransformer b(small_model(2), ExpertConfig{3, RoutingMode::kSwitchToken, 1}, 1);
  const auto pa = a.parameters(), pb = b.parameters();
  std::set<std::string> names;
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(names.insert(pa[i].first).second) << pa[i].first;
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_EQ(std::vector<double>(pa[i].second.values().begin(), pa[i].second.values().end()),
              std::vector<double>(pb[i].second.values().begin(), pb[i].second.values().end()));
  }
}

TEST(Transformer, GateDoesNotPerturbSharedParameters) {
  Seq2SeqTransformer gated(small_model(1), ExpertConfig{2, RoutingMode::kSwitchToken, 1}, 1);
  Seq2SeqTransformer gateless(small_model(1), ExpertConfig{2, RoutingMode::kThorStochastic, 1}, 1);
  std::map<std::string, std::vector<double>> plain;
  for (const auto& [n, t] : gateless.parameters()) plain[n] = {t.values().begin(), t.values().end()};
  for (const auto& [n, t] : gated.parameters()) {
    if (n.ends_with(".gate")) continue;
    EXPECT_EQ(plain.at(n), std::vector<double>(t.values().begin(), t.values().end())) << n;
  }
}

}  // namespace
}  // namespace thor
