// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <vector>

#include "gradcheck.hpp"
#include "thor/experts.hpp"

namespace thor {
namespace {

using testing::grad_check;
using testing::random_parameter;

ModelConfig dims(std::size_t d = 8, std::size_t dff = 16) {
  ModelConfig m;
  m.d_model = d;
  m.d_ff = dff;
  return m;
}

ExpertLayer make_layer(std::size_t n, RoutingMode mode, std::size_t k = 1, std::uint64_t seed = 3) {
  ExpertLayer layer("layer", 0, dims(), ExpertConfig{n, mode, k}, seed);
  // Default init is tiny; widen it so outputs differ visibly between experts.
  Rng rng(seed + 100);
  for (auto& e : layer.mutable_experts()) {
    for (Tensor* t : {&e.w1, &e.b1, &e.w2, &e.b2})
      for (auto& v : t->data()) v = 0.5 * rng.normal();
  }
  return layer;
}

// relu(x W1 + b1) W2 + b2 with plain loops.
std::vector<double> ffn_oracle(const ExpertFFN& e, std::span<const double> x, std::size_t rows) {
  const std::size_t d = e.w1.dim(0), f = e.w1.dim(1);
  std::vector<double> out(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> h(f);
    for (std::size_t j = 0; j < f; ++j) {
      double s = e.b1.values()[j];
      for (std::size_t i = 0; i < d; ++i) s += x[r * d + i] * e.w1.values()[i * f + j];
      h[j] = std::max(0.0, s);
    }
    for (std::size_t i = 0; i < d; ++i) {
      double s = e.b2.values()[i];
      for (std::size_t j = 0; j < f; ++j) s += h[j] * e.w2.values()[j * d + i];
      out[r * d + i] = s;
    }
  }
  return out;
}

SentenceLayout flat_layout(std::size_t batch, std::size_t len) { return {batch, len, {}}; }

TEST(GateScores, ZeroGateIsUniform) {
  const auto x = random_parameter({5, 8}, 1);
  const auto g = gate_scores(x, Tensor::zeros({4, 8}));
  for (double v : g.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(GateScores, SingleExpertGetsOne) {
  const auto g = gate_scores(random_parameter({6, 8}, 2), random_parameter({1, 8}, 3));
  for (double v : g.values()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(GateScores, MatchesDirectSoftmaxOracle) {
  const auto x = random_parameter({4, 8}, 4);
  const auto w = random_parameter({3, 8}, 5);
  const auto g = gate_scores(x, w);
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> logits(3);
    for (std::size_t e = 0; e < 3; ++e)
      for (std::size_t i = 0; i < 8; ++i) logits[e] += x.at(r, i) * w.at(e, i);
    double z = 0.0;
    for (double l : logits) z += std::exp(l);
    for (std::size_t e = 0; e < 3; ++e) EXPECT_NEAR(g.at(r, e), std::exp(logits[e]) / z, 1e-12);
  }
}

TEST(GateScores, MissingGateIsAnError) {
  EXPECT_THROW(gate_scores(random_parameter({2, 8}, 1), std::nullopt), RoutingError);
}

TEST(TopK, SingleExpertSingleChoiceIsBitIdentical) {
  auto layer = make_layer(1, RoutingMode::kGatedTopK, 1);
  const auto x = random_parameter({6, 8}, 7);
  RoutingState state;
  const auto y = layer.forward(x, flat_layout(2, 3), Tensor(), UseLayerRouting{}, state);
  const auto direct = layer.experts()[0].forward(x);
  ASSERT_EQ(y.numel(), direct.numel());
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.values()[i], direct.values()[i]);
}

TEST(TopK, ZeroGateWithAllExpertsIsEvenMixture) {
  auto layer = make_layer(2, RoutingMode::kGatedTopK, 2);
  auto gate = *layer.gate();
  for (auto& v : gate.data()) v = 0.0;
  const auto x = random_parameter({6, 8}, 8);
  RoutingState state;
  const auto y = layer.forward(x, flat_layout(2, 3), Tensor(), UseLayerRouting{}, state);
  const auto e0 = ffn_oracle(layer.experts()[0], x.values(), 6);
  const auto e1 = ffn_oracle(layer.experts()[1], x.values(), 6);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.values()[i], 0.5 * e0[i] + 0.5 * e1[i], 1e-12);
}

TEST(TopK, TopOneScalesByItsGateValue) {
  auto layer = make_layer(2, RoutingMode::kGatedTopK, 1);
  const auto x = random_parameter({3, 8}, 9);
  const auto gates = Tensor::constant({3, 2}, {0.7, 0.3, 0.7, 0.3, 0.7, 0.3});
  const auto r = combine_top_k(layer.experts(), x, gates, 1);
  const auto e0 = ffn_oracle(layer.experts()[0], x.values(), 3);
  for (std::size_t i = 0; i < r.output.numel(); ++i) EXPECT_NEAR(r.output.values()[i], 0.7 * e0[i], 1e-12);
  EXPECT_EQ(r.top1, (std::vector<std::size_t>{0, 0, 0}));
}

TEST(TopK, GradientsReachGateAndExperts) {
  auto layer = make_layer(3, RoutingMode::kGatedTopK, 2);
  const auto x = random_parameter({4, 8}, 10);
  auto gate = *layer.gate();
  for (auto& v : gate.data()) v *= 50.0;  // keep top-k selection stable under perturbation
  const auto& e = layer.experts()[1];
  auto loss = [&] {
    const auto g = gate_scores(x, gate);
    const auto out = combine_top_k(layer.experts(), x, g, 2).output;
    return ad::sum(ad::mul(out, out));
  };
  const auto r = grad_check(loss, {x, gate, e.w1, e.b2});
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

TEST(TopK, RejectsInvalidK) {
  auto layer = make_layer(2, RoutingMode::kGatedTopK, 1);
  const auto x = random_parameter({2, 8}, 1);
  const auto g = Tensor::constant({2, 2}, {0.5, 0.5, 0.5, 0.5});
  EXPECT_THROW(combine_top_k(layer.experts(), x, g, 0), RoutingError);
  EXPECT_THROW(combine_top_k(layer.experts(), x, g, 3), RoutingError);
}

TEST(TieBreak, LowerIndexWins) {
  const std::vector<double> row = {0.5, 0.5};
  EXPECT_EQ(argmax_row(row), 0u);
  const std::vector<double> three = {0.2, 0.4, 0.4};
  EXPECT_EQ(top_k_indices(three, 2), (std::vector<std::size_t>{1, 2}));
}

TEST(SwitchRoute, SingleExpertTakesEverything) {
  auto layer = make_layer(1, RoutingMode::kSwitchToken);
  std::vector<RoutingFragment> frags;
  RoutingState state;
  state.telemetry = &frags;
  layer.forward(random_parameter({6, 8}, 2), flat_layout(2, 3), Tensor(), UseLayerRouting{}, state);
  const auto t = record_telemetry(frags, 1);
  EXPECT_EQ(t.loads, (std::vector<double>{1.0}));
  ASSERT_TRUE(t.confidences[0].has_value());
  EXPECT_DOUBLE_EQ(*t.confidences[0], 1.0);
}

TEST(SwitchRoute, TokenRoutingScalesOutputByGate) {
  auto layer = make_layer(2, RoutingMode::kSwitchToken);
  const auto x = random_parameter({4, 8}, 3);
  RoutingState state;
  const auto y = layer.forward(x, flat_layout(1, 4), Tensor(), UseLayerRouting{}, state);
  const auto g = gate_scores(x, layer.gate());
  for (std::size_t r = 0; r < 4; ++r) {
    const std::size_t e = g.at(r, 0) >= g.at(r, 1) ? 0 : 1;
    const auto ref = ffn_oracle(layer.experts()[e], x.values().subspan(r * 8, 8), 1);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(y.at(r, i), g.at(r, e) * ref[i], 1e-12);
  }
}

TEST(SwitchRoute, SentenceRoutingSendsWholeSentenceToOneExpert) {
  auto layer = make_layer(2, RoutingMode::kSwitchSentence);
  auto gate = *layer.gate();
  for (auto& v : gate.data()) v *= 100.0;
  const auto x = random_parameter({12, 8}, 4);
  std::vector<RoutingFragment> frags;
  RoutingState state;
  state.telemetry = &frags;
  const auto y = layer.forward(x, flat_layout(3, 4), Tensor(), UseLayerRouting{}, state);
  // Each sentence's rows equal exactly one expert's (gate-scaled) output.
  const auto sent = ad::matmul(sentence_mean_matrix(flat_layout(3, 4)), x);
  const auto g = gate_scores(sent, gate);
  for (std::size_t b = 0; b < 3; ++b) {
    const std::size_t e = argmax_row(g.values().subspan(b * 2, 2));
    const auto ref = ffn_oracle(layer.experts()[e], x.values().subspan(b * 32, 32), 4);
    for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(y.values()[b * 32 + i], g.at(b, e) * ref[i], 1e-12);
  }
  ASSERT_EQ(frags.size(), 1u);
  EXPECT_EQ(frags[0].counts[0] + frags[0].counts[1], 3u);
}

TEST(SwitchRoute, RandomLoadsAreNearUniform) {
  ExpertLayer layer("r", 0, dims(4, 4), ExpertConfig{2, RoutingMode::kSwitchRandom, 1}, 1);
  const std::size_t units = 100000;
  const auto x = Tensor::zeros({units, 4});
  Rng rng(11);
  std::vector<RoutingFragment> frags;
  RoutingState state;
  state.rng = &rng;
  state.telemetry = &frags;
  layer.forward(x, flat_layout(1, units), Tensor(), UseLayerRouting{}, state);
  const auto t = record_telemetry(frags, 1);
  // 4 sigma of a Binomial(1e5, 0.5) fraction is about 0.0063.
  EXPECT_NEAR(t.loads[0], 0.5, 0.01);
  EXPECT_NEAR(t.loads[1], 0.5, 0.01);
  EXPECT_FALSE(t.confidences[0].has_value());
}

TEST(SwitchRoute, RandomModeNeedsRng) {
  auto layer = make_layer(2, RoutingMode::kSwitchRandom);
  RoutingState state;
  EXPECT_THROW(layer.forward(random_parameter({2, 8}, 1), flat_layout(1, 2), Tensor(), UseLayerRouting{}, state),
               RoutingError);
}

TEST(SwitchRoute, PadRowsAreNotCounted) {
  auto layer = make_layer(2, RoutingMode::kSwitchToken);
  std::vector<RoutingFragment> frags;
  std::vector<Tensor> aux;
  RoutingState state;
  state.telemetry = &frags;
  state.aux_losses = &aux;
  SentenceLayout layout{2, 3, {0, 0, 1, 0, 1, 1}};
  layer.forward(random_parameter({6, 8}, 5), layout, Tensor(), UseLayerRouting{}, state);
  EXPECT_EQ(frags[0].counts[0] + frags[0].counts[1], 3u);
  EXPECT_EQ(aux.size(), 1u);
}

TEST(ThorSelect, PairOfTwoIsAPermutation) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto c = thor_select(rng, 3, 2, SelectCount::kPair);
    for (const auto& layer : c.layers) {
      ASSERT_EQ(layer.size(), 2u);
      EXPECT_EQ(layer[0] + layer[1], 1u);
    }
  }
}

TEST(ThorSelect, UnorderedPairsOfFourAreUniform) {
  Rng rng(2);
  const int draws = 100000;
  std::map<std::pair<std::size_t, std::size_t>, int> freq;
  for (int i = 0; i < draws; ++i) {
    const auto c = thor_select(rng, 1, 4, SelectCount::kPair);
    const auto a = c.layers[0][0], b = c.layers[0][1];
    ASSERT_NE(a, b);
    ++freq[{std::min(a, b), std::max(a, b)}];
  }
  ASSERT_EQ(freq.size(), 6u);
  for (const auto& [pair, n] : freq) EXPECT_NEAR(static_cast<double>(n) / draws, 1.0 / 6.0, 0.01);
}

TEST(ThorSelect, SingleExpertCases) {
  Rng rng(3);
  EXPECT_EQ(thor_select(rng, 2, 1, SelectCount::kOne).layers, (std::vector<std::vector<std::size_t>>{{0}, {0}}));
  EXPECT_EQ(thor_select(rng, 1, 1, SelectCount::kPair).layers[0], (std::vector<std::size_t>{0, 0}));
  EXPECT_EQ(thor_select(rng, 1, 3, SelectCount::kAll).layers[0], (std::vector<std::size_t>{0, 1, 2}));
}

TEST(LoadBalancing, UniformRoutingGivesOne) {
  const auto gates = Tensor::constant({4, 2}, std::vector<double>(8, 0.5));
  const std::vector<std::size_t> assign = {0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(load_balancing_loss(assign, gates).item(), 1.0);
}

TEST(LoadBalancing, CollapseGivesN) {
  const auto gates = Tensor::constant({3, 2}, {1, 0, 1, 0, 1, 0});
  const std::vector<std::size_t> assign = {0, 0, 0};
  EXPECT_DOUBLE_EQ(load_balancing_loss(assign, gates).item(), 2.0);
}

TEST(LoadBalancing, MatchesDirectSummation) {
  const auto x = random_parameter({9, 8}, 12);
  const auto gates = gate_scores(x, random_parameter({2, 8}, 13));
  Rng rng(14);
  std::vector<std::size_t> assign(9);
  for (auto& a : assign) a = rng.uniform_index(2);
  double oracle = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    double f = 0.0, p = 0.0;
    for (std::size_t r = 0; r < 9; ++r) {
      f += assign[r] == i ? 1.0 : 0.0;
      p += gates.at(r, i);
    }
    oracle += (f / 9.0) * (p / 9.0);
  }
  EXPECT_NEAR(load_balancing_loss(assign, gates).item(), 2.0 * oracle, 1e-12);
}

TEST(LoadBalancing, GradientFlowsThroughGateProbabilities) {
  const auto x = random_parameter({5, 8}, 15);
  const auto w = random_parameter({3, 8}, 16);
  const std::vector<std::size_t> assign = {0, 2, 2, 1, 0};
  const auto r = grad_check([&] { return load_balancing_loss(assign, gate_scores(x, w)); }, {x, w});
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

TEST(LoadBalancing, ExcludedRowsDoNotCount) {
  const auto gates = Tensor::constant({3, 2}, {0.5, 0.5, 0.5, 0.5, 1.0, 0.0});
  const std::vector<std::size_t> assign = {0, 1, 0};
  const std::vector<std::uint8_t> include = {1, 1, 0};
  EXPECT_DOUBLE_EQ(load_balancing_loss(assign, gates, include).item(), 1.0);
}

TEST(LoadBalancing, GatelessIsAnError) {
  const std::vector<std::size_t> assign = {0};
  EXPECT_THROW(load_balancing_loss(assign, Tensor()), RoutingError);
}

TEST(Telemetry, AllUnitsToOneExpert) {
  RoutingFragment f(0, 2, true);
  for (int i = 0; i < 4; ++i) f.add(1, 0.9);
  const std::vector<RoutingFragment> frags = {f};
  const auto t = record_telemetry(frags, 10);
  EXPECT_EQ(t.loads, (std::vector<double>{0.0, 1.0}));
  EXPECT_FALSE(t.confidences[0].has_value());
  EXPECT_DOUBLE_EQ(*t.confidences[1], 0.9);
}

TEST(Telemetry, HandTallyOfEightUnits) {
  RoutingFragment a(1, 2, true), b(1, 2, true);
  a.add(0, 0.6);
  a.add(1, 0.7);
  a.add(1, 0.9);
  a.add(0, 0.8);
  a.add(1, 0.5);
  b.add(1, 0.6);
  b.add(1, 1.0);
  b.add(0, 0.7);
  const std::vector<RoutingFragment> frags = {a, b};
  const auto t = record_telemetry(frags, 50);
  EXPECT_EQ(t.layer, 1u);
  EXPECT_DOUBLE_EQ(t.loads[0], 3.0 / 8.0);
  EXPECT_DOUBLE_EQ(t.loads[1], 5.0 / 8.0);
  EXPECT_NEAR(*t.confidences[0], 2.1 / 3.0, 1e-12);
  EXPECT_NEAR(*t.confidences[1], 3.7 / 5.0, 1e-12);
}

TEST(Telemetry, UniformGateGivesHalfConfidence) {
  auto layer = make_layer(2, RoutingMode::kSwitchToken);
  auto gate = *layer.gate();
  for (auto& v : gate.data()) v = 0.0;
  std::vector<RoutingFragment> frags;
  RoutingState state;
  state.telemetry = &frags;
  layer.forward(random_parameter({4, 8}, 1), flat_layout(1, 4), Tensor(), UseLayerRouting{}, state);
  const auto t = record_telemetry(frags, 1);
  EXPECT_DOUBLE_EQ(*t.confidences[0], 0.5);
}

TEST(Telemetry, RejectsEmptyAndMixedIntervals) {
  EXPECT_THROW(record_telemetry({}, 1), ValidationError);
  RoutingFragment a(0, 2, false), b(1, 2, false);
  a.add(0);
  b.add(1);
  const std::vector<RoutingFragment> frags = {a, b};
  EXPECT_THROW(record_telemetry(frags, 1), ValidationError);
}

TEST(Flops, DispatchCostIsIndependentOfExpertCount) {
  const auto x = random_parameter({10, 8}, 20);
  std::vector<std::uint64_t> totals;
  for (std::size_t n : {1u, 2u, 4u, 8u}) {
    ExpertLayer layer("f", 0, dims(), ExpertConfig{n, RoutingMode::kThorStochastic, 1}, 1);
    std::vector<std::size_t> assign(10);
    for (std::size_t r = 0; r < 10; ++r) assign[r] = r % n;
    ad::FlopCounter c;
    {
      ad::FlopCounting counting(c);
      RoutingState state;
      layer.forward(x, flat_layout(2, 5), Tensor(), PerRowExperts{assign}, state);
    }
    totals.push_back(c[ad::FlopCategory::kExpert]);
    EXPECT_EQ(c.total(), c[ad::FlopCategory::kExpert]) << "n=" << n;
  }
  for (auto t : totals) EXPECT_EQ(t, totals[0]);
}

TEST(Flops, EnsembleExpertCostIsExactlyNTimes) {
  const auto x = random_parameter({10, 8}, 21);
  for (std::size_t n : {1u, 2u, 4u, 8u}) {
    ExpertLayer layer("f", 0, dims(), ExpertConfig{n, RoutingMode::kThorStochastic, 1}, 1);
    ad::FlopCounter single, ensemble;
    RoutingState state;
    {
      ad::FlopCounting counting(single);
      layer.forward(x, flat_layout(2, 5), Tensor(), FixedExpert{0}, state);
    }
    {
      ad::FlopCounting counting(ensemble);
      layer.forward(x, flat_layout(2, 5), Tensor(), EnsembleExperts{}, state);
    }
    EXPECT_EQ(ensemble[ad::FlopCategory::kExpert], n * single[ad::FlopCategory::kExpert]);
  }
}

}  // namespace
}  // namespace thor
