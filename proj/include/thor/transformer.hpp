// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "thor/config.hpp"
#include "thor/errors.hpp"
#include "thor/experts.hpp"
#include "thor/ops.hpp"
#include "thor/tasks.hpp"
#include "thor/tensor.hpp"

namespace thor {

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  static Linear create(const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed) {
    return {init_normal(name + ".weight", {in, out}, 0.02, seed), init_constant({out}, 0.0)};
  }
  Tensor operator()(const Tensor& x) const { return ad::add_bias(ad::matmul(x, weight), bias); }
  void collect(const std::string& name, std::vector<NamedTensor>& out) const {
    out.emplace_back(name + ".weight", weight);
    out.emplace_back(name + ".bias", bias);
  }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm create(std::size_t d) { return {init_constant({d}, 1.0), init_constant({d}, 0.0)}; }
  Tensor operator()(const Tensor& x) const { return ad::layer_norm(x, gain, bias); }
  void collect(const std::string& name, std::vector<NamedTensor>& out) const {
    out.emplace_back(name + ".gain", gain);
    out.emplace_back(name + ".bias", bias);
  }
};

struct AttentionBlock {
  Linear query, key, value, output;

  static AttentionBlock create(const std::string& name, std::size_t d, std::uint64_t seed) {
    return {Linear::create(name + ".query", d, d, seed), Linear::create(name + ".key", d, d, seed),
            Linear::create(name + ".value", d, d, seed), Linear::create(name + ".output", d, d, seed)};
  }
  void collect(const std::string& name, std::vector<NamedTensor>& out) const {
    query.collect(name + ".query", out);
    key.collect(name + ".key", out);
    value.collect(name + ".value", out);
    output.collect(name + ".output", out);
  }
};

/// Sinusoidal position table, [len x d].
inline std::vector<double> sinusoidal_positions(std::size_t len, std::size_t d) {
  std::vector<double> table(len * d);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      table[pos * d + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return table;
}

/// Per-pass switches and sinks. Null pointers disable the corresponding feature.
struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;                               // dropout and random routing
  const RoutePlan* plan = nullptr;                  // null = each layer's own routing
  std::vector<RoutingFragment>* telemetry = nullptr;
  std::vector<Tensor>* aux_losses = nullptr;
};

/// Result of running the encoder over a batch of source sequences.
struct EncoderOutput {
  Tensor memory;               // [B*S x d]
  SentenceLayout layout;       // source rows
  Tensor sentence_summary;     // [B x d] masked mean of memory
};

/// Pre-LN encoder-decoder transformer whose every FFN sublayer is an ExpertLayer.
class Seq2SeqTransformer {
 public:
  Seq2SeqTransformer(const ModelConfig& model, const ExpertConfig& experts, std::uint64_t seed)
      : model_(model), experts_(experts) {
    if (model.n_heads * model.d_head != model.d_model) {
      throw ConfigError("model.d_head", "n_heads * d_head must equal d_model");
    }
    const std::size_t d = model.d_model;
    src_embed_ = init_normal("src_embed", {model.vocab_src, d}, 1.0 / std::sqrt(static_cast<double>(d)), seed);
    tgt_embed_ = init_normal("tgt_embed", {model.vocab_tgt, d}, 1.0 / std::sqrt(static_cast<double>(d)), seed);
    for (std::size_t l = 0; l < model.n_enc_layers; ++l) {
      const std::string p = "encoder." + std::to_string(l);
      enc_.push_back({LayerNorm::create(d), AttentionBlock::create(p + ".self_attn", d, seed), LayerNorm::create(d),
                      ExpertLayer(p + ".ffn", l, model, experts, seed)});
    }
    for (std::size_t l = 0; l < model.n_dec_layers; ++l) {
      const std::string p = "decoder." + std::to_string(l);
      dec_.push_back({LayerNorm::create(d), AttentionBlock::create(p + ".self_attn", d, seed), LayerNorm::create(d),
                      AttentionBlock::create(p + ".cross_attn", d, seed), LayerNorm::create(d),
                      ExpertLayer(p + ".ffn", model.n_enc_layers + l, model, experts, seed)});
    }
    enc_norm_ = LayerNorm::create(d);
    dec_norm_ = LayerNorm::create(d);
    positions_ = sinusoidal_positions(model.max_seq_len, d);
  }

  const ModelConfig& model_config() const { return model_; }
  const ExpertConfig& expert_config() const { return experts_; }
  std::size_t num_expert_layers() const { return enc_.size() + dec_.size(); }

  /// Expert layer by global index (encoder layers first).
  const ExpertLayer& expert_layer(std::size_t i) const {
    return i < enc_.size() ? enc_.at(i).ffn : dec_.at(i - enc_.size()).ffn;
  }

  /// Every trainable tensor with a stable, unique name, in a fixed order.
  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    out.emplace_back("src_embed", src_embed_);
    out.emplace_back("tgt_embed", tgt_embed_);
    for (std::size_t l = 0; l < enc_.size(); ++l) {
      const std::string p = "encoder." + std::to_string(l);
      const auto& L = enc_[l];
      L.norm_attn.collect(p + ".norm_attn", out);
      L.self_attn.collect(p + ".self_attn", out);
      L.norm_ffn.collect(p + ".norm_ffn", out);
      L.ffn.collect(out);
    }
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      const std::string p = "decoder." + std::to_string(l);
      const auto& L = dec_[l];
      L.norm_self.collect(p + ".norm_self", out);
      L.self_attn.collect(p + ".self_attn", out);
      L.norm_cross.collect(p + ".norm_cross", out);
      L.cross_attn.collect(p + ".cross_attn", out);
      L.norm_ffn.collect(p + ".norm_ffn", out);
      L.ffn.collect(out);
    }
    enc_norm_.collect("encoder.norm", out);
    dec_norm_.collect("decoder.norm", out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }

  /// `ids` is [batch x len] row-major; `pad` marks padded slots with 1.
  EncoderOutput encode(std::span<const int> ids, std::size_t batch, std::size_t len, std::span<const std::uint8_t> pad,
                       const ForwardOptions& opts) const {
    check_grid(ids, batch, len, "source");
    SentenceLayout layout{batch, len, std::vector<std::uint8_t>(pad.begin(), pad.end())};
    Tensor x = embed(src_embed_, ids, batch, len);
    ad::AttentionMask mask{batch, len, len, key_valid(pad, batch * len), false};
    RoutingState state = routing_state(opts);
    for (std::size_t l = 0; l < enc_.size(); ++l) {
      const auto& L = enc_[l];
      x = ad::add(x, attend(L.self_attn, L.norm_attn(x), Tensor(), mask, opts));
      Tensor h = L.ffn.forward(L.norm_ffn(x), layout, Tensor(), directive(l, opts), state);
      x = ad::add(x, residual_dropout(h, opts));
    }
    EncoderOutput out;
    out.memory = enc_norm_(x);
    out.layout = std::move(layout);
    {
      ad::FlopScope scope(ad::FlopCategory::kGate);
      if (experts_.mode == RoutingMode::kSwitchSentence) {
        out.sentence_summary = ad::matmul(sentence_mean_matrix(out.layout), out.memory);
      }
    }
    return out;
  }

  /// Logits [batch*len x vocab_tgt] for every target prefix position.
  Tensor decode(const EncoderOutput& enc, std::span<const int> ids, std::size_t batch, std::size_t len,
                std::span<const std::uint8_t> pad, const ForwardOptions& opts) const {
    check_grid(ids, batch, len, "target");
    if (batch != enc.layout.batch) throw ShapeError("decode: batch differs from the encoded batch");
    SentenceLayout layout{batch, len, std::vector<std::uint8_t>(pad.begin(), pad.end())};
    Tensor x = embed(tgt_embed_, ids, batch, len);
    ad::AttentionMask self_mask{batch, len, len, {}, true};
    ad::AttentionMask cross_mask{batch, len, enc.layout.len, key_valid(enc.layout.pad, batch * enc.layout.len), false};
    RoutingState state = routing_state(opts);
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      const auto& L = dec_[l];
      x = ad::add(x, attend(L.self_attn, L.norm_self(x), Tensor(), self_mask, opts));
      x = ad::add(x, attend(L.cross_attn, L.norm_cross(x), enc.memory, cross_mask, opts));
      Tensor h = L.ffn.forward(L.norm_ffn(x), layout, enc.sentence_summary, directive(enc_.size() + l, opts), state);
      x = ad::add(x, residual_dropout(h, opts));
    }
    Tensor logits;
    {
      ad::FlopScope scope(ad::FlopCategory::kOther);
      logits = ad::matmul_nt(dec_norm_(x), tgt_embed_);
    }
    return logits;
  }

  /// Teacher-forced logits for a batch.
  Tensor forward(const Batch& b, const ForwardOptions& opts) const {
    auto enc = encode(b.source, b.size, b.src_len, b.source_pad, opts);
    return decode(enc, b.target_in, b.size, b.tgt_len, b.target_pad, opts);
  }

 private:
  struct EncoderLayer {
    LayerNorm norm_attn;
    AttentionBlock self_attn;
    LayerNorm norm_ffn;
    ExpertLayer ffn;
  };
  struct DecoderLayer {
    LayerNorm norm_self;
    AttentionBlock self_attn;
    LayerNorm norm_cross;
    AttentionBlock cross_attn;
    LayerNorm norm_ffn;
    ExpertLayer ffn;
  };

  void check_grid(std::span<const int> ids, std::size_t batch, std::size_t len, const char* what) const {
    if (batch == 0 || len == 0) throw ValidationError(std::string(what) + " batch is empty");
    if (ids.size() != batch * len) throw ShapeError(std::string(what) + " ids do not form a batch x len grid");
    if (len > model_.max_seq_len) {
      throw ValidationError(std::string(what) + " length " + std::to_string(len) + " exceeds max_seq_len " +
                            std::to_string(model_.max_seq_len));
    }
  }

  static std::vector<std::uint8_t> key_valid(std::span<const std::uint8_t> pad, std::size_t n) {
    if (pad.empty()) return {};
    if (pad.size() != n) throw ShapeError("pad mask size differs from the id grid");
    std::vector<std::uint8_t> valid(n);
    for (std::size_t i = 0; i < n; ++i) valid[i] = pad[i] ? 0 : 1;
    return valid;
  }

  Tensor embed(const Tensor& table, std::span<const int> ids, std::size_t batch, std::size_t len) const {
    ad::FlopScope scope(ad::FlopCategory::kOther);
    const std::size_t d = model_.d_model;
    std::vector<double> pos(batch * len * d);
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(positions_.begin(), len * d, pos.begin() + static_cast<std::ptrdiff_t>(b * len * d));
    Tensor x = ad::scale(ad::embedding(table, ids), std::sqrt(static_cast<double>(d)));
    return ad::add(x, Tensor::constant({batch * len, d}, std::move(pos)));
  }

  Tensor attend(const AttentionBlock& block, const Tensor& x, const Tensor& memory, const ad::AttentionMask& mask,
                const ForwardOptions& opts) const {
    ad::FlopScope scope(ad::FlopCategory::kAttention);
    const Tensor& kv = memory.defined() ? memory : x;
    const double rate = opts.training ? model_.dropout_rate : 0.0;
    Tensor ctx = ad::scaled_dot_product_attention(block.query(x), block.key(kv), block.value(kv), model_.n_heads, mask,
                                                  rate, opts.training ? opts.rng : nullptr);
    return block.output(ctx);
  }

  Tensor residual_dropout(const Tensor& h, const ForwardOptions& opts) const {
    if (!opts.training || model_.dropout_rate == 0.0 || opts.rng == nullptr) return h;
    return ad::dropout(h, model_.dropout_rate, *opts.rng);
  }

  static RoutingState routing_state(const ForwardOptions& opts) {
    return RoutingState{opts.training, opts.rng, opts.telemetry, opts.aux_losses};
  }

  RouteDirective directive(std::size_t layer, const ForwardOptions& opts) const {
    if (opts.plan == nullptr || opts.plan->empty()) return UseLayerRouting{};
    if (opts.plan->size() != num_expert_layers()) throw RoutingError("route plan must cover every expert layer");
    return (*opts.plan)[layer];
  }

  ModelConfig model_;
  ExpertConfig experts_;
  Tensor src_embed_;
  Tensor tgt_embed_;
  std::vector<EncoderLayer> enc_;
  std::vector<DecoderLayer> dec_;
  LayerNorm enc_norm_;
  LayerNorm dec_norm_;
  std::vector<double> positions_;
};

}  // namespace thor
