// SPDX-License-Identifier: Apache-2.0
#pragma once

// Factorized Multimodal Transformer.
//
//   batch ──embed──▶ x̂⁰ ──MTL×K──▶ x̂ᴷ ──GRU over t──▶ h_T ──affine──▶ ŷ
//
// Each MTL runs U factorized self-attention units (FMS) on its input. An FMS
// holds one attention per factor f (a modality subset); attention f sees only
// the embedding slices of its member modalities, over every timestep. The
// per-factor outputs are regrouped by modality and collapsed by a small conv
// net S1 that slides along the modality's feature axis with one input channel
// per factor containing it. After a shared position-wise FFN (residual, norm)
// per unit, S2 collapses the U unit outputs the same way.
//
// Tensors are laid out [B × T × e]. Summarization inputs are stacked
// channels-first, [C × B × T × e_M], which is exactly conv1d's layout.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fmtlab/config.hpp"
#include "fmtlab/data.hpp"
#include "fmtlab/error.hpp"
#include "fmtlab/factor.hpp"
#include "fmtlab/ops.hpp"
#include "fmtlab/parameter.hpp"
#include "fmtlab/tensor.hpp"

namespace fmtlab {

// Receives every attention-weight tensor [B × T × T] with its key mask.
using AttentionObserver = std::function<void(const Tensor& weights, std::span<const std::uint8_t> keep)>;

namespace detail {
inline thread_local std::size_t attention_calls = 0;
inline thread_local const AttentionObserver* attention_observer = nullptr;

inline void record_attention(const Tensor& weights, std::span<const std::uint8_t> keep) {
  ++attention_calls;
  if (attention_observer) (*attention_observer)(weights, keep);
}
}  // namespace detail

// Number of attentions evaluated on this thread since the last reset.
inline std::size_t attention_count() { return detail::attention_calls; }
inline void reset_attention_count() { detail::attention_calls = 0; }

// Installs an observer on this thread for the lifetime of the scope.
class AttentionObserverScope {
 public:
  explicit AttentionObserverScope(const AttentionObserver& observer)
      : saved_(detail::attention_observer) {
    detail::attention_observer = &observer;
  }
  ~AttentionObserverScope() { detail::attention_observer = saved_; }
  AttentionObserverScope(const AttentionObserverScope&) = delete;
  AttentionObserverScope& operator=(const AttentionObserverScope&) = delete;

 private:
  const AttentionObserver* saved_;
};

struct Affine {
  Tensor weight;               // [in × out]
  std::optional<Tensor> bias;  // [out]

  Tensor operator()(const Tensor& x) const {
    auto y = matmul(x, weight);
    return bias ? add_bias(y, *bias) : y;
  }
};

inline Affine make_affine(ParameterStore& store, const std::string& prefix, std::size_t in,
                          std::size_t out, std::mt19937_64& rng, const std::string& weight_name = "W",
                          const std::optional<std::string>& bias_name = std::string("b")) {
  Affine a;
  a.weight = store.add_uniform(prefix + weight_name, {in, out}, in, rng);
  if (bias_name) a.bias = store.add_constant(prefix + *bias_name, {out}, 0.0);
  return a;
}

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

inline LayerNormParams make_layer_norm(ParameterStore& store, const std::string& prefix,
                                       std::size_t width) {
  return {store.add_constant(prefix + "gain", {width}, 1.0),
          store.add_constant(prefix + "bias", {width}, 0.0)};
}

// Which modalities enter the model and where their embedding slice lives.
struct ModalityLayout {
  std::vector<std::size_t> active;   // modality indices, ascending
  std::vector<std::size_t> offset;   // by modality index; valid for active ones
  std::vector<std::size_t> width;    // by modality index (e_M)
  std::size_t total = 0;             // e_x

  static ModalityLayout from(const ModelConfig& c) {
    ModalityLayout l;
    l.active = c.active_modalities();
    l.offset.assign(c.modalities.size(), 0);
    l.width.assign(c.modalities.size(), 0);
    for (auto m : l.active) {
      l.offset[m] = l.total;
      l.width[m] = c.modalities[m].embed_dim;
      l.total += l.width[m];
    }
    return l;
  }
};

// Conv stack collapsing a [C × ... × e] channel stack to [... × e]; or plain
// channel-wise addition in the additive ablation.
struct SummarizationNet {
  std::vector<Tensor> kernels;  // [C_out × C_in × k]
  std::vector<Tensor> biases;   // [C_out]
  bool additive = false;

  Tensor operator()(const Tensor& stacked) const {
    Shape out_shape(stacked.shape().begin() + 1, stacked.shape().end());
    if (additive) {
      const std::size_t c = stacked.dim(0);
      Tensor acc = select(stacked, 0, 0);
      for (std::size_t i = 1; i < c; ++i) acc = add(acc, select(stacked, 0, i));
      return acc;
    }
    Tensor h = stacked;
    for (std::size_t i = 0; i < kernels.size(); ++i) {
      h = conv1d(h, kernels[i], biases[i]);
      if (i + 1 < kernels.size()) h = relu(h);
    }
    return reshape(h, out_shape);
  }
};

inline SummarizationNet make_summarization(ParameterStore& store, const std::string& prefix,
                                           std::size_t in_channels,
                                           const SummarizationNetConfig& cfg, bool additive,
                                           std::mt19937_64& rng) {
  SummarizationNet net;
  net.additive = additive;
  if (additive) return net;
  std::size_t c_in = in_channels;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::string p = prefix + "conv" + std::to_string(i) + ".";
    const std::size_t k = cfg.kernels[i];
    net.kernels.push_back(store.add_uniform(p + "W", {cfg.channels[i], c_in, k}, c_in * k, rng));
    net.biases.push_back(store.add_constant(p + "b", {cfg.channels[i]}, 0.0));
    c_in = cfg.channels[i];
  }
  return net;
}

struct FactorAttention {
  Factor factor;
  std::vector<std::size_t> members;  // ascending modality indices
  std::size_t width = 0;             // e_f
  Affine query;                      // with bias
  Affine key;                        // no bias: a key offset cancels in softmax
  Affine value;                      // with bias
  LayerNormParams norm;
};

struct FmsUnit {
  std::vector<FactorAttention> attentions;  // one per factor, factor-set order
  std::vector<SummarizationNet> s1;         // one per active modality
};

struct FeedForward {
  Affine in;
  Affine out;
  Tensor operator()(const Tensor& x) const { return out(relu(in(x))); }
};

struct MtlLayer {
  std::vector<FmsUnit> units;
  FeedForward ffn;  // shared by all units and timesteps
  LayerNormParams ffn_norm;
  std::vector<SummarizationNet> s2;  // one per active modality
};

struct BaselineHead {
  Affine query, key, value;
};

struct BaselineLayer {
  std::vector<BaselineHead> heads;
  Affine mix;  // H·e_x → e_x
  LayerNormParams attn_norm;
  FeedForward ffn;
  LayerNormParams ffn_norm;
};

struct GruCell {
  Affine input_update, input_reset, input_candidate;  // e_x → h, with bias
  Tensor hidden_update, hidden_reset, hidden_candidate;  // h × h
};

struct ForwardOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout
};

// ---------------------------------------------------------------------------
// Building blocks

// Sinusoidal encoding, width `width`, at integer position `pos`.
inline void positional_row(double pos, std::size_t width, double* out) {
  for (std::size_t i = 0; i < width; ++i) {
    const double freq = std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
    out[i] = (i % 2 == 0) ? std::sin(pos / freq) : std::cos(pos / freq);
  }
}

// [B × T × width] encodings. With `relative`, position 0 is each sequence's
// first real step and padded steps get zeros.
inline Tensor positional_encoding(std::size_t batch, std::size_t seq_len, std::size_t width,
                                  std::span<const std::uint8_t> mask, bool relative) {
  std::vector<double> pe(batch * seq_len * width, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t pad = 0;
    if (relative) {
      while (pad < seq_len && !mask[b * seq_len + pad]) ++pad;
    }
    for (std::size_t t = pad; t < seq_len; ++t) {
      positional_row(static_cast<double>(t - pad), width, pe.data() + (b * seq_len + t) * width);
    }
  }
  return Tensor({batch, seq_len, width}, std::move(pe));
}

// One factor's self-attention with full time receptive field.
// x: [B × T × e_x]; keep: [B × T] key mask or empty. Returns [B × T × e_f].
inline Tensor factor_attention(const Tensor& x, const FactorAttention& attn,
                               const ModalityLayout& layout, std::span<const std::uint8_t> keep) {
  const std::size_t B = x.dim(0);
  const std::size_t T = x.dim(1);
  if (!keep.empty()) {
    for (std::size_t b = 0; b < B; ++b) {
      bool any = false;
      for (std::size_t t = 0; t < T && !any; ++t) any = keep[b * T + t] != 0;
      if (!any) {
        throw NumericError("factor_attention: sequence " + std::to_string(b) +
                           " is entirely padding (degenerate sequence)");
      }
    }
  }
  std::vector<Tensor> parts;
  for (auto m : attn.members) parts.push_back(slice_lastdim(x, layout.offset[m], layout.width[m]));
  Tensor xf = parts.size() == 1 ? parts[0] : concat_lastdim(parts);

  Tensor q = attn.query(xf);
  Tensor k = attn.key(xf);
  Tensor v = attn.value(xf);
  Tensor scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(attn.width)));
  Tensor weights = masked_softmax(scores, keep);
  detail::record_attention(weights, keep);
  return attn.norm(add(matmul(weights, v), xf));
}

// One FMS unit: every factor attention, regrouped per modality through S1.
inline Tensor fms_forward(const Tensor& x, const FmsUnit& unit, const ModalityLayout& layout,
                          std::span<const std::uint8_t> keep) {
  std::vector<Tensor> outputs;
  outputs.reserve(unit.attentions.size());
  for (const auto& attn : unit.attentions) outputs.push_back(factor_attention(x, attn, layout, keep));

  std::vector<Tensor> per_modality;
  for (std::size_t a = 0; a < layout.active.size(); ++a) {
    const std::size_t m = layout.active[a];
    std::vector<Tensor> channels;
    for (std::size_t f = 0; f < unit.attentions.size(); ++f) {
      const auto& attn = unit.attentions[f];
      if (!attn.factor.contains(m)) continue;
      std::size_t local = 0;
      for (auto mm : attn.members) {
        if (mm == m) break;
        local += layout.width[mm];
      }
      channels.push_back(slice_lastdim(outputs[f], local, layout.width[m]));
    }
    if (channels.empty()) {
      throw ConfigError("modality " + std::to_string(m) + " is unreachable: it appears in no factor");
    }
    per_modality.push_back(unit.s1[a](stack_newdim(channels)));
  }
  return per_modality.size() == 1 ? per_modality[0] : concat_lastdim(per_modality);
}

// One MTL: U units → shared FFN + residual + norm → per-modality S2.
inline Tensor mtl_forward(const Tensor& x, const MtlLayer& layer, const ModalityLayout& layout,
                          std::span<const std::uint8_t> keep) {
  std::vector<Tensor> unit_outputs;
  for (const auto& unit : layer.units) {
    Tensor u = fms_forward(x, unit, layout, keep);
    unit_outputs.push_back(layer.ffn_norm(add(layer.ffn(u), u)));
  }
  std::vector<Tensor> per_modality;
  for (std::size_t a = 0; a < layout.active.size(); ++a) {
    const std::size_t m = layout.active[a];
    std::vector<Tensor> channels;
    for (const auto& u : unit_outputs) channels.push_back(slice_lastdim(u, layout.offset[m], layout.width[m]));
    per_modality.push_back(layer.s2[a](stack_newdim(channels)));
  }
  return per_modality.size() == 1 ? per_modality[0] : concat_lastdim(per_modality);
}

// Ordinary transformer layer with H full-receptive-field heads.
inline Tensor baseline_layer_forward(const Tensor& x, const BaselineLayer& layer,
                                     std::span<const std::uint8_t> keep) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(x.shape().back()));
  std::vector<Tensor> heads;
  for (const auto& h : layer.heads) {
    Tensor scores = scale(matmul(h.query(x), transpose_last2(h.key(x))), inv_sqrt);
    Tensor weights = masked_softmax(scores, keep);
    detail::record_attention(weights, keep);
    heads.push_back(matmul(weights, h.value(x)));
  }
  Tensor mixed = layer.mix(heads.size() == 1 ? heads[0] : concat_lastdim(heads));
  Tensor y = layer.attn_norm(add(mixed, x));
  return layer.ffn_norm(add(layer.ffn(y), y));
}

// h' = (1 - z) ⊙ h + z ⊙ tanh(x W_c + (r ⊙ h) U_c + b_c)
inline Tensor gru_step(const Tensor& h, const Tensor& x_t, const GruCell& cell) {
  Tensor z = sigmoid(add(cell.input_update(x_t), matmul(h, cell.hidden_update)));
  Tensor r = sigmoid(add(cell.input_reset(x_t), matmul(h, cell.hidden_reset)));
  Tensor c = tanh(add(cell.input_candidate(x_t), matmul(multiply(r, h), cell.hidden_candidate)));
  Tensor keep = add_scalar(scale(z, -1.0), 1.0);
  return add(multiply(keep, h), multiply(z, c));
}

// ---------------------------------------------------------------------------

class FmtModel {
 public:
  explicit FmtModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    layout_ = ModalityLayout::from(config_);
    build();
  }
  FmtModel(const FmtModel&) = delete;
  FmtModel& operator=(const FmtModel&) = delete;
  FmtModel(FmtModel&&) = default;
  FmtModel& operator=(FmtModel&&) = default;

  const ModelConfig& config() const { return config_; }
  const ModalityLayout& layout() const { return layout_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  const std::vector<MtlLayer>& mtl_layers() const { return mtl_; }
  std::vector<MtlLayer>& mtl_layers() { return mtl_; }
  const std::vector<BaselineLayer>& baseline_layers() const { return baseline_; }
  const GruCell& gru() const { return gru_; }
  const std::vector<Affine>& embeddings() const { return embed_; }

  // x̂⁰: per-modality affine + positional encoding, concatenated. [B × T × e_x]
  Tensor embed(const MultimodalBatch& batch) const {
    if (batch.inputs.size() != config_.modalities.size()) {
      throw DimensionError("batch has " + std::to_string(batch.inputs.size()) +
                           " modalities, model expects " + std::to_string(config_.modalities.size()));
    }
    const std::size_t B = batch.batch_size();
    const std::size_t T = batch.seq_len();
    std::vector<Tensor> parts;
    for (std::size_t a = 0; a < layout_.active.size(); ++a) {
      const std::size_t m = layout_.active[a];
      const auto& spec = config_.modalities[m];
      const Tensor& xm = batch.inputs[m];
      if (xm.rank() != 3 || xm.dim(2) != spec.input_dim || xm.dim(0) != B || xm.dim(1) != T) {
        throw DimensionError("modality " + spec.name + ": input " + shape_str(xm.shape()) +
                             " does not match expected feature dim " + std::to_string(spec.input_dim));
      }
      Tensor e = embed_[a](xm);
      if (config_.positional_encoding) {
        e = add(e, positional_encoding(B, T, spec.embed_dim, batch.mask, config_.mask_padding));
      }
      parts.push_back(std::move(e));
    }
    return parts.size() == 1 ? parts[0] : concat_lastdim(parts);
  }

  // Output of the last layer, x̂ᴷ. [B × T × e_x]
  Tensor encode(const MultimodalBatch& batch, const ForwardOptions& opts = {}) const {
    auto keep = key_mask(batch);
    Tensor x = apply_dropout(embed(batch), opts);
    const std::size_t depth = config_.kind == ModelKind::fmt ? mtl_.size() : baseline_.size();
    for (std::size_t k = 0; k < depth; ++k) {
      x = config_.kind == ModelKind::fmt ? mtl_forward(x, mtl_[k], layout_, keep)
                                         : baseline_layer_forward(x, baseline_[k], keep);
      require_finite(x, "layer " + std::to_string(k) + " output");
      x = apply_dropout(x, opts);
    }
    return x;
  }

  // Prediction from the GRU state at t = T. [B × d_y]
  Tensor forward(const MultimodalBatch& batch, const ForwardOptions& opts = {}) const {
    Tensor x = encode(batch, opts);
    const std::size_t B = x.dim(0);
    const std::size_t T = x.dim(1);
    Tensor h = Tensor::zeros({B, config_.gru_hidden()});
    std::vector<std::uint8_t> step(B);
    for (std::size_t t = 0; t < T; ++t) {
      if (config_.mask_padding) {
        bool any = false;
        for (std::size_t b = 0; b < B; ++b) {
          step[b] = batch.mask[b * T + t];
          any = any || step[b];
        }
        if (!any) continue;  // the whole batch is still in its left padding
        Tensor next = gru_step(h, select(x, 1, t), gru_);
        h = select_rows(step, next, h);
      } else {
        h = gru_step(h, select(x, 1, t), gru_);
      }
    }
    Tensor y = output_(h);
    require_finite(y, "prediction head");
    return y;
  }

 private:
  std::vector<std::uint8_t> key_mask(const MultimodalBatch& batch) const {
    if (!config_.mask_padding) return {};
    if (batch.mask.size() != batch.batch_size() * batch.seq_len()) {
      throw DimensionError("batch mask has " + std::to_string(batch.mask.size()) + " entries");
    }
    return batch.mask;
  }

  Tensor apply_dropout(const Tensor& x, const ForwardOptions& opts) const {
    if (!opts.training || config_.dropout <= 0.0) return x;
    if (!opts.rng) throw UsageError("training-mode forward with dropout needs an RNG");
    return dropout(x, config_.dropout, *opts.rng);
  }

  void build() {
    std::mt19937_64 rng(config_.seed);
    const auto names = config_.modality_names();
    const std::size_t ex = layout_.total;

    for (auto m : layout_.active) {
      const auto& spec = config_.modalities[m];
      embed_.push_back(make_affine(params_, "embed." + spec.name + ".", spec.input_dim,
                                   spec.embed_dim, rng));
    }

    if (config_.kind == ModelKind::fmt) {
      for (std::size_t k = 0; k < config_.mtl_layers; ++k) {
        const std::string lp = "mtl." + std::to_string(k) + ".";
        MtlLayer layer;
        for (std::size_t u = 0; u < config_.fms_units; ++u) {
          const std::string up = lp + "fms." + std::to_string(u) + ".";
          FmsUnit unit;
          for (auto f : config_.factors) {
            FactorAttention attn;
            attn.factor = f;
            attn.members = f.members();
            for (auto m : attn.members) attn.width += layout_.width[m];
            const std::string ap = up + "attn." + f.label(names) + ".";
            const std::size_t w = attn.width;
            attn.query = make_affine(params_, ap, w, w, rng, "W_Q", std::string("b_Q"));
            attn.key = make_affine(params_, ap, w, w, rng, "W_K", std::nullopt);
            attn.value = make_affine(params_, ap, w, w, rng, "W_V", std::string("b_V"));
            attn.norm = make_layer_norm(params_, ap + "norm.", w);
            unit.attentions.push_back(std::move(attn));
          }
          for (auto m : layout_.active) {
            unit.s1.push_back(make_summarization(params_, up + "s1." + names[m] + ".",
                                                 fan_in(config_.factors, m), config_.s1,
                                                 config_.summarize_by_addition, rng));
          }
          layer.units.push_back(std::move(unit));
        }
        layer.ffn.in = make_affine(params_, lp + "ffn.", ex, config_.ffn_hidden(), rng, "W1", std::string("b1"));
        layer.ffn.out = make_affine(params_, lp + "ffn.", config_.ffn_hidden(), ex, rng, "W2", std::string("b2"));
        layer.ffn_norm = make_layer_norm(params_, lp + "ffn_norm.", ex);
        for (auto m : layout_.active) {
          layer.s2.push_back(make_summarization(params_, lp + "s2." + names[m] + ".",
                                                config_.fms_units, config_.s2,
                                                config_.summarize_by_addition, rng));
        }
        mtl_.push_back(std::move(layer));
      }
    } else {
      for (std::size_t k = 0; k < config_.mtl_layers; ++k) {
        const std::string lp = "otf." + std::to_string(k) + ".";
        BaselineLayer layer;
        for (std::size_t h = 0; h < config_.heads; ++h) {
          const std::string hp = lp + "head." + std::to_string(h) + ".";
          BaselineHead head;
          head.query = make_affine(params_, hp, ex, ex, rng, "W_Q", std::string("b_Q"));
          head.key = make_affine(params_, hp, ex, ex, rng, "W_K", std::nullopt);
          head.value = make_affine(params_, hp, ex, ex, rng, "W_V", std::string("b_V"));
          layer.heads.push_back(std::move(head));
        }
        layer.mix = make_affine(params_, lp + "mix.", config_.heads * ex, ex, rng);
        layer.attn_norm = make_layer_norm(params_, lp + "attn_norm.", ex);
        layer.ffn.in = make_affine(params_, lp + "ffn.", ex, config_.ffn_hidden(), rng, "W1", std::string("b1"));
        layer.ffn.out = make_affine(params_, lp + "ffn.", config_.ffn_hidden(), ex, rng, "W2", std::string("b2"));
        layer.ffn_norm = make_layer_norm(params_, lp + "ffn_norm.", ex);
        baseline_.push_back(std::move(layer));
      }
    }

    const std::size_t hg = config_.gru_hidden();
    gru_.input_update = make_affine(params_, "gru.", ex, hg, rng, "W_z", std::string("b_z"));
    gru_.input_reset = make_affine(params_, "gru.", ex, hg, rng, "W_r", std::string("b_r"));
    gru_.input_candidate = make_affine(params_, "gru.", ex, hg, rng, "W_h", std::string("b_h"));
    gru_.hidden_update = params_.add_uniform("gru.U_z", {hg, hg}, hg, rng);
    gru_.hidden_reset = params_.add_uniform("gru.U_r", {hg, hg}, hg, rng);
    gru_.hidden_candidate = params_.add_uniform("gru.U_h", {hg, hg}, hg, rng);
    output_ = make_affine(params_, "out.", hg, config_.d_y, rng);
  }

  ModelConfig config_;
  ModalityLayout layout_;
  ParameterStore params_;
  std::vector<Affine> embed_;
  std::vector<MtlLayer> mtl_;
  std::vector<BaselineLayer> baseline_;
  GruCell gru_;
  Affine output_;
};

inline Tensor fmt_forward(const MultimodalBatch& batch, const FmtModel& model,
                          const ForwardOptions& opts = {}) {
  return model.forward(batch, opts);
}

}  // namespace fmtlab
