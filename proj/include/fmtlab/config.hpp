// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "fmtlab/error.hpp"
#include "fmtlab/factor.hpp"

namespace fmtlab {

struct ModalitySpec {
  std::string name;
  std::size_t input_dim = 0;  // d_M
  std::size_t embed_dim = 0;  // e_M
};

// Stack of same-length 1D convs; the last layer must have one output channel.
struct SummarizationNetConfig {
  std::vector<std::size_t> channels{1};
  std::vector<std::size_t> kernels{1};

  void validate(const std::string& what) const {
    if (channels.empty() || channels.size() != kernels.size()) {
      throw ConfigError(what + ": channels and kernels must be nonempty lists of equal length");
    }
    if (channels.back() != 1) throw ConfigError(what + ": final channel count must be 1");
    for (auto c : channels)
      if (c == 0) throw ConfigError(what + ": channel counts must be positive");
    for (auto k : kernels)
      if (k == 0) throw ConfigError(what + ": kernel widths must be positive");
  }

  friend bool operator==(const SummarizationNetConfig&, const SummarizationNetConfig&) = default;
};

enum class ModelKind { fmt, baseline_transformer };

struct ModelConfig {
  std::vector<ModalitySpec> modalities;
  FactorSet factors;
  ModelKind kind = ModelKind::fmt;
  std::size_t mtl_layers = 2;  // K
  std::size_t fms_units = 1;   // U
  std::size_t heads = 1;       // baseline only
  SummarizationNetConfig s1;
  SummarizationNetConfig s2;
  bool summarize_by_addition = false;
  std::size_t h_gru = 0;  // 0 = e_x
  std::size_t h_ff = 0;   // 0 = 2·e_x
  std::size_t d_y = 1;
  double dropout = 0.0;
  bool positional_encoding = true;
  bool mask_padding = true;
  std::uint64_t seed = 0;

  std::vector<std::string> modality_names() const {
    std::vector<std::string> out;
    for (const auto& m : modalities) out.push_back(m.name);
    return out;
  }

  // Modalities fed to the model: every modality named by some factor (FMT),
  // or all of them (baseline).
  std::vector<std::size_t> active_modalities() const {
    std::vector<std::size_t> out;
    const std::uint32_t covered = factors.covered();
    for (std::size_t m = 0; m < modalities.size(); ++m)
      if (kind == ModelKind::baseline_transformer || ((covered >> m) & 1u)) out.push_back(m);
    return out;
  }

  std::size_t e_x() const {
    std::size_t e = 0;
    for (auto m : active_modalities()) e += modalities[m].embed_dim;
    return e;
  }
  std::size_t gru_hidden() const { return h_gru ? h_gru : e_x(); }
  std::size_t ffn_hidden() const { return h_ff ? h_ff : 2 * e_x(); }

  // Attentions executed per MTL layer.
  std::size_t attentions_per_layer() const {
    return kind == ModelKind::fmt ? fms_units * factors.size() : heads;
  }

  void validate() const {
    if (modalities.empty()) throw ConfigError("model needs at least one modality");
    if (modalities.size() > kMaxModalities) {
      throw ConfigError("at most " + std::to_string(kMaxModalities) + " modalities supported");
    }
    for (const auto& m : modalities) {
      if (m.input_dim == 0 || m.embed_dim == 0) {
        throw ConfigError("modality " + m.name + ": input_dim and embed_dim must be positive");
      }
    }
    if (d_y == 0) throw ConfigError("d_y must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (kind == ModelKind::fmt) {
      if (factors.empty()) throw ConfigError("factor set is empty");
      for (auto f : factors) {
        for (auto m : f.members()) {
          if (m >= modalities.size()) {
            throw ConfigError("factor references modality index " + std::to_string(m) +
                              " but only " + std::to_string(modalities.size()) + " exist");
          }
        }
      }
      if (fms_units == 0) throw ConfigError("fms_units must be at least 1");
      if (!summarize_by_addition) {
        s1.validate("s1");
        s2.validate("s2");
      }
    } else {
      if (heads == 0) throw ConfigError("heads must be at least 1");
    }
  }
};

// ---------------------------------------------------------------------------
// Factor ablations

struct FactorAblation {
  enum class Kind { drop_unimodal, drop_bimodal, drop_trimodal, only_modality, summarize_by_addition };
  Kind kind = Kind::drop_trimodal;
  std::size_t modality = 0;  // only_modality

  static FactorAblation drop_unimodal() { return {Kind::drop_unimodal, 0}; }
  static FactorAblation drop_bimodal() { return {Kind::drop_bimodal, 0}; }
  static FactorAblation drop_trimodal() { return {Kind::drop_trimodal, 0}; }
  static FactorAblation only(std::size_t m) { return {Kind::only_modality, m}; }
  static FactorAblation additive() { return {Kind::summarize_by_addition, 0}; }
};

inline ModelConfig apply_factor_ablation(ModelConfig config, const FactorAblation& ablation) {
  auto drop_size = [&](std::size_t size) {
    FactorSet kept;
    for (auto f : config.factors)
      if (f.size() != size) kept.push_back(f);
    if (kept.empty()) {
      throw ConfigError("ablation removing " + std::to_string(size) +
                        "-modality factors leaves the factor set empty");
    }
    config.factors = kept;
  };
  switch (ablation.kind) {
    case FactorAblation::Kind::drop_unimodal: drop_size(1); break;
    case FactorAblation::Kind::drop_bimodal: drop_size(2); break;
    case FactorAblation::Kind::drop_trimodal: drop_size(3); break;
    case FactorAblation::Kind::only_modality:
      if (ablation.modality >= config.modalities.size()) {
        throw ConfigError("only-modality: no modality with index " + std::to_string(ablation.modality));
      }
      config.factors = FactorSet({Factor(1u << ablation.modality)});
      break;
    case FactorAblation::Kind::summarize_by_addition: config.summarize_by_addition = true; break;
  }
  return config;
}

// ---------------------------------------------------------------------------
// JSON form (complete; used by checkpoints and manifests)

inline nlohmann::ordered_json to_json(const SummarizationNetConfig& s) {
  return {{"channels", s.channels}, {"kernels", s.kernels}};
}

inline SummarizationNetConfig summarization_from_json(const nlohmann::json& j) {
  SummarizationNetConfig s;
  s.channels = j.at("channels").get<std::vector<std::size_t>>();
  s.kernels = j.at("kernels").get<std::vector<std::size_t>>();
  return s;
}

inline std::string to_string(ModelKind k) {
  return k == ModelKind::fmt ? "fmt" : "baseline";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "fmt") return ModelKind::fmt;
  if (s == "baseline") return ModelKind::baseline_transformer;
  throw ConfigError("unknown model kind '" + s + "' (expected fmt or baseline)");
}

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(c.kind);
  j["modalities"] = nlohmann::ordered_json::array();
  for (const auto& m : c.modalities) {
    j["modalities"].push_back(
        {{"name", m.name}, {"input_dim", m.input_dim}, {"embed_dim", m.embed_dim}});
  }
  j["factors"] = c.factors.masks();
  j["mtl_layers"] = c.mtl_layers;
  j["fms_units"] = c.fms_units;
  j["heads"] = c.heads;
  j["s1"] = to_json(c.s1);
  j["s2"] = to_json(c.s2);
  j["summarize_by_addition"] = c.summarize_by_addition;
  j["h_gru"] = c.gru_hidden();
  j["h_ff"] = c.ffn_hidden();
  j["d_y"] = c.d_y;
  j["dropout"] = c.dropout;
  j["positional_encoding"] = c.positional_encoding;
  j["mask_padding"] = c.mask_padding;
  j["seed"] = c.seed;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.kind = parse_model_kind(j.at("kind").get<std::string>());
    for (const auto& m : j.at("modalities")) {
      c.modalities.push_back({m.at("name").get<std::string>(), m.at("input_dim").get<std::size_t>(),
                              m.at("embed_dim").get<std::size_t>()});
    }
    for (auto mask : j.at("factors").get<std::vector<std::uint32_t>>()) c.factors.push_back(Factor(mask));
    c.mtl_layers = j.at("mtl_layers").get<std::size_t>();
    c.fms_units = j.at("fms_units").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.s1 = summarization_from_json(j.at("s1"));
    c.s2 = summarization_from_json(j.at("s2"));
    c.summarize_by_addition = j.at("summarize_by_addition").get<bool>();
    c.h_gru = j.at("h_gru").get<std::size_t>();
    c.h_ff = j.at("h_ff").get<std::size_t>();
    c.d_y = j.at("d_y").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.positional_encoding = j.at("positional_encoding").get<bool>();
    c.mask_padding = j.at("mask_padding").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace fmtlab
