// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fmtlab/binary_io.hpp"
#include "fmtlab/checkpoint.hpp"
#include "fmtlab/config.hpp"
#include "fmtlab/data.hpp"
#include "fmtlab/error.hpp"
#include "fmtlab/experiments.hpp"
#include "fmtlab/grad_check.hpp"
#include "fmtlab/results.hpp"
#include "fmtlab/train.hpp"

namespace fmtlab {

enum ExitCode : int { kExitOk = 0, kExitVerification = 1, kExitUsage = 2, kExitRuntime = 3 };

// ---------------------------------------------------------------------------
// Run configuration file
//
// JSON object with sections "model", "train", "split", "ablation", "grid",
// "factor_search". Required: model.embed_dim, model.mtl_layers,
// train.learning_rate, train.max_epochs. Everything else has a default, and
// the fully resolved form (resolved_json) is what lands in manifests.

struct RunConfig {
  ModelKind kind = ModelKind::fmt;
  std::vector<std::size_t> embed_dims;  // one value = shared by all modalities
  std::size_t mtl_layers = 0;
  std::size_t fms_units = 1;
  std::size_t heads = 1;
  std::vector<std::string> factors;  // empty = every nonempty subset
  SummarizationNetConfig s1;
  SummarizationNetConfig s2;
  bool summarize_by_addition = false;
  std::size_t h_gru = 0;
  std::size_t h_ff = 0;
  double dropout = 0.0;
  bool positional_encoding = true;
  bool mask_padding = true;

  TrainConfig train;
  std::vector<double> split_ratios{0.8, 0.1, 0.1};
  std::uint64_t split_seed = 0;
  std::vector<std::uint64_t> ablation_seeds;  // empty = the run seed
  GridSpace grid;
  std::size_t factor_budget = 0;  // 0 = 2^M - 1
};

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw ConfigError("config: unknown field '" + where + it.key() + "'");
  }
}

inline const json& section(const json& root, const char* name, bool required) {
  static const json empty = json::object();
  if (!root.contains(name)) {
    if (required) throw ConfigError(std::string("config: missing required field '") + name + "'");
    return empty;
  }
  if (!root.at(name).is_object()) throw ConfigError(std::string("config: '") + name + "' must be an object");
  return root.at(name);
}

template <typename T>
void read_field(const json& obj, const std::string& where, const char* key, T& out, bool required = false) {
  if (!obj.contains(key)) {
    if (required) throw ConfigError("config: missing required field '" + where + key + "'");
    return;
  }
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: field '" + where + key + "' has the wrong type");
  }
}

inline SummarizationNetConfig read_summarization(const json& obj, const std::string& where) {
  reject_unknown(obj, where, {"channels", "kernels"});
  SummarizationNetConfig s;
  read_field(obj, where, "channels", s.channels, true);
  read_field(obj, where, "kernels", s.kernels, true);
  s.validate(where.substr(0, where.size() - 1));
  return s;
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& root) {
  using detail::read_field;
  if (!root.is_object()) throw ConfigError("config: top level must be a JSON object");
  detail::reject_unknown(root, "", {"model", "train", "split", "ablation", "grid", "factor_search"});
  RunConfig c;

  const auto& m = detail::section(root, "model", true);
  detail::reject_unknown(m, "model.", {"kind", "embed_dim", "mtl_layers", "fms_units", "heads", "factors", "s1",
                                       "s2", "summarize_by_addition", "h_gru", "h_ff", "dropout",
                                       "positional_encoding", "mask_padding"});
  std::string kind = "fmt";
  read_field(m, "model.", "kind", kind);
  c.kind = parse_model_kind(kind);
  if (!m.contains("embed_dim")) throw ConfigError("config: missing required field 'model.embed_dim'");
  if (m.at("embed_dim").is_array()) {
    read_field(m, "model.", "embed_dim", c.embed_dims);
  } else {
    std::size_t e = 0;
    read_field(m, "model.", "embed_dim", e);
    c.embed_dims = {e};
  }
  read_field(m, "model.", "mtl_layers", c.mtl_layers, true);
  read_field(m, "model.", "fms_units", c.fms_units);
  read_field(m, "model.", "heads", c.heads);
  read_field(m, "model.", "factors", c.factors);
  if (m.contains("s1")) c.s1 = detail::read_summarization(m.at("s1"), "model.s1.");
  if (m.contains("s2")) c.s2 = detail::read_summarization(m.at("s2"), "model.s2.");
  read_field(m, "model.", "summarize_by_addition", c.summarize_by_addition);
  read_field(m, "model.", "h_gru", c.h_gru);
  read_field(m, "model.", "h_ff", c.h_ff);
  read_field(m, "model.", "dropout", c.dropout);
  read_field(m, "model.", "positional_encoding", c.positional_encoding);
  read_field(m, "model.", "mask_padding", c.mask_padding);

  const auto& t = detail::section(root, "train", true);
  detail::reject_unknown(t, "train.", {"learning_rate", "max_epochs", "batch_size", "patience", "max_steps"});
  read_field(t, "train.", "learning_rate", c.train.learning_rate, true);
  read_field(t, "train.", "max_epochs", c.train.max_epochs, true);
  read_field(t, "train.", "batch_size", c.train.batch_size);
  c.train.patience = std::min<std::size_t>(20, c.train.max_epochs);
  read_field(t, "train.", "patience", c.train.patience);
  read_field(t, "train.", "max_steps", c.train.max_steps);
  c.train.validate();

  const auto& s = detail::section(root, "split", false);
  detail::reject_unknown(s, "split.", {"ratios", "seed"});
  read_field(s, "split.", "ratios", c.split_ratios);
  read_field(s, "split.", "seed", c.split_seed);

  const auto& a = detail::section(root, "ablation", false);
  detail::reject_unknown(a, "ablation.", {"seeds"});
  read_field(a, "ablation.", "seeds", c.ablation_seeds);

  const auto& g = detail::section(root, "grid", false);
  detail::reject_unknown(g, "grid.", {"learning_rates", "mtl_layers", "fms_units", "embed_dims", "dropouts",
                                      "summarization_samples", "conv_layer_choices", "kernel_choices",
                                      "conv_hidden_channels"});
  read_field(g, "grid.", "learning_rates", c.grid.learning_rates);
  read_field(g, "grid.", "mtl_layers", c.grid.mtl_layers);
  read_field(g, "grid.", "fms_units", c.grid.fms_units);
  read_field(g, "grid.", "embed_dims", c.grid.embed_dims);
  read_field(g, "grid.", "dropouts", c.grid.dropouts);
  read_field(g, "grid.", "summarization_samples", c.grid.summarization_samples);
  read_field(g, "grid.", "conv_layer_choices", c.grid.conv_layer_choices);
  read_field(g, "grid.", "kernel_choices", c.grid.kernel_choices);
  read_field(g, "grid.", "conv_hidden_channels", c.grid.conv_hidden_channels);

  const auto& f = detail::section(root, "factor_search", false);
  detail::reject_unknown(f, "factor_search.", {"budget"});
  read_field(f, "factor_search.", "budget", c.factor_budget);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const DataError&) {
    throw ConfigError("cannot read config file " + path);
  }
  try {
    return parse_run_config(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

inline nlohmann::ordered_json resolved_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = {{"kind", to_string(c.kind)},
                {"embed_dim", c.embed_dims},
                {"mtl_layers", c.mtl_layers},
                {"fms_units", c.fms_units},
                {"heads", c.heads},
                {"factors", c.factors},
                {"s1", to_json(c.s1)},
                {"s2", to_json(c.s2)},
                {"summarize_by_addition", c.summarize_by_addition},
                {"h_gru", c.h_gru},
                {"h_ff", c.h_ff},
                {"dropout", c.dropout},
                {"positional_encoding", c.positional_encoding},
                {"mask_padding", c.mask_padding}};
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"max_epochs", c.train.max_epochs},
                {"batch_size", c.train.batch_size},
                {"patience", c.train.patience},
                {"max_steps", c.train.max_steps}};
  j["split"] = {{"ratios", c.split_ratios}, {"seed", c.split_seed}};
  j["ablation"] = {{"seeds", c.ablation_seeds}};
  j["grid"] = {{"learning_rates", c.grid.learning_rates},
               {"mtl_layers", c.grid.mtl_layers},
               {"fms_units", c.grid.fms_units},
               {"embed_dims", c.grid.embed_dims},
               {"dropouts", c.grid.dropouts},
               {"summarization_samples", c.grid.summarization_samples},
               {"conv_layer_choices", c.grid.conv_layer_choices},
               {"kernel_choices", c.grid.kernel_choices},
               {"conv_hidden_channels", c.grid.conv_hidden_channels}};
  j["factor_search"] = {{"budget", c.factor_budget}};
  return j;
}

// Model config for a dataset: modalities and d_y come from the data.
inline ModelConfig model_for_dataset(const RunConfig& c, const Dataset& ds, std::uint64_t seed) {
  ModelConfig m;
  m.kind = c.kind;
  if (c.embed_dims.size() != 1 && c.embed_dims.size() != ds.modalities.size()) {
    throw ConfigError("config: model.embed_dim lists " + std::to_string(c.embed_dims.size()) +
                      " widths for " + std::to_string(ds.modalities.size()) + " modalities");
  }
  for (std::size_t i = 0; i < ds.modalities.size(); ++i) {
    m.modalities.push_back({ds.modalities[i].name, ds.modalities[i].dim,
                            c.embed_dims.size() == 1 ? c.embed_dims[0] : c.embed_dims[i]});
  }
  if (c.factors.empty()) {
    m.factors = enumerate_factors(ds.modalities.size());
  } else {
    for (const auto& f : c.factors) m.factors.push_back(parse_factor(f, ds.modality_names()));
  }
  m.mtl_layers = c.mtl_layers;
  m.fms_units = c.fms_units;
  m.heads = c.heads;
  m.s1 = c.s1;
  m.s2 = c.s2;
  m.summarize_by_addition = c.summarize_by_addition;
  m.h_gru = c.h_gru;
  m.h_ff = c.h_ff;
  m.d_y = ds.d_y;
  m.dropout = c.dropout;
  m.positional_encoding = c.positional_encoding;
  m.mask_padding = c.mask_padding;
  m.seed = seed;
  m.validate();
  return m;
}

// Checkpoint inputs must match the dataset modality by modality.
inline void check_compatible(const ModelConfig& model, const Dataset& ds) {
  if (model.modalities.size() != ds.modalities.size()) {
    throw DataError("checkpoint has " + std::to_string(model.modalities.size()) + " modalities, dataset has " +
                    std::to_string(ds.modalities.size()));
  }
  for (std::size_t i = 0; i < ds.modalities.size(); ++i) {
    const auto& a = model.modalities[i];
    const auto& b = ds.modalities[i];
    if (a.name != b.name) throw DataError("modality " + std::to_string(i) + ": checkpoint has " + a.name +
                                          ", dataset has " + b.name);
    if (a.input_dim != b.dim) {
      throw DataError("modality " + a.name + ": checkpoint expects input dim " + std::to_string(a.input_dim) +
                      ", dataset has " + std::to_string(b.dim));
    }
  }
  if (model.d_y != ds.d_y) {
    throw DataError("checkpoint output width " + std::to_string(model.d_y) + " does not match dataset d_y " +
                    std::to_string(ds.d_y));
  }
}

// ---------------------------------------------------------------------------
// Commands

namespace detail {

inline std::vector<std::size_t> parse_size_list(const std::string& text, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError(std::string("--") + what + ": '" + item + "' is not a nonnegative integer");
    }
  }
  if (out.empty()) throw ConfigError(std::string("--") + what + " is empty");
  return out;
}

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void progress(const std::string& msg) const { err << "[fmtlab] " << msg << std::endl; }
  ProgressFn progress_fn() const {
    return [this](const std::string& m) { progress(m); };
  }
  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  void emit(const std::vector<std::string>& paths) const {
    for (const auto& p : paths) out << p << "\n";
  }
};

struct DataRun {
  Dataset dataset;
  DatasetSplit split;
  std::string hash;
};

inline DataRun load_split(const std::string& dir, const RunConfig& c) {
  DataRun r{load_dataset(dir), {}, dataset_hash(dir)};
  r.split = split(r.dataset, c.split_ratios, c.split_seed);
  return r;
}

inline std::vector<std::string> finish(const Context& ctx, RunManifest manifest, const std::string& dir,
                                       const std::string& stem, std::vector<std::string> outputs) {
  manifest.outputs = outputs;
  manifest.duration_seconds = ctx.elapsed();
  outputs.push_back(write_manifest(manifest, dir, stem));
  ctx.emit(outputs);
  return outputs;
}

inline nlohmann::ordered_json command_config(const std::string& command, const RunConfig& c,
                                             nlohmann::ordered_json flags) {
  nlohmann::ordered_json j = resolved_json(c);
  j["command"] = command;
  j["flags"] = std::move(flags);
  return j;
}

}  // namespace detail

// Parses argv, runs one subcommand, maps failures to exit codes.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  namespace fs = std::filesystem;
  CLI::App app{"Factorized multimodal transformer toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");

  std::uint64_t seed_flag = 0;
  std::string data_dir, config_path, out_dir, checkpoint_path, split_name = "test";
  std::size_t jobs = 1;

  auto add_seed = [&](CLI::App* cmd) { return cmd->add_option("--seed", seed_flag, "Seed (overrides FMT_SEED)"); };
  auto add_jobs = [&](CLI::App* cmd) {
    cmd->add_option("--jobs", jobs, "Parallel trials")->check(CLI::PositiveNumber);
  };

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset directory");
  std::string task, dims_text = "4,4,4";
  std::size_t n = 1000, seq_len = 20;
  double noise = 0.1;
  bool regression = false;
  gen->add_option("--task", task, "unimodal-sum | bimodal-product | trimodal-parity")->required();
  gen->add_option("--n", n, "Number of samples");
  gen->add_option("--seq-len", seq_len, "Padded sequence length T");
  gen->add_option("--dims", dims_text, "Comma-separated per-modality feature dims");
  gen->add_option("--noise", noise, "Background noise stddev");
  gen->add_flag("--regression", regression, "Signed-value labels instead of binary");
  gen->add_option("--out", out_dir, "Output directory")->required();
  auto* gen_seed = add_seed(gen);

  // train
  auto* trn = app.add_subcommand("train", "Train a model and write a checkpoint");
  trn->add_option("--data", data_dir, "Dataset directory")->required();
  trn->add_option("--config", config_path, "Run config JSON")->required();
  trn->add_option("--out", out_dir, "Output directory")->required();
  auto* trn_seed = add_seed(trn);

  // eval
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint");
  evl->add_option("--data", data_dir, "Dataset directory")->required();
  evl->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  evl->add_option("--split", split_name, "test | validation | train | all")
      ->check(CLI::IsMember({"test", "validation", "train", "all"}));
  evl->add_option("--out", out_dir, "Output directory")->required();
  auto* evl_seed = add_seed(evl);

  // gradcheck
  auto* gck = app.add_subcommand("gradcheck", "Finite-difference check of the tiny model");
  double eps = 1e-5;
  std::optional<std::size_t> samples;
  bool inject_fault = false;
  std::string gck_out = ".";
  gck->add_option("--config", config_path, "Optional run config; model section overrides the tiny model");
  gck->add_option("--eps", eps, "Central-difference step");
  gck->add_option("--samples", samples, "Coordinates to sample (default: all)");
  gck->add_flag("--inject-fault", inject_fault, "Double every matmul gradient (negative control)");
  gck->add_option("--out", gck_out, "Directory for the manifest");
  auto* gck_seed = add_seed(gck);

  // ablate
  auto* abl = app.add_subcommand("ablate", "Factor ablation suite");
  std::string seeds_text;
  abl->add_option("--data", data_dir, "Dataset directory")->required();
  abl->add_option("--config", config_path, "Run config JSON")->required();
  abl->add_option("--out", out_dir, "Output directory")->required();
  abl->add_option("--seeds", seeds_text, "Comma-separated seeds (default: ablation.seeds or --seed)");
  auto* abl_seed = add_seed(abl);
  add_jobs(abl);

  // sweep
  auto* swp = app.add_subcommand("sweep", "One-axis architecture sweep");
  std::string axis_text, values_text;
  swp->add_option("--axis", axis_text, "fms-units | mtl-layers | baseline-heads")->required();
  swp->add_option("--values", values_text, "Comma-separated axis values (default: standard set)");
  swp->add_option("--data", data_dir, "Dataset directory")->required();
  swp->add_option("--config", config_path, "Run config JSON")->required();
  swp->add_option("--out", out_dir, "Output directory")->required();
  auto* swp_seed = add_seed(swp);
  add_jobs(swp);

  // factor-search
  auto* fsr = app.add_subcommand("factor-search", "Greedy factor addition");
  std::size_t budget = 0;
  fsr->add_option("--data", data_dir, "Dataset directory")->required();
  fsr->add_option("--config", config_path, "Run config JSON")->required();
  fsr->add_option("--out", out_dir, "Output directory")->required();
  fsr->add_option("--budget", budget, "Maximum factors (default: factor_search.budget or all)");
  auto* fsr_seed = add_seed(fsr);
  add_jobs(fsr);

  // grid
  auto* grd = app.add_subcommand("grid", "Hyperparameter grid search");
  grd->add_option("--data", data_dir, "Dataset directory")->required();
  grd->add_option("--config", config_path, "Run config JSON")->required();
  grd->add_option("--out", out_dir, "Output directory")->required();
  auto* grd_seed = add_seed(grd);
  add_jobs(grd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "fmtlab: " << e.what() << "\n";
    return kExitUsage;
  }

  detail::Context ctx{out, err};
  auto resolve_seed = [&](CLI::Option* opt) -> std::uint64_t {
    if (opt->count()) return seed_flag;
    if (const char* env = std::getenv("FMT_SEED")) {
      try {
        std::size_t used = 0;
        const std::string s(env);
        const auto v = std::stoull(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
      } catch (const std::exception&) {
        throw ConfigError(std::string("FMT_SEED='") + env + "' is not a nonnegative integer");
      }
    }
    return 0;
  };

  try {
    if (gen->parsed()) {
      const auto seed = resolve_seed(gen_seed);
      SyntheticTaskSpec spec;
      spec.task = parse_task(task);
      spec.num_samples = n;
      spec.seq_len = seq_len;
      spec.dims = detail::parse_size_list(dims_text, "dims");
      spec.noise_std = noise;
      spec.seed = seed;
      spec.regression = regression;
      ctx.progress("generating " + task + " n=" + std::to_string(n));
      auto ds = generate_synthetic(spec);
      save_dataset(ds, out_dir);
      nlohmann::ordered_json cfg{{"command", "gen-data"},
                                 {"task", task},
                                 {"n", n},
                                 {"seq_len", seq_len},
                                 {"dims", spec.dims},
                                 {"noise", noise},
                                 {"regression", regression}};
      RunManifest m{"gen-data", cfg, seed, dataset_hash(out_dir), 0.0, {}};
      m.duration_seconds = ctx.elapsed();
      m.outputs = {out_dir};
      write_manifest(m, out_dir, "gen-data");
      ctx.emit({out_dir});
      return kExitOk;
    }

    if (gck->parsed()) {
      const auto seed = resolve_seed(gck_seed);
      if (samples && *samples == 0) throw ConfigError("--samples must be at least 1");
      ModelConfig model = tiny_gradcheck_config(seed + 1);
      nlohmann::ordered_json cfg{{"command", "gradcheck"},
                                 {"eps", eps},
                                 {"samples", samples ? *samples : 0},
                                 {"inject_fault", inject_fault}};
      if (!config_path.empty()) {
        auto j = nlohmann::json::parse(io::read_file(config_path));
        const auto& msec = detail::section(j, "model", true);
        if (msec.contains("embed_dim") && msec.at("embed_dim").is_number_unsigned())
          for (auto& mod : model.modalities) mod.embed_dim = msec.at("embed_dim").get<std::size_t>();
        detail::read_field(msec, "model.", "mtl_layers", model.mtl_layers);
        detail::read_field(msec, "model.", "fms_units", model.fms_units);
        model.validate();
      }
      cfg["model"] = to_json(model);
      GradCheckOptions opt;
      opt.eps = eps;
      opt.samples = samples ? *samples : 0;
      opt.seed = seed;
      ctx.progress(std::string("gradient check") + (inject_fault ? " with injected fault" : ""));
      auto r = tiny_gradcheck(model, opt, inject_fault);
      char buf[256];
      std::snprintf(buf, sizeof buf, "max_relative_error %.6e worst %s[%zu] coordinates %zu", r.max_relative_error,
                    r.worst_parameter.c_str(), r.worst_index, r.coordinates_checked);
      ctx.progress(buf);
      const bool pass = r.max_relative_error < 1e-4;
      RunManifest m{"gradcheck", cfg, seed, "", ctx.elapsed(), {}};
      nlohmann::ordered_json result{{"max_relative_error", r.max_relative_error},
                                    {"worst_parameter", r.worst_parameter},
                                    {"coordinates_checked", r.coordinates_checked},
                                    {"pass", pass}};
      m.config["result"] = result;
      const auto stem = output_stem("gradcheck", config_hash(cfg), seed);
      out << buf << "\n";
      out << write_manifest(m, gck_out, stem) << "\n";
      return pass ? kExitOk : kExitVerification;
    }

    if (evl->parsed()) {
      auto ckpt = load_checkpoint(checkpoint_path);
      const std::uint64_t seed = evl_seed->count() || std::getenv("FMT_SEED")
                                     ? resolve_seed(evl_seed)
                                     : ckpt.extra.value("seed", std::uint64_t{0});
      auto ds = load_dataset(data_dir);
      check_compatible(ckpt.model.config(), ds);
      Dataset target;
      if (split_name == "all") {
        target = ds;
      } else {
        auto ratios = ckpt.extra.value("split_ratios", std::vector<double>{0.8, 0.1, 0.1});
        auto parts = fmtlab::split(ds, ratios, ckpt.extra.value("split_seed", std::uint64_t{0}));
        target = split_name == "test" ? parts.test : split_name == "validation" ? parts.validation : parts.train;
      }
      ctx.progress("evaluating on " + split_name + " (" + std::to_string(target.size()) + " samples)");
      auto metrics = evaluate(ckpt.model, target);
      nlohmann::ordered_json cfg{{"command", "eval"},
                                 {"checkpoint_hash", io::hex64(io::fnv1a(io::read_file(checkpoint_path)))},
                                 {"split", split_name}};
      const auto stem = output_stem("metrics", config_hash(cfg), seed);
      auto outputs = write_table(metrics_table(metrics), out_dir, stem);
      detail::finish(ctx, {"eval", cfg, seed, dataset_hash(data_dir), 0.0, {}}, out_dir, stem, outputs);
      return kExitOk;
    }

    // Remaining commands share --data/--config.
    const RunConfig rc = load_run_config(config_path);

    if (trn->parsed()) {
      const auto seed = resolve_seed(trn_seed);
      auto dr = detail::load_split(data_dir, rc);
      auto model_cfg = model_for_dataset(rc, dr.dataset, seed);
      TrainConfig tc = rc.train;
      tc.seed = seed;
      auto cfg = detail::command_config("train", rc, {});
      const auto hash = config_hash(cfg);
      ctx.progress("training " + std::to_string(dr.split.train.size()) + " samples, " +
                   std::to_string(tc.max_epochs) + " epochs max");
      FmtModel model(model_cfg);
      auto result = train(model, dr.split.train, &dr.split.validation, tc);
      ctx.progress("best epoch " + std::to_string(result.best_epoch) +
                   " validation_loss=" + std::to_string(result.best_validation_loss));
      fs::create_directories(out_dir);
      const auto stem = output_stem("train", hash, seed);
      const auto ckpt = (fs::path(out_dir) / ("model_" + hash + "_s" + std::to_string(seed) + ".ckpt")).string();
      save_checkpoint(model, ckpt,
                      {{"seed", seed}, {"split_ratios", rc.split_ratios}, {"split_seed", rc.split_seed},
                       {"config_hash", hash}});
      auto outputs = write_table(history_table(result), out_dir, "history_" + hash + "_s" + std::to_string(seed));
      outputs.insert(outputs.begin(), ckpt);
      detail::finish(ctx, {"train", cfg, seed, dr.hash, 0.0, {}}, out_dir, stem, outputs);
      return kExitOk;
    }

    if (abl->parsed()) {
      const auto seed = resolve_seed(abl_seed);
      std::vector<std::uint64_t> seeds;
      if (!seeds_text.empty()) {
        for (auto s : detail::parse_size_list(seeds_text, "seeds")) seeds.push_back(s);
      } else if (!rc.ablation_seeds.empty()) {
        seeds = rc.ablation_seeds;
      } else {
        seeds = {seed};
      }
      auto dr = detail::load_split(data_dir, rc);
      auto base = model_for_dataset(rc, dr.dataset, seed);
      auto cfg = detail::command_config("ablate", rc, {{"seeds", seeds}});
      const auto hash = config_hash(cfg);
      auto result = run_ablation_suite(base, rc.train, dr.split, seeds, jobs, ctx.progress_fn());
      const auto stem = output_stem("ablation", hash, seeds.front());
      auto outputs = write_table(summary_table(result.summary), out_dir, stem);
      auto more = write_table(trial_table(result.trials), out_dir, output_stem("ablation_trials", hash, seeds.front()));
      outputs.insert(outputs.end(), more.begin(), more.end());
      detail::finish(ctx, {"ablate", cfg, seeds.front(), dr.hash, 0.0, {}}, out_dir, stem, outputs);
      return kExitOk;
    }

    if (swp->parsed()) {
      const auto seed = resolve_seed(swp_seed);
      const auto axis = parse_sweep_axis(axis_text);
      auto values = values_text.empty() ? default_sweep_values(axis) : detail::parse_size_list(values_text, "values");
      auto dr = detail::load_split(data_dir, rc);
      auto base = model_for_dataset(rc, dr.dataset, seed);
      TrainConfig tc = rc.train;
      tc.seed = seed;
      auto cfg = detail::command_config("sweep", rc, {{"axis", axis_text}, {"values", values}});
      const auto hash = config_hash(cfg);
      auto trials = run_sweep(base, tc, axis, dr.split, values, jobs, ctx.progress_fn());
      const auto stem = output_stem("sweep_" + axis_text, hash, seed);
      auto outputs = write_table(trial_table(trials), out_dir, stem);
      detail::finish(ctx, {"sweep", cfg, seed, dr.hash, 0.0, {}}, out_dir, stem, outputs);
      return kExitOk;
    }

    if (fsr->parsed()) {
      const auto seed = resolve_seed(fsr_seed);
      auto dr = detail::load_split(data_dir, rc);
      auto base = model_for_dataset(rc, dr.dataset, seed);
      std::size_t b = budget ? budget : rc.factor_budget ? rc.factor_budget : enumerate_factors(base.modalities.size()).size();
      auto cfg = detail::command_config("factor-search", rc, {{"budget", b}});
      const auto hash = config_hash(cfg);
      auto result = greedy_factor_search(base, rc.train, dr.split, b, seed, jobs, ctx.progress_fn());
      const auto stem = output_stem("factor_search", hash, seed);
      auto outputs = write_table(greedy_table(result, dr.dataset.modality_names()), out_dir, stem);
      std::vector<TrialResult> all;
      for (const auto& round : result.trace) all.insert(all.end(), round.candidates.begin(), round.candidates.end());
      if (!all.empty()) {
        auto more = write_table(trial_table(all), out_dir, output_stem("factor_search_trials", hash, seed));
        outputs.insert(outputs.end(), more.begin(), more.end());
      }
      RunManifest m{"factor-search", cfg, seed, dr.hash, 0.0, {}};
      m.config["warnings"] = result.warnings;
      detail::finish(ctx, m, out_dir, stem, outputs);
      return kExitOk;
    }

    if (grd->parsed()) {
      const auto seed = resolve_seed(grd_seed);
      auto dr = detail::load_split(data_dir, rc);
      auto base = model_for_dataset(rc, dr.dataset, seed);
      auto cfg = detail::command_config("grid", rc, {});
      const auto hash = config_hash(cfg);
      ctx.progress("grid: " + std::to_string(rc.grid.cardinality()) + " points x " +
                   std::to_string(std::max<std::size_t>(1, rc.grid.summarization_samples)) +
                   " summarization nets");
      auto result = run_grid_search(base, rc.train, rc.grid, dr.split, seed, jobs, ctx.progress_fn());
      const auto stem = output_stem("grid", hash, seed);
      auto outputs = write_table(trial_table(result.trials), out_dir, stem);
      const auto& best = result.trials[result.best];
      nlohmann::ordered_json best_json{{"label", best.label},
                                       {"validation_loss", best.validation_loss},
                                       {"model", to_json(best.model)},
                                       {"learning_rate", best.train.learning_rate}};
      const auto best_path = (fs::path(out_dir) / ("grid_best_" + hash + "_s" + std::to_string(seed) + ".json")).string();
      io::write_file(best_path, best_json.dump(2) + "\n");
      outputs.push_back(best_path);
      detail::finish(ctx, {"grid", cfg, seed, dr.hash, 0.0, {}}, out_dir, stem, outputs);
      return kExitOk;
    }
    throw UsageError("no command given");
  } catch (const ConfigError& e) {
    err << "fmtlab: config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "fmtlab: usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "fmtlab: config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "fmtlab: error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace fmtlab
