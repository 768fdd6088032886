// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "fmtlab/config.hpp"
#include "fmtlab/data.hpp"
#include "fmtlab/error.hpp"
#include "fmtlab/factor.hpp"
#include "fmtlab/grad_check.hpp"
#include "fmtlab/model.hpp"
#include "fmtlab/ops.hpp"
#include "fmtlab/train.hpp"

namespace fmtlab {

// ---------------------------------------------------------------------------
// Trials

struct TrialSpec {
  std::string label;
  ModelConfig model;
  TrainConfig train;
};

struct TrialResult {
  std::string label;
  ModelConfig model;
  TrainConfig train;
  std::size_t attentions_per_layer = 0;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  double validation_loss = 0.0;
  MetricsReport test_metrics;
};

using ProgressFn = std::function<void(const std::string&)>;

// Trains on split.train, selects on split.validation, reports on split.test.
inline TrialResult run_trial(const TrialSpec& spec, const DatasetSplit& split) {
  FmtModel model(spec.model);
  auto history = train(model, split.train, &split.validation, spec.train);
  TrialResult r;
  r.label = spec.label;
  r.model = spec.model;
  r.train = spec.train;
  r.attentions_per_layer = spec.model.attentions_per_layer();
  r.epochs_run = history.history.size();
  r.best_epoch = history.best_epoch;
  r.steps = history.steps;
  r.validation_loss = history.best_validation_loss;
  r.test_metrics = evaluate(model, split.test);
  return r;
}

// Runs independent trials on up to `jobs` threads. Results come back in spec
// order regardless of completion order. The first failure is rethrown after
// all workers stop.
inline std::vector<TrialResult> run_trials(const std::vector<TrialSpec>& specs, const DatasetSplit& split,
                                           std::size_t jobs = 1, const ProgressFn& progress = {}) {
  std::vector<TrialResult> results(specs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= specs.size() || failed.load()) return;
      try {
        results[i] = run_trial(specs[i], split);
        if (progress) {
          std::lock_guard<std::mutex> lock(mu);
          progress("trial " + std::to_string(i + 1) + "/" + std::to_string(specs.size()) + " " +
                   specs[i].label + " validation_loss=" + std::to_string(results[i].validation_loss));
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!error) error = std::current_exception();
        failed = true;
        return;
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, specs.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  return results;
}

inline TrialSpec seeded(TrialSpec spec, std::uint64_t seed) {
  spec.model.seed = seed;
  spec.train.seed = seed;
  return spec;
}

// ---------------------------------------------------------------------------
// Ablation suite

struct AblationVariant {
  std::string name;
  ModelConfig model;
};

// full, UNI, BI, TRI, one row per single modality, S. Eight rows for three
// modalities.
inline std::vector<AblationVariant> ablation_variants(const ModelConfig& base) {
  if (base.kind != ModelKind::fmt) throw ConfigError("ablation suite needs an FMT model config");
  std::vector<AblationVariant> out;
  out.push_back({"full", base});
  out.push_back({"UNI", apply_factor_ablation(base, FactorAblation::drop_unimodal())});
  out.push_back({"BI", apply_factor_ablation(base, FactorAblation::drop_bimodal())});
  out.push_back({"TRI", apply_factor_ablation(base, FactorAblation::drop_trimodal())});
  for (std::size_t m = 0; m < base.modalities.size(); ++m)
    out.push_back({base.modalities[m].name, apply_factor_ablation(base, FactorAblation::only(m))});
  out.push_back({"S", apply_factor_ablation(base, FactorAblation::additive())});
  return out;
}

struct VariantSummary {
  std::string name;
  std::size_t runs = 0;
  MetricsReport mean;
  MetricsReport stddev;  // population
};

struct AblationResult {
  std::vector<TrialResult> trials;  // variant-major, then seed
  std::vector<VariantSummary> summary;
};

inline std::vector<VariantSummary> summarize(const std::vector<TrialResult>& trials) {
  std::vector<VariantSummary> out;
  for (const auto& t : trials) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& s) { return s.name == t.label; });
    if (it == out.end()) {
      out.push_back({t.label, 0, {}, {}});
      it = out.end() - 1;
    }
    ++it->runs;
    for (const auto& [k, v] : t.test_metrics) it->mean[k] += v;
    it->mean["validation_loss"] += t.validation_loss;
  }
  for (auto& s : out) {
    for (auto& [k, v] : s.mean) v /= static_cast<double>(s.runs);
    for (const auto& t : trials) {
      if (t.label != s.name) continue;
      for (const auto& [k, v] : s.mean) {
        const double x = k == "validation_loss" ? t.validation_loss : t.test_metrics.at(k);
        s.stddev[k] += (x - v) * (x - v);
      }
    }
    for (auto& [k, v] : s.stddev) v = std::sqrt(v / static_cast<double>(s.runs));
  }
  return out;
}

inline AblationResult run_ablation_suite(const ModelConfig& base, const TrainConfig& train_config,
                                         const DatasetSplit& split, const std::vector<std::uint64_t>& seeds,
                                         std::size_t jobs = 1, const ProgressFn& progress = {}) {
  if (seeds.empty()) throw ConfigError("ablation suite needs at least one seed");
  std::vector<TrialSpec> specs;
  for (const auto& v : ablation_variants(base))
    for (auto seed : seeds) specs.push_back(seeded({v.name, v.model, train_config}, seed));
  AblationResult r;
  r.trials = run_trials(specs, split, jobs, progress);
  r.summary = summarize(r.trials);
  return r;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { fms_units, mtl_layers, baseline_heads };

inline SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "fms-units") return SweepAxis::fms_units;
  if (s == "mtl-layers") return SweepAxis::mtl_layers;
  if (s == "baseline-heads") return SweepAxis::baseline_heads;
  throw ConfigError("unknown sweep axis '" + s + "' (expected fms-units, mtl-layers or baseline-heads)");
}

inline std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::fms_units: return "fms-units";
    case SweepAxis::mtl_layers: return "mtl-layers";
    case SweepAxis::baseline_heads: return "baseline-heads";
  }
  return "?";
}

inline std::vector<std::size_t> default_sweep_values(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::fms_units: return {1, 2, 3, 4, 5, 6};
    case SweepAxis::mtl_layers: return {2, 3, 4, 5, 6, 7, 8};
    case SweepAxis::baseline_heads: return {1, 2, 3, 4, 5, 6, 7, 14, 21, 35};
  }
  return {};
}

inline std::vector<TrialSpec> sweep_trials(const ModelConfig& base, const TrainConfig& train_config,
                                           SweepAxis axis, const std::vector<std::size_t>& values) {
  if (values.empty()) throw ConfigError("sweep has no axis values");
  std::vector<TrialSpec> specs;
  for (auto v : values) {
    if (v == 0) throw ConfigError("sweep values must be positive");
    ModelConfig c = base;
    switch (axis) {
      case SweepAxis::fms_units:
        c.kind = ModelKind::fmt;
        c.fms_units = v;
        break;
      case SweepAxis::mtl_layers:
        c.kind = ModelKind::fmt;
        c.mtl_layers = v;
        break;
      case SweepAxis::baseline_heads:
        c.kind = ModelKind::baseline_transformer;
        c.heads = v;
        break;
    }
    c.validate();
    specs.push_back({to_string(axis) + "=" + std::to_string(v), c, train_config});
  }
  return specs;
}

inline std::vector<TrialResult> run_sweep(const ModelConfig& base, const TrainConfig& train_config,
                                          SweepAxis axis, const DatasetSplit& split,
                                          std::vector<std::size_t> values = {}, std::size_t jobs = 1,
                                          const ProgressFn& progress = {}) {
  if (values.empty()) values = default_sweep_values(axis);
  return run_trials(sweep_trials(base, train_config, axis, values), split, jobs, progress);
}

// ---------------------------------------------------------------------------
// Hyperparameter grid

struct GridSpace {
  std::vector<double> learning_rates{0.001, 0.0001};
  std::vector<std::size_t> mtl_layers{4, 6, 8};
  std::vector<std::size_t> fms_units{4, 6};
  std::vector<std::size_t> embed_dims{20, 40};
  std::vector<double> dropouts{0.0, 0.1};
  // Summarization nets are sampled, not enumerated. 0 keeps the base s1/s2.
  std::size_t summarization_samples = 5;
  std::vector<std::size_t> conv_layer_choices{1, 2, 3};
  std::vector<std::size_t> kernel_choices{2, 5, 10, 15, 20};
  std::size_t conv_hidden_channels = 4;

  std::size_t cardinality() const {
    return learning_rates.size() * mtl_layers.size() * fms_units.size() * embed_dims.size() *
           dropouts.size();
  }
};

// Draws `count` distinct conv stacks. Each stack is used for both S1 and S2.
inline std::vector<SummarizationNetConfig> sample_summarization_nets(const GridSpace& space,
                                                                     std::uint64_t seed) {
  if (space.summarization_samples == 0) return {};
  if (space.conv_layer_choices.empty() || space.kernel_choices.empty()) {
    throw ConfigError("grid: summarization sampling needs layer and kernel choices");
  }
  std::size_t distinct = 0;
  for (auto layers : space.conv_layer_choices) {
    if (layers == 0) throw ConfigError("grid: conv layer counts must be positive");
    distinct += static_cast<std::size_t>(
        std::pow(static_cast<double>(space.kernel_choices.size()), static_cast<double>(layers)));
  }
  if (space.summarization_samples > distinct) {
    throw ConfigError("grid: cannot draw " + std::to_string(space.summarization_samples) +
                      " distinct summarization nets from " + std::to_string(distinct));
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_layers(0, space.conv_layer_choices.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_kernel(0, space.kernel_choices.size() - 1);
  std::vector<SummarizationNetConfig> out;
  std::set<std::vector<std::size_t>> seen;
  while (out.size() < space.summarization_samples) {
    const std::size_t layers = space.conv_layer_choices[pick_layers(rng)];
    SummarizationNetConfig s;
    s.channels.assign(layers, space.conv_hidden_channels);
    s.channels.back() = 1;
    s.kernels.clear();
    for (std::size_t l = 0; l < layers; ++l) s.kernels.push_back(space.kernel_choices[pick_kernel(rng)]);
    if (seen.insert(s.kernels).second) out.push_back(s);
  }
  return out;
}

inline std::vector<TrialSpec> grid_trials(const ModelConfig& base, const TrainConfig& train_config,
                                          const GridSpace& space, std::uint64_t seed) {
  if (space.cardinality() == 0) throw ConfigError("grid is empty: every axis needs at least one value");
  auto nets = sample_summarization_nets(space, seed);
  std::vector<std::size_t> net_index;
  if (nets.empty()) net_index.push_back(SIZE_MAX);
  for (std::size_t i = 0; i < nets.size(); ++i) net_index.push_back(i);

  std::vector<TrialSpec> specs;
  for (double lr : space.learning_rates)
    for (auto K : space.mtl_layers)
      for (auto U : space.fms_units)
        for (auto e : space.embed_dims)
          for (double p : space.dropouts)
            for (auto n : net_index) {
              TrialSpec t{"", base, train_config};
              t.train.learning_rate = lr;
              t.model.mtl_layers = K;
              t.model.fms_units = U;
              for (auto& m : t.model.modalities) m.embed_dim = e;
              t.model.dropout = p;
              std::string s_label = "base";
              if (n != SIZE_MAX) {
                t.model.s1 = t.model.s2 = nets[n];
                s_label = "s" + std::to_string(n);
              }
              char buf[128];
              std::snprintf(buf, sizeof buf, "lr=%g K=%zu U=%zu e=%zu dropout=%g %s", lr, K, U, e, p,
                            s_label.c_str());
              t.label = buf;
              t.model.validate();
              t.train.validate();
              specs.push_back(seeded(t, seed));
            }
  return specs;
}

struct GridResult {
  std::vector<TrialResult> trials;
  std::size_t best = 0;  // lowest validation loss, first on ties
};

inline GridResult run_grid_search(const ModelConfig& base, const TrainConfig& train_config,
                                  const GridSpace& space, const DatasetSplit& split, std::uint64_t seed,
                                  std::size_t jobs = 1, const ProgressFn& progress = {}) {
  GridResult r;
  r.trials = run_trials(grid_trials(base, train_config, space, seed), split, jobs, progress);
  for (std::size_t i = 1; i < r.trials.size(); ++i)
    if (r.trials[i].validation_loss < r.trials[r.best].validation_loss) r.best = i;
  return r;
}

// ---------------------------------------------------------------------------
// Greedy factor search

struct GreedyRound {
  std::size_t round = 0;
  Factor chosen;
  double validation_loss = 0.0;
  std::vector<TrialResult> candidates;
};

struct GreedyResult {
  FactorSet factors;
  std::vector<GreedyRound> trace;
  std::vector<std::string> warnings;
};

// Stepwise addition: each round tries every unused factor on top of the
// current set and keeps the one with the lowest validation loss, stopping at
// the budget or when nothing improves. Modalities outside the chosen factors
// are simply not fed to the model.
inline GreedyResult greedy_factor_search(const ModelConfig& base, const TrainConfig& train_config,
                                         const DatasetSplit& split, std::size_t budget, std::uint64_t seed,
                                         std::size_t jobs = 1, const ProgressFn& progress = {}) {
  if (budget == 0) throw ConfigError("factor search budget must be at least 1");
  if (base.kind != ModelKind::fmt) throw ConfigError("factor search needs an FMT model config");
  GreedyResult r;
  const FactorSet all = enumerate_factors(base.modalities.size());
  if (budget > all.size()) {
    r.warnings.push_back("budget " + std::to_string(budget) + " exceeds " + std::to_string(all.size()) +
                         " possible factors; clamped");
    if (progress) progress("warning: " + r.warnings.back());
    budget = all.size();
  }
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t round = 0; round < budget; ++round) {
    std::vector<Factor> candidates;
    std::vector<TrialSpec> specs;
    for (auto f : all) {
      if (r.factors.contains(f)) continue;
      FactorSet trial_set;
      for (auto g : all)
        if (g == f || r.factors.contains(g)) trial_set.push_back(g);
      TrialSpec t{"+" + f.label(base.modality_names()), base, train_config};
      t.model.factors = trial_set;
      candidates.push_back(f);
      specs.push_back(seeded(t, seed));
    }
    if (specs.empty()) break;
    if (progress) progress("round " + std::to_string(round + 1) + ": " + std::to_string(specs.size()) + " candidates");
    auto results = run_trials(specs, split, jobs, progress);
    std::size_t pick = 0;
    for (std::size_t i = 1; i < results.size(); ++i)
      if (results[i].validation_loss < results[pick].validation_loss) pick = i;
    if (!(results[pick].validation_loss < best)) break;
    best = results[pick].validation_loss;
    FactorSet next;
    for (auto g : all)
      if (g == candidates[pick] || r.factors.contains(g)) next.push_back(g);
    r.factors = next;
    r.trace.push_back({round, candidates[pick], best, std::move(results)});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Gradient verification on a tiny model

// M=3 (input dims 2, 3, 4), e_M=4, U=2, K=2, all seven factors, three classes.
inline ModelConfig tiny_gradcheck_config(std::uint64_t seed = 1) {
  ModelConfig c;
  const auto names = default_modality_names(3);
  for (std::size_t m = 0; m < 3; ++m) c.modalities.push_back({names[m], 2 + m, 4});
  c.factors = enumerate_factors(3);
  c.fms_units = 2;
  c.mtl_layers = 2;
  c.d_y = 3;
  c.seed = seed;
  return c;
}

// Softmax cross-entropy on a B=2, T=5 batch with true lengths 5 and 3.
// `fault` doubles the backward pass of every matmul.
inline GradCheckResult tiny_gradcheck(const ModelConfig& config, const GradCheckOptions& options,
                                      bool fault = false) {
  constexpr std::size_t B = 2, T = 5;
  const std::size_t lengths[B] = {5, 3};
  FmtModel model(config);
  std::mt19937_64 rng(options.seed + 30);
  std::normal_distribution<double> unit(0.0, 1.0);
  MultimodalBatch batch;
  batch.mask.assign(B * T, 0);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t t = T - lengths[i]; t < T; ++t) batch.mask[i * T + t] = 1;
  for (const auto& m : config.modalities) {
    std::vector<double> v(B * T * m.input_dim, 0.0);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t t = T - lengths[i]; t < T; ++t)
        for (std::size_t d = 0; d < m.input_dim; ++d) v[(i * T + t) * m.input_dim + d] = unit(rng);
    batch.inputs.emplace_back(Shape{B, T, m.input_dim}, std::move(v));
  }
  std::vector<std::size_t> classes;
  for (std::size_t i = 0; i < B; ++i) classes.push_back((2 * i + 2) % config.d_y);
  batch.labels = Tensor::zeros({B, 1});
  auto loss = [&] { return softmax_cross_entropy(model.forward(batch), classes); };
  if (!fault) return grad_check(loss, model.parameters().all(), options);
  FaultInjectionScope scope(OpKind::matmul, 2.0);
  return grad_check(loss, model.parameters().all(), options);
}

}  // namespace fmtlab
