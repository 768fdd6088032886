// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <set>

#include "fmtlab/experiments.hpp"
#include "fmtlab/results.hpp"

using namespace fmtlab;

namespace {

Dataset small_dataset(SyntheticTask task, std::size_t n = 40, std::uint64_t seed = 3, std::size_t modalities = 3) {
  SyntheticTaskSpec s;
  s.task = task;
  s.num_samples = n;
  s.seq_len = 4;
  s.dims.assign(modalities, 2);
  s.seed = seed;
  return generate_synthetic(s);
}

ModelConfig base_for(const Dataset& ds) {
  ModelConfig c;
  for (const auto& m : ds.modalities) c.modalities.push_back({m.name, m.dim, 2});
  c.factors = enumerate_factors(ds.modalities.size());
  c.mtl_layers = 1;
  c.d_y = ds.d_y;
  return c;
}

TrainConfig quick_train(std::size_t epochs = 1) {
  TrainConfig t;
  t.learning_rate = 0.01;
  t.max_epochs = epochs;
  t.patience = epochs;
  t.batch_size = 16;
  return t;
}

std::vector<std::string> labels_of(const FmtModel& m) {
  std::vector<std::string> out;
  for (auto f : m.config().factors) out.push_back(f.label(m.config().modality_names()));
  return out;
}

std::vector<std::string> factor_labels(const ModelConfig& c) {
  std::vector<std::string> out;
  for (auto f : c.factors) out.push_back(f.label(c.modality_names()));
  return out;
}

}  // namespace

// --- ablation suite --------------------------------------------------------

TEST(Ablation, EightVariantsForThreeModalities) {
  auto base = base_for(small_dataset(SyntheticTask::trimodal_parity));
  auto v = ablation_variants(base);
  ASSERT_EQ(v.size(), 8u);
  std::vector<std::string> names;
  for (const auto& x : v) names.push_back(x.name);
  EXPECT_EQ(names, (std::vector<std::string>{"full", "UNI", "BI", "TRI", "L", "V", "A", "S"}));
  EXPECT_EQ(factor_labels(v[0].model).size(), 7u);
  EXPECT_EQ(factor_labels(v[1].model), (std::vector<std::string>{"LV", "LA", "VA", "LVA"}));
  EXPECT_EQ(factor_labels(v[2].model), (std::vector<std::string>{"L", "V", "A", "LVA"}));
  EXPECT_EQ(factor_labels(v[3].model), (std::vector<std::string>{"L", "V", "A", "LV", "LA", "VA"}));
  EXPECT_EQ(factor_labels(v[5].model), (std::vector<std::string>{"V"}));
  EXPECT_TRUE(v[7].model.summarize_by_addition);
  EXPECT_EQ(factor_labels(v[7].model).size(), 7u);
}

TEST(Ablation, TwoModalitiesKeepFactorSetForTriDrop) {
  auto base = base_for(small_dataset(SyntheticTask::bimodal_product, 40, 3, 2));
  auto v = ablation_variants(base);
  ASSERT_EQ(v.size(), 7u);
  EXPECT_EQ(v[3].model.factors, base.factors);
}

TEST(Ablation, SuiteRunsVariantMajorAndSummarizes) {
  auto ds = small_dataset(SyntheticTask::trimodal_parity);
  auto parts = split(ds, {0.6, 0.2, 0.2}, 1);
  auto r = run_ablation_suite(base_for(ds), quick_train(), parts, {4, 5});
  ASSERT_EQ(r.trials.size(), 16u);
  EXPECT_EQ(r.trials[0].label, "full");
  EXPECT_EQ(r.trials[0].model.seed, 4u);
  EXPECT_EQ(r.trials[1].model.seed, 5u);
  EXPECT_EQ(r.trials[15].label, "S");
  ASSERT_EQ(r.summary.size(), 8u);
  for (const auto& s : r.summary) {
    EXPECT_EQ(s.runs, 2u);
    EXPECT_GE(s.mean.at("Accuracy"), 0.0);
    EXPECT_LE(s.mean.at("Accuracy"), 1.0);
  }
  const auto& full = r.summary[0];
  const double a0 = r.trials[0].test_metrics.at("Accuracy"), a1 = r.trials[1].test_metrics.at("Accuracy");
  EXPECT_DOUBLE_EQ(full.mean.at("Accuracy"), (a0 + a1) / 2);
  EXPECT_DOUBLE_EQ(full.stddev.at("Accuracy"), std::abs(a0 - a1) / 2);
  EXPECT_THROW(run_ablation_suite(base_for(ds), quick_train(), parts, {}), ConfigError);
}

// --- sweeps ----------------------------------------------------------------

TEST(Sweep, FmsUnitsRowsAndAttentionCounts) {
  auto base = base_for(small_dataset(SyntheticTask::trimodal_parity));
  auto specs = sweep_trials(base, quick_train(), SweepAxis::fms_units, default_sweep_values(SweepAxis::fms_units));
  ASSERT_EQ(specs.size(), 6u);
  std::vector<std::size_t> attn;
  for (const auto& s : specs) attn.push_back(s.model.attentions_per_layer());
  EXPECT_EQ(attn, (std::vector<std::size_t>{7, 14, 21, 28, 35, 42}));
  EXPECT_EQ(specs[2].label, "fms-units=3");
}

TEST(Sweep, MtlLayersAndBaselineHeads) {
  auto base = base_for(small_dataset(SyntheticTask::trimodal_parity));
  auto k = sweep_trials(base, quick_train(), SweepAxis::mtl_layers, default_sweep_values(SweepAxis::mtl_layers));
  ASSERT_EQ(k.size(), 7u);
  EXPECT_EQ(k.front().model.mtl_layers, 2u);
  EXPECT_EQ(k.back().model.mtl_layers, 8u);
  auto h = sweep_trials(base, quick_train(), SweepAxis::baseline_heads,
                        default_sweep_values(SweepAxis::baseline_heads));
  ASSERT_EQ(h.size(), 10u);
  std::vector<std::size_t> heads;
  for (const auto& s : h) {
    EXPECT_EQ(s.model.kind, ModelKind::baseline_transformer);
    heads.push_back(s.model.attentions_per_layer());
  }
  EXPECT_EQ(heads, (std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7, 14, 21, 35}));
}

TEST(Sweep, RejectsEmptyOrZeroValues) {
  auto base = base_for(small_dataset(SyntheticTask::trimodal_parity));
  EXPECT_THROW(sweep_trials(base, quick_train(), SweepAxis::fms_units, {}), ConfigError);
  EXPECT_THROW(sweep_trials(base, quick_train(), SweepAxis::fms_units, {0}), ConfigError);
  EXPECT_THROW(parse_sweep_axis("heads"), ConfigError);
  EXPECT_EQ(parse_sweep_axis("baseline-heads"), SweepAxis::baseline_heads);
}

TEST(Sweep, RunsInDeclaredOrder) {
  auto ds = small_dataset(SyntheticTask::trimodal_parity);
  auto parts = split(ds, {0.6, 0.2, 0.2}, 1);
  auto rows = run_sweep(base_for(ds), quick_train(), SweepAxis::fms_units, parts, {2, 1});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].model.fms_units, 2u);
  EXPECT_EQ(rows[1].attentions_per_layer, 7u);
}

// --- trial runner ----------------------------------------------------------

TEST(Trials, ParallelMatchesSequentialBitwise) {
  auto ds = small_dataset(SyntheticTask::trimodal_parity);
  auto parts = split(ds, {0.6, 0.2, 0.2}, 1);
  auto specs = sweep_trials(base_for(ds), quick_train(2), SweepAxis::fms_units, {1, 2, 3, 1});
  auto one = run_trials(specs, parts, 1);
  auto three = run_trials(specs, parts, 3);
  ASSERT_EQ(one.size(), three.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    EXPECT_EQ(one[i].label, three[i].label);
    EXPECT_EQ(one[i].validation_loss, three[i].validation_loss);
    EXPECT_EQ(one[i].test_metrics, three[i].test_metrics);
  }
  EXPECT_EQ(one[0].validation_loss, one[3].validation_loss);
}

TEST(Trials, FailurePropagates) {
  auto ds = small_dataset(SyntheticTask::trimodal_parity);
  auto parts = split(ds, {0.6, 0.2, 0.2}, 1);
  auto specs = sweep_trials(base_for(ds), quick_train(), SweepAxis::fms_units, {1, 2});
  specs[1].train.max_epochs = 0;
  EXPECT_THROW(run_trials(specs, parts, 2), ConfigError);
}

// --- grid ------------------------------------------------------------------

TEST(Grid, DeclaredCardinality) {
  GridSpace g;
  EXPECT_EQ(g.cardinality(), 48u);
  auto base = base_for(small_dataset(SyntheticTask::trimodal_parity));
  auto specs = grid_trials(base, quick_train(), g, 0);
  EXPECT_EQ(specs.size(), 48u * 5u);
  std::set<std::string> labels;
  for (const auto& s : specs) labels.insert(s.label);
  EXPECT_EQ(labels.size(), specs.size());
  g.summarization_samples = 0;
  EXPECT_EQ(grid_trials(base, quick_train(), g, 0).size(), 48u);
}

TEST(Grid, SamplerDrawsDistinctSeededNets) {
  GridSpace g;
  auto a = sample_summarization_nets(g, 11);
  auto b = sample_summarization_nets(g, 11);
  ASSERT_EQ(a.size(), 5u);
  EXPECT_EQ(a, b);
  std::set<std::vector<std::size_t>> kernels;
  for (const auto& s : a) {
    kernels.insert(s.kernels);
    EXPECT_GE(s.kernels.size(), 1u);
    EXPECT_LE(s.kernels.size(), 3u);
    EXPECT_EQ(s.channels.back(), 1u);
    for (auto k : s.kernels) EXPECT_TRUE(k == 2 || k == 5 || k == 10 || k == 15 || k == 20);
    EXPECT_NO_THROW(s.validate("s"));
  }
  EXPECT_EQ(kernels.size(), 5u);
  bool differs = false;
  for (std::uint64_t seed = 0; seed < 10 && !differs; ++seed) differs = sample_summarization_nets(g, seed) != a;
  EXPECT_TRUE(differs);
}

TEST(Grid, EmptyGridIsAnError) {
  auto base = base_for(small_dataset(SyntheticTask::trimodal_parity));
  GridSpace g;
  g.dropouts.clear();
  EXPECT_THROW(grid_trials(base, quick_train(), g, 0), ConfigError);
  GridSpace h;
  h.conv_layer_choices = {1};
  h.kernel_choices = {2, 5};
  h.summarization_samples = 3;
  EXPECT_THROW(sample_summarization_nets(h, 0), ConfigError);
}

TEST(Grid, SelectsLowestValidationLoss) {
  auto ds = small_dataset(SyntheticTask::trimodal_parity);
  auto parts = split(ds, {0.6, 0.2, 0.2}, 1);
  GridSpace g;
  g.learning_rates = {0.01, 0.0001};
  g.mtl_layers = {1};
  g.fms_units = {1, 2};
  g.embed_dims = {2};
  g.dropouts = {0.0};
  g.summarization_samples = 0;
  auto r = run_grid_search(base_for(ds), quick_train(2), g, parts, 0);
  ASSERT_EQ(r.trials.size(), 4u);
  for (const auto& t : r.trials) EXPECT_GE(t.validation_loss, r.trials[r.best].validation_loss);
}

// --- greedy factor search --------------------------------------------------

TEST(Greedy, SingleModalityPicksLInOneRound) {
  auto ds = small_dataset(SyntheticTask::unimodal_sum, 40, 3, 1);
  auto parts = split(ds, {0.6, 0.2, 0.2}, 1);
  auto r = greedy_factor_search(base_for(ds), quick_train(), parts, 1, 0);
  ASSERT_EQ(r.trace.size(), 1u);
  EXPECT_EQ(r.factors.size(), 1u);
  EXPECT_EQ(r.factors[0].label({"L"}), "L");
  EXPECT_TRUE(r.warnings.empty());
}

TEST(Greedy, BudgetClampedWithWarning) {
  auto ds = small_dataset(SyntheticTask::unimodal_sum, 40, 3, 1);
  auto parts = split(ds, {0.6, 0.2, 0.2}, 1);
  auto r = greedy_factor_search(base_for(ds), quick_train(), parts, 5, 0);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("clamped"), std::string::npos);
  EXPECT_LE(r.trace.size(), 1u);
  EXPECT_THROW(greedy_factor_search(base_for(ds), quick_train(), parts, 0, 0), ConfigError);
}

TEST(Greedy, TraceWithinBudgetAndDuplicateFree) {
  auto ds = small_dataset(SyntheticTask::bimodal_product, 40, 3, 2);
  auto parts = split(ds, {0.6, 0.2, 0.2}, 1);
  auto r = greedy_factor_search(base_for(ds), quick_train(2), parts, 2, 0);
  EXPECT_GE(r.trace.size(), 1u);
  EXPECT_LE(r.trace.size(), 2u);
  EXPECT_EQ(r.factors.size(), r.trace.size());
  std::set<std::uint32_t> masks;
  for (const auto& round : r.trace) masks.insert(round.chosen.mask());
  EXPECT_EQ(masks.size(), r.trace.size());
  EXPECT_EQ(r.trace[0].candidates.size(), 3u);
  for (std::size_t i = 1; i < r.trace.size(); ++i)
    EXPECT_LT(r.trace[i].validation_loss, r.trace[i - 1].validation_loss);
  // The model for a chosen set only consumes the modalities its factors name.
  FmtModel m(r.trace[0].candidates[0].model);
  EXPECT_EQ(labels_of(m), (std::vector<std::string>{"L"}));
  EXPECT_EQ(m.config().active_modalities(), (std::vector<std::size_t>{0}));
}

// --- gradient verification -------------------------------------------------

TEST(Verification, TinyGradcheckCoversEveryCoordinate) {
  GradCheckOptions o;
  o.samples = 300;
  auto clean = tiny_gradcheck(tiny_gradcheck_config(), o);
  EXPECT_EQ(clean.coordinates_checked, 300u);
  EXPECT_LT(clean.max_relative_error, 1e-2);
  auto faulty = tiny_gradcheck(tiny_gradcheck_config(), o, true);
  EXPECT_GT(faulty.max_relative_error, 0.3);
}

// --- result files ----------------------------------------------------------

TEST(Results, CsvAndJsonAgree) {
  ResultTable t({"name", "count", "value"});
  t.add_row({"plain", 3, 0.1});
  t.add_row({"has,comma \"q\"", 0, -1.0 / 3.0});
  t.add_row({"nan", 1, std::nan("")});
  const auto rows = parse_csv(t.to_csv());
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"name", "count", "value"}));
  EXPECT_EQ(rows[2][0], "has,comma \"q\"");
  const auto j = nlohmann::json::parse(t.to_json().dump());
  ASSERT_EQ(j.at("rows").size(), 3u);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto& obj = j.at("rows")[r];
    EXPECT_EQ(obj.at("name").get<std::string>(), rows[r + 1][0]);
    EXPECT_EQ(obj.at("count").get<long>(), std::stol(rows[r + 1][1]));
    if (obj.at("value").is_string()) {
      EXPECT_EQ(obj.at("value").get<std::string>(), rows[r + 1][2]);
    } else {
      EXPECT_EQ(obj.at("value").get<double>(), std::strtod(rows[r + 1][2].c_str(), nullptr));
    }
  }
  EXPECT_EQ(std::strtod(rows[2][2].c_str(), nullptr), -1.0 / 3.0);
  EXPECT_THROW(t.add_row({"short"}), UsageError);
}

TEST(Results, TrialTableHasMetricColumns) {
  auto ds = small_dataset(SyntheticTask::trimodal_parity);
  auto parts = split(ds, {0.6, 0.2, 0.2}, 1);
  auto rows = run_sweep(base_for(ds), quick_train(), SweepAxis::fms_units, parts, {1});
  auto t = trial_table(rows);
  const auto& cols = t.columns();
  EXPECT_NE(std::find(cols.begin(), cols.end(), "Accuracy"), cols.end());
  EXPECT_NE(std::find(cols.begin(), cols.end(), "attentions_per_layer"), cols.end());
  EXPECT_EQ(t.size(), 1u);
}

TEST(Results, ConfigHashIsStableAndSensitive) {
  nlohmann::ordered_json a{{"x", 1}, {"y", 2.5}};
  nlohmann::ordered_json b{{"x", 1}, {"y", 2.5}};
  nlohmann::ordered_json c{{"x", 2}, {"y", 2.5}};
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_NE(config_hash(a), config_hash(c));
  EXPECT_EQ(config_hash(a).size(), 16u);
  EXPECT_EQ(output_stem("sweep", "abc", 7), "sweep_abc_s7");
}
