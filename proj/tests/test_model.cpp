// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "fixtures.hpp"
#include "fmtlab/grad_check.hpp"
#include "fmtlab/model.hpp"
#include "oracles.hpp"

using namespace fmtlab;
using fixtures::random_batch;
using fixtures::tiny_config;

namespace {

void fill(Tensor t, double v) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), v);
}

void fill_random(Tensor t, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.mutable_data()) v = n(rng);
}

void set_identity(Tensor t) {
  fill(t, 0.0);
  const std::size_t n = std::min(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < n; ++i) t.mutable_data()[i * t.dim(1) + i] = 1.0;
}

// Makes every summarization conv in the model pass its single channel through.
void make_summarization_identity(FmtModel& model) {
  for (auto& layer : model.mtl_layers()) {
    for (auto& unit : layer.units)
      for (auto& net : unit.s1) {
        ASSERT_EQ(net.kernels.size(), 1u);
        ASSERT_EQ(net.kernels[0].numel(), 1u) << "identity needs one input channel, k=1";
        fill(net.kernels[0], 1.0);
      }
    for (auto& net : layer.s2) {
      ASSERT_EQ(net.kernels[0].numel(), 1u);
      fill(net.kernels[0], 1.0);
    }
  }
}

oracle::Matrix rows_of(const Tensor& x, std::size_t b) {
  const std::size_t T = x.dim(1), e = x.dim(2);
  oracle::Matrix m(T, std::vector<double>(e));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < e; ++c) m[t][c] = x.data()[(b * T + t) * e + c];
  return m;
}

oracle::Matrix affine_rows(const oracle::Matrix& x, const Affine& a) {
  oracle::Matrix w(a.weight.dim(0), std::vector<double>(a.weight.dim(1)));
  for (std::size_t i = 0; i < w.size(); ++i)
    for (std::size_t j = 0; j < w[0].size(); ++j) w[i][j] = a.weight.data()[i * w[0].size() + j];
  auto y = oracle::matmul(x, w);
  if (a.bias)
    for (auto& row : y)
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += a.bias->data()[j];
  return y;
}

// Single-modality model whose only factor is {L}; e_M = d_M = width.
FmtModel single_modality_model(std::size_t width, std::size_t units = 1, std::size_t layers = 1,
                               std::uint64_t seed = 3) {
  ModelConfig c;
  c.modalities = {{"L", width, width}};
  c.factors = enumerate_factors(1);
  c.fms_units = units;
  c.mtl_layers = layers;
  c.seed = seed;
  return FmtModel(c);
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

// --- embed -----------------------------------------------------------------

TEST(Embed, ZeroInputGivesPositionalRows) {
  auto c = tiny_config();
  FmtModel model(c);
  std::mt19937_64 rng(1);
  auto batch = random_batch(c, 2, 4, rng);
  for (auto& x : batch.inputs) fill(x, 0.0);
  auto e = model.embed(batch);
  const std::size_t ex = c.e_x();
  for (std::size_t t = 0; t < 4; ++t) {
    std::size_t off = 0;
    for (const auto& m : c.modalities) {
      std::vector<double> row(m.embed_dim);
      positional_row(static_cast<double>(t), m.embed_dim, row.data());
      for (std::size_t j = 0; j < m.embed_dim; ++j) EXPECT_DOUBLE_EQ(e.data()[t * ex + off + j], row[j]);
      off += m.embed_dim;
    }
  }
  // Row 0 of a sinusoidal table alternates sin 0 / cos 0.
  EXPECT_EQ(e.data()[0], 0.0);
  EXPECT_EQ(e.data()[1], 1.0);
}

TEST(Embed, IdentityWeightsWithoutPositionsReturnInput) {
  ModelConfig c;
  c.modalities = {{"L", 3, 3}, {"V", 2, 2}};
  c.factors = enumerate_factors(2);
  c.positional_encoding = false;
  FmtModel model(c);
  for (const auto& e : model.embeddings()) set_identity(e.weight);
  std::mt19937_64 rng(2);
  auto batch = random_batch(c, 2, 5, rng);
  auto y = model.embed(batch);
  auto expect = concat_lastdim({batch.inputs[0], batch.inputs[1]});
  EXPECT_EQ(y.values(), expect.values());
}

TEST(Embed, ShapeArithmetic) {
  ModelConfig c;
  c.modalities = {{"L", 5, 20}, {"V", 3, 20}, {"A", 2, 20}};
  c.factors = enumerate_factors(3);
  c.mtl_layers = 0;
  FmtModel model(c);
  std::mt19937_64 rng(3);
  auto y = model.embed(random_batch(c, 2, 6, rng));
  EXPECT_EQ(y.shape(), (Shape{2, 6, 60}));
}

TEST(Embed, DimensionMismatchNamesModality) {
  auto c = tiny_config();
  FmtModel model(c);
  std::mt19937_64 rng(4);
  auto wrong = c;
  wrong.modalities[1].input_dim += 1;
  auto batch = random_batch(wrong, 2, 3, rng);
  try {
    model.embed(batch);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("modality V"), std::string::npos) << e.what();
  }
}

// --- factor attention ------------------------------------------------------

TEST(FactorAttention, SinglePositionIsNormOfValuePlusInput) {
  auto model = single_modality_model(3);
  const auto& attn = model.mtl_layers()[0].units[0].attentions[0];
  std::mt19937_64 rng(5);
  fill_random(*attn.value.bias, rng);
  Tensor x({2, 1, 3}, {0.3, -1.0, 2.0, 1.5, 0.2, -0.7});
  auto y = factor_attention(x, attn, model.layout(), {});
  for (std::size_t b = 0; b < 2; ++b) {
    auto xr = rows_of(x, b);
    auto v = affine_rows(xr, attn.value);
    std::vector<double> pre(3);
    for (std::size_t c = 0; c < 3; ++c) pre[c] = v[0][c] + xr[0][c];
    auto want = oracle::layer_norm(pre);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(y.data()[b * 3 + c], want[c], 1e-12);
  }
}

TEST(FactorAttention, ZeroQueryAndKeyAverageValues) {
  auto model = single_modality_model(2);
  const auto& attn = model.mtl_layers()[0].units[0].attentions[0];
  fill(attn.query.weight, 0.0);
  fill(attn.key.weight, 0.0);
  std::mt19937_64 rng(6);
  fill_random(*attn.query.bias, rng);  // Q = b_Q, K = 0: scores still all zero
  const std::size_t T = 4;
  Tensor x({1, T, 2}, {1, 2, -3, 0.5, 4, 4, 0.25, -1});
  std::vector<std::uint8_t> keep{0, 1, 1, 1};
  x.mutable_data()[0] = x.mutable_data()[1] = 0.0;
  auto y = factor_attention(x, attn, model.layout(), keep);
  auto xr = rows_of(x, 0);
  auto v = affine_rows(xr, attn.value);
  std::vector<double> avg(2, 0.0);
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t c = 0; c < 2; ++c) avg[c] += v[t][c] / 3.0;
  for (std::size_t t = 1; t < T; ++t) {
    std::vector<double> pre{avg[0] + xr[t][0], avg[1] + xr[t][1]};
    auto want = oracle::layer_norm(pre);
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(y.data()[t * 2 + c], want[c], 1e-12);
  }
}

TEST(FactorAttention, MatchesNaiveLoopOracle) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    ModelConfig c;
    c.modalities = {{"L", 1, 1}, {"V", 3, 1}, {"A", 2, 2}};
    c.factors = enumerate_factors(3);
    c.seed = static_cast<std::uint64_t>(trial);
    FmtModel model(c);
    const auto& unit = model.mtl_layers()[0].units[0];
    for (const auto& attn : unit.attentions) {
      fill_random(*attn.query.bias, rng);
      fill_random(*attn.value.bias, rng);
    }
    const std::size_t B = 2, T = 3;
    Tensor x({B, T, 4}, std::vector<double>(B * T * 4));
    fill_random(x, rng);
    std::vector<std::uint8_t> keep{1, 1, 1, 0, 1, 1};
    // Factor LV has e_f = 2 (L and V are one wide each).
    for (const auto& attn : unit.attentions) {
      auto y = factor_attention(x, attn, model.layout(), keep);
      ASSERT_EQ(y.dim(2), attn.width);
      for (std::size_t b = 0; b < B; ++b) {
        auto xr = rows_of(x, b);
        oracle::Matrix xf(T);
        for (std::size_t t = 0; t < T; ++t)
          for (auto m : attn.members)
            for (std::size_t j = 0; j < model.layout().width[m]; ++j)
              xf[t].push_back(xr[t][model.layout().offset[m] + j]);
        std::vector<bool> kb{keep[b * T] != 0, keep[b * T + 1] != 0, keep[b * T + 2] != 0};
        auto att = oracle::attention(affine_rows(xf, attn.query), affine_rows(xf, attn.key),
                                     affine_rows(xf, attn.value), kb);
        for (std::size_t t = 0; t < T; ++t) {
          std::vector<double> pre(attn.width);
          for (std::size_t j = 0; j < attn.width; ++j) pre[j] = att[t][j] + xf[t][j];
          auto want = oracle::layer_norm(pre);
          for (std::size_t j = 0; j < attn.width; ++j)
            EXPECT_NEAR(y.data()[(b * T + t) * attn.width + j], want[j], 1e-10);
        }
      }
    }
  }
}

TEST(FactorAttention, AllPadSequenceIsDegenerate) {
  auto model = single_modality_model(2);
  const auto& attn = model.mtl_layers()[0].units[0].attentions[0];
  std::vector<std::uint8_t> keep{1, 1, 0, 0};
  EXPECT_THROW(factor_attention(Tensor::zeros({2, 2, 2}), attn, model.layout(), keep), NumericError);
}

// --- FMS -------------------------------------------------------------------

TEST(Fms, SingleFactorWithIdentitySummarizationIsAttention) {
  auto model = single_modality_model(3);
  make_summarization_identity(model);
  const auto& unit = model.mtl_layers()[0].units[0];
  std::mt19937_64 rng(8);
  Tensor x({2, 4, 3}, std::vector<double>(24));
  fill_random(x, rng);
  auto y = fms_forward(x, unit, model.layout(), {});
  auto want = factor_attention(x, unit.attentions[0], model.layout(), {});
  EXPECT_EQ(y.values(), want.values());
}

TEST(Fms, FullSetShape) {
  auto c = tiny_config();
  FmtModel model(c);
  std::mt19937_64 rng(9);
  Tensor x({2, 5, c.e_x()}, std::vector<double>(2 * 5 * c.e_x()));
  fill_random(x, rng);
  auto y = fms_forward(x, model.mtl_layers()[0].units[0], model.layout(), {});
  EXPECT_EQ(y.shape(), (Shape{2, 5, 12}));
}

TEST(Fms, AdditiveSummarizationIsHandSum) {
  auto c = apply_factor_ablation(tiny_config(), FactorAblation::additive());
  FmtModel model(c);
  const auto& layout = model.layout();
  const auto& unit = model.mtl_layers()[0].units[0];
  std::mt19937_64 rng(10);
  Tensor x({2, 3, c.e_x()}, std::vector<double>(2 * 3 * c.e_x()));
  fill_random(x, rng);
  auto y = fms_forward(x, unit, layout, {});
  std::vector<Tensor> outs;
  for (const auto& attn : unit.attentions) outs.push_back(factor_attention(x, attn, layout, {}));
  const std::size_t rows = 6, ex = c.e_x();
  for (std::size_t m = 0; m < 3; ++m) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < 4; ++j) {
        double want = 0.0;
        std::size_t contributors = 0;
        for (std::size_t f = 0; f < outs.size(); ++f) {
          const auto& attn = unit.attentions[f];
          if (!attn.factor.contains(m)) continue;
          std::size_t local = 0;
          for (auto mm : attn.members) {
            if (mm == m) break;
            local += 4;
          }
          want += outs[f].data()[r * attn.width + local + j];
          ++contributors;
        }
        EXPECT_EQ(contributors, 4u);
        EXPECT_NEAR(y.data()[r * ex + layout.offset[m] + j], want, 1e-12);
      }
    }
  }
}

TEST(Fms, SliceConsistencyForUnimodalFactors) {
  auto c = tiny_config();
  c.factors = FactorSet({Factor(0b001), Factor(0b010), Factor(0b100)});
  FmtModel model(c);
  std::mt19937_64 rng(11);
  const std::size_t ex = c.e_x();
  Tensor x({2, 4, ex}, std::vector<double>(8 * ex));
  fill_random(x, rng);
  auto y0 = fms_forward(x, model.mtl_layers()[0].units[0], model.layout(), {});
  Tensor x2 = x.clone();
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t j = 4; j < 8; ++j) x2.mutable_data()[r * ex + j] += 0.5 + static_cast<double>(j);
  auto y1 = fms_forward(x2, model.mtl_layers()[0].units[0], model.layout(), {});
  bool v_changed = false;
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t j = 0; j < ex; ++j) {
      const double a = y0.data()[r * ex + j], b = y1.data()[r * ex + j];
      if (j >= 4 && j < 8) {
        v_changed = v_changed || a != b;
      } else {
        EXPECT_EQ(a, b) << "row " << r << " col " << j;
      }
    }
  }
  EXPECT_TRUE(v_changed);
}

// --- MTL -------------------------------------------------------------------

TEST(Mtl, SingleUnitCollapse) {
  auto model = single_modality_model(3, 1, 1);
  make_summarization_identity(model);
  const auto& layer = model.mtl_layers()[0];
  std::mt19937_64 rng(12);
  Tensor x({2, 3, 3}, std::vector<double>(18));
  fill_random(x, rng);
  auto y = mtl_forward(x, layer, model.layout(), {});
  auto u = fms_forward(x, layer.units[0], model.layout(), {});
  auto want = layer.ffn_norm(add(layer.ffn(u), u));
  EXPECT_EQ(y.values(), want.values());
}

TEST(Mtl, SixUnitsRunFortyTwoAttentions) {
  auto c = tiny_config(3, 2, 6, 1);
  FmtModel model(c);
  EXPECT_EQ(c.attentions_per_layer(), 42u);
  std::mt19937_64 rng(13);
  Tensor x({1, 3, c.e_x()}, std::vector<double>(3 * c.e_x()));
  fill_random(x, rng);
  reset_attention_count();
  mtl_forward(x, model.mtl_layers()[0], model.layout(), {});
  EXPECT_EQ(attention_count(), 42u);
}

TEST(Mtl, ShapePreservedForUnitCounts) {
  std::mt19937_64 rng(14);
  for (std::size_t u = 1; u <= 6; ++u) {
    auto c = tiny_config(3, 2, u, 1);
    FmtModel model(c);
    Tensor x({2, 3, c.e_x()}, std::vector<double>(6 * c.e_x()));
    fill_random(x, rng);
    reset_attention_count();
    auto y = mtl_forward(x, model.mtl_layers()[0], model.layout(), {});
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_EQ(attention_count(), 7 * u);
  }
}

TEST(Mtl, WideKernelsAndDeepSummarization) {
  auto c = tiny_config(3, 4, 2, 1);
  c.s1 = {{4, 2, 1}, {20, 5, 2}};
  c.s2 = {{3, 1}, {15, 10}};
  FmtModel model(c);
  std::mt19937_64 rng(15);
  auto y = model.forward(random_batch(c, 2, 4, rng, {4, 2}));
  EXPECT_EQ(y.shape(), (Shape{2, 3}));
  for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
}

// --- full forward ----------------------------------------------------------

TEST(Forward, EmptyStackStillPredicts) {
  auto c = tiny_config(3, 4, 1, 0, 2);
  FmtModel model(c);
  std::mt19937_64 rng(16);
  EXPECT_EQ(model.forward(random_batch(c, 3, 4, rng)).shape(), (Shape{3, 2}));
}

TEST(Forward, SingleSampleRegression) {
  auto c = tiny_config(3, 4, 1, 1, 1);
  FmtModel model(c);
  std::mt19937_64 rng(17);
  EXPECT_EQ(model.forward(random_batch(c, 1, 4, rng)).shape(), (Shape{1, 1}));
}

TEST(Forward, TinyConfigIsFinite) {
  auto c = tiny_config();
  FmtModel model(c);
  std::mt19937_64 rng(18);
  auto y = fmt_forward(random_batch(c, 2, 5, rng, {5, 3}), model);
  EXPECT_EQ(y.shape(), (Shape{2, 3}));
  for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, NonFiniteActivationNamesLayer) {
  auto c = tiny_config(3, 4, 1, 2);
  FmtModel model(c);
  auto& w = model.parameters().at("mtl.1.ffn.b2");
  w.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  std::mt19937_64 rng(19);
  try {
    model.forward(random_batch(c, 2, 3, rng));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
  }
}

TEST(Forward, SeedDeterminesModelBitwise) {
  auto c = tiny_config();
  FmtModel a(c), b(c);
  std::mt19937_64 r1(20), r2(20);
  EXPECT_EQ(a.forward(random_batch(c, 2, 4, r1)).values(), b.forward(random_batch(c, 2, 4, r2)).values());
  auto other = c;
  other.seed = 2;
  EXPECT_NE(a.parameters().snapshot(), FmtModel(other).parameters().snapshot());
}

TEST(Forward, DropoutOnlyInTraining) {
  auto c = tiny_config();
  c.dropout = 0.1;
  FmtModel model(c);
  std::mt19937_64 rng(21);
  auto batch = random_batch(c, 2, 4, rng);
  auto eval1 = model.forward(batch).values();
  EXPECT_EQ(eval1, model.forward(batch).values());
  std::mt19937_64 drop(5);
  EXPECT_NE(eval1, model.forward(batch, {true, &drop}).values());
  EXPECT_THROW(model.forward(batch, {true, nullptr}), UsageError);
}

TEST(Forward, ParameterNamesAreUniqueAndOrdered) {
  FmtModel model(tiny_config());
  const auto& params = model.parameters().all();
  std::set<std::string> names;
  for (const auto& p : params) names.insert(p.name);
  EXPECT_EQ(names.size(), params.size());
  EXPECT_EQ(params.front().name, "embed.L.W");
  EXPECT_TRUE(model.parameters().contains("mtl.0.fms.1.attn.LVA.W_Q"));
  EXPECT_TRUE(model.parameters().contains("mtl.1.s2.A.conv0.W"));
  EXPECT_FALSE(model.parameters().contains("mtl.0.fms.0.attn.L.b_K"));
}

// --- GRU -------------------------------------------------------------------

TEST(Gru, ZeroParametersHalveState) {
  auto c = tiny_config(3, 4, 1, 0);
  FmtModel model(c);
  for (auto& p : model.parameters().all())
    if (p.name.rfind("gru.", 0) == 0) fill(p.tensor, 0.0);
  Tensor h({2, 12}, std::vector<double>(24));
  std::mt19937_64 rng(22);
  fill_random(h, rng);
  Tensor x({2, 12}, std::vector<double>(24));
  fill_random(x, rng);
  auto h1 = gru_step(h, x, model.gru());
  for (std::size_t i = 0; i < 24; ++i) EXPECT_DOUBLE_EQ(h1.data()[i], 0.5 * h.data()[i]);
  auto h0 = gru_step(Tensor::zeros({2, 12}), Tensor::zeros({2, 12}), model.gru());
  for (double v : h0.data()) EXPECT_EQ(v, 0.0);
}

TEST(Gru, MatchesGateFormulas) {
  auto c = tiny_config(2, 2, 1, 0);
  c.h_gru = 3;
  FmtModel model(c);
  std::mt19937_64 rng(23);
  for (auto& p : model.parameters().all())
    if (p.name.rfind("gru.", 0) == 0) fill_random(p.tensor, rng, 0.7);
  const auto& g = model.gru();
  const std::size_t ex = 4, hg = 3;
  Tensor h({1, hg}, {0.2, -0.4, 0.9});
  Tensor x({1, ex}, {1.0, -0.5, 0.25, 2.0});
  auto out = gru_step(h, x, g);
  auto W = [&](const Tensor& t, std::size_t i, std::size_t j) { return t.data()[i * t.dim(1) + j]; };
  std::vector<double> z(hg), r(hg), cand(hg);
  for (std::size_t j = 0; j < hg; ++j) {
    double az = g.input_update.bias->data()[j], ar = g.input_reset.bias->data()[j];
    for (std::size_t i = 0; i < ex; ++i) {
      az += x.data()[i] * W(g.input_update.weight, i, j);
      ar += x.data()[i] * W(g.input_reset.weight, i, j);
    }
    for (std::size_t i = 0; i < hg; ++i) {
      az += h.data()[i] * W(g.hidden_update, i, j);
      ar += h.data()[i] * W(g.hidden_reset, i, j);
    }
    z[j] = oracle::sigmoid(az);
    r[j] = oracle::sigmoid(ar);
  }
  for (std::size_t j = 0; j < hg; ++j) {
    double ac = g.input_candidate.bias->data()[j];
    for (std::size_t i = 0; i < ex; ++i) ac += x.data()[i] * W(g.input_candidate.weight, i, j);
    for (std::size_t i = 0; i < hg; ++i) ac += r[i] * h.data()[i] * W(g.hidden_candidate, i, j);
    cand[j] = std::tanh(ac);
  }
  for (std::size_t j = 0; j < hg; ++j)
    EXPECT_NEAR(out.data()[j], (1 - z[j]) * h.data()[j] + z[j] * cand[j], 1e-12);
}

// --- ablations -------------------------------------------------------------

TEST(Ablation, DropTrimodalLeavesSix) {
  auto c = apply_factor_ablation(tiny_config(), FactorAblation::drop_trimodal());
  std::vector<std::string> labels;
  for (auto f : c.factors) labels.push_back(f.label(c.modality_names()));
  EXPECT_EQ(labels, (std::vector<std::string>{"L", "V", "A", "LV", "LA", "VA"}));
}

TEST(Ablation, OnlyLanguageExcludesOtherEmbeddings) {
  auto c = apply_factor_ablation(tiny_config(), FactorAblation::only(0));
  ASSERT_EQ(c.factors.size(), 1u);
  EXPECT_EQ(c.active_modalities(), (std::vector<std::size_t>{0}));
  EXPECT_EQ(c.e_x(), 4u);
  FmtModel model(c);
  EXPECT_TRUE(model.parameters().contains("embed.L.W"));
  EXPECT_FALSE(model.parameters().contains("embed.V.W"));
  std::mt19937_64 rng(24);
  EXPECT_EQ(model.forward(random_batch(c, 2, 3, rng)).shape(), (Shape{2, 3}));
}

TEST(Ablation, ExhaustingFactorsIsAnError) {
  auto two = tiny_config(2);
  auto c = apply_factor_ablation(two, FactorAblation::drop_unimodal());
  EXPECT_THROW(apply_factor_ablation(c, FactorAblation::drop_bimodal()), ConfigError);
  auto three = apply_factor_ablation(tiny_config(), FactorAblation::drop_trimodal());
  three = apply_factor_ablation(three, FactorAblation::drop_unimodal());
  EXPECT_THROW(apply_factor_ablation(three, FactorAblation::drop_bimodal()), ConfigError);
  EXPECT_THROW(apply_factor_ablation(tiny_config(), FactorAblation::only(3)), ConfigError);
}

// --- baseline transformer --------------------------------------------------

TEST(Baseline, SingleHeadIsOneAttentionLayer) {
  auto c = tiny_config(2, 2, 1, 1, 1);
  c.kind = ModelKind::baseline_transformer;
  c.heads = 1;
  FmtModel model(c);
  std::mt19937_64 rng(25);
  Tensor x({1, 3, 4}, std::vector<double>(12));
  fill_random(x, rng);
  const auto& p = model.parameters();
  auto affine = [&](const std::string& w, const std::string& b) {
    Affine a{p.at(w), std::nullopt};
    if (!b.empty()) a.bias = p.at(b);
    return a;
  };
  auto xr = rows_of(x, 0);
  auto att = oracle::attention(affine_rows(xr, affine("otf.0.head.0.W_Q", "otf.0.head.0.b_Q")),
                               affine_rows(xr, affine("otf.0.head.0.W_K", "")),
                               affine_rows(xr, affine("otf.0.head.0.W_V", "otf.0.head.0.b_V")));
  auto mixed = affine_rows(att, affine("otf.0.mix.W", "otf.0.mix.b"));
  oracle::Matrix y1(3);
  for (std::size_t t = 0; t < 3; ++t) {
    std::vector<double> pre(4);
    for (std::size_t j = 0; j < 4; ++j) pre[j] = mixed[t][j] + xr[t][j];
    y1[t] = oracle::layer_norm(pre);
  }
  auto hid = affine_rows(y1, affine("otf.0.ffn.W1", "otf.0.ffn.b1"));
  for (auto& row : hid)
    for (auto& v : row) v = std::max(0.0, v);
  auto ff = affine_rows(hid, affine("otf.0.ffn.W2", "otf.0.ffn.b2"));
  reset_attention_count();
  auto y = baseline_layer_forward(x, model.baseline_layers()[0], {});
  EXPECT_EQ(attention_count(), 1u);
  for (std::size_t t = 0; t < 3; ++t) {
    std::vector<double> pre(4);
    for (std::size_t j = 0; j < 4; ++j) pre[j] = ff[t][j] + y1[t][j];
    auto want = oracle::layer_norm(pre);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y.data()[t * 4 + j], want[j], 1e-10);
  }
}

TEST(Baseline, HeadSweepIsExpressible) {
  std::mt19937_64 rng(26);
  for (std::size_t h : {1, 2, 3, 4, 5, 6, 7, 14, 21, 35}) {
    auto c = tiny_config(3, 2, 1, 1, 2);
    c.kind = ModelKind::baseline_transformer;
    c.heads = h;
    FmtModel model(c);
    EXPECT_EQ(c.attentions_per_layer(), h);
    reset_attention_count();
    EXPECT_EQ(model.forward(random_batch(c, 2, 3, rng)).shape(), (Shape{2, 2}));
    EXPECT_EQ(attention_count(), h);
  }
}

// --- invariants ------------------------------------------------------------

TEST(Invariants, AttentionRowsAreNormalized) {
  std::mt19937_64 rng(27);
  std::uniform_int_distribution<std::size_t> len(1, 6);
  std::size_t observed = 0;
  AttentionObserver check = [&](const Tensor& w, std::span<const std::uint8_t> keep) {
    const std::size_t B = w.dim(0), T = w.dim(1);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < T; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          const double v = w.data()[(b * T + i) * T + j];
          if (!keep.empty() && !keep[b * T + j]) {
            EXPECT_EQ(v, 0.0);
          }
          s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    ++observed;
  };
  AttentionObserverScope scope(check);
  for (int trial = 0; trial < 100; ++trial) {
    auto c = tiny_config(3, 2, 1, 1, 1, static_cast<std::uint64_t>(trial));
    FmtModel model(c);
    model.forward(random_batch(c, 2, 6, rng, {len(rng), len(rng)}));
  }
  EXPECT_EQ(observed, 700u);
}

TEST(Invariants, TimePermutationEquivariance) {
  std::mt19937_64 rng(28);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    auto c = tiny_config(3, 2, 2, 2, 1, static_cast<std::uint64_t>(trial));
    c.positional_encoding = false;
    FmtModel model(c);
    const std::size_t B = 2, T = 5;
    auto batch = random_batch(c, B, T, rng);
    std::vector<std::size_t> perm(T);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto permuted = batch;
    for (std::size_t m = 0; m < batch.inputs.size(); ++m) {
      const std::size_t d = batch.inputs[m].dim(2);
      std::vector<double> v(B * T * d);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
          std::copy_n(batch.inputs[m].data().data() + (b * T + perm[t]) * d, d, v.data() + (b * T + t) * d);
      permuted.inputs[m] = Tensor(batch.inputs[m].shape(), v);
    }
    auto y = model.encode(batch);
    auto yp = model.encode(permuted);
    const std::size_t ex = c.e_x();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t)
        worst = std::max(worst, max_abs_diff(yp.data().subspan((b * T + t) * ex, ex),
                                             y.data().subspan((b * T + perm[t]) * ex, ex)));
  }
  EXPECT_LT(worst, 1e-8);
}

TEST(Invariants, LeftPaddingInvariance) {
  std::mt19937_64 rng(29);
  std::uniform_int_distribution<std::size_t> len(1, 5), extra(1, 3);
  double worst_enc = 0.0, worst_pred = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    auto c = tiny_config(3, 2, 2, 2, 2, static_cast<std::uint64_t>(trial));
    FmtModel model(c);
    const std::size_t B = 2, T = 5, P = extra(rng);
    std::vector<std::size_t> lengths{len(rng), len(rng)};
    auto batch = random_batch(c, B, T, rng, lengths);
    auto longer = batch;
    longer.mask.assign(B * (T + P), 0);
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(batch.mask.data() + b * T, T, longer.mask.data() + b * (T + P) + P);
    for (std::size_t m = 0; m < batch.inputs.size(); ++m) {
      const std::size_t d = batch.inputs[m].dim(2);
      std::vector<double> v(B * (T + P) * d, 0.0);
      for (std::size_t b = 0; b < B; ++b)
        std::copy_n(batch.inputs[m].data().data() + b * T * d, T * d, v.data() + (b * (T + P) + P) * d);
      longer.inputs[m] = Tensor({B, T + P, d}, v);
    }
    auto y = model.encode(batch);
    auto yl = model.encode(longer);
    const std::size_t ex = c.e_x();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = T - lengths[b]; t < T; ++t)
        worst_enc = std::max(worst_enc, max_abs_diff(y.data().subspan((b * T + t) * ex, ex),
                                                     yl.data().subspan((b * (T + P) + P + t) * ex, ex)));
    worst_pred = std::max(worst_pred, max_abs_diff(model.forward(batch).data(), model.forward(longer).data()));
  }
  EXPECT_LT(worst_enc, 1e-8);
  EXPECT_LT(worst_pred, 1e-8);
}

// Every coordinate, three random instances. Central differences at eps=1e-5
// carry roughly ulp(loss)/(2 eps) ~ 1e-11 of roundoff, so coordinates whose
// gradient is near zero are judged on an absolute 1e-10 floor instead.
TEST(Invariants, TinyConfigGradientCheck) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto c = tiny_config(3, 4, 2, 2, 3, seed);
    FmtModel model(c);
    std::mt19937_64 rng(30 + seed);
    auto batch = random_batch(c, 2, 5, rng, {5, 3});
    std::vector<std::size_t> classes{2, static_cast<std::size_t>(seed % 3)};
    auto loss = [&] { return softmax_cross_entropy(model.forward(batch), classes); };
    model.parameters().zero_grad();
    loss().backward();
    std::size_t checked = 0;
    for (auto& p : model.parameters().all()) {
      const std::vector<double> analytic = p.tensor.node()->grad;
      auto w = p.tensor.mutable_data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double orig = w[i];
        w[i] = orig + 1e-5;
        const double up = loss().item();
        w[i] = orig - 1e-5;
        const double down = loss().item();
        w[i] = orig;
        const double numeric = (up - down) / 2e-5;
        const double a = analytic[i];
        EXPECT_LE(std::abs(a - numeric), 1e-4 * (std::abs(a) + std::abs(numeric)) + 1e-10)
            << p.name << "[" << i << "] analytic " << a << " numeric " << numeric << " seed " << seed;
        ++checked;
      }
    }
    EXPECT_EQ(checked, model.parameters().total_values());
  }
}
