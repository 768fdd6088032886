// SPDX-License-Identifier: Apache-2.0
#pragma once

// Evaluation measures for continuous sentiment-style labels and for
// binary / categorical tasks.
//
// Binary accuracy and F1 come in two variants:
//   nonneg: negative (< 0) vs non-negative (>= 0), over all samples;
//   posneg: negative vs positive (> 0), samples with label exactly 0 dropped.
// F1 is the support-weighted mean of per-class F1.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fmtlab/error.hpp"

namespace fmtlab {

// Metric name → value. Ordered by name for stable output.
using MetricsReport = std::map<std::string, double>;

namespace detail {

inline void require_pairs(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(what) + ": " + std::to_string(a.size()) + " predictions vs " +
                         std::to_string(b.size()) + " labels");
  }
}

}  // namespace detail

inline double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth) {
  if (predicted.size() != truth.size()) throw DimensionError("accuracy: size mismatch");
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

// Support-weighted F1 over the classes present in `truth`.
inline double weighted_f1(std::span<const std::size_t> predicted, std::span<const std::size_t> truth) {
  if (predicted.size() != truth.size()) throw DimensionError("f1: size mismatch");
  if (truth.empty()) return 0.0;
  std::map<std::size_t, std::size_t> support, tp, fp, fn;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++support[truth[i]];
    if (predicted[i] == truth[i]) {
      ++tp[truth[i]];
    } else {
      ++fp[predicted[i]];
      ++fn[truth[i]];
    }
  }
  double total = 0.0;
  for (auto [cls, n] : support) {
    const double p = static_cast<double>(tp[cls]);
    const double denom = 2.0 * p + static_cast<double>(fp[cls]) + static_cast<double>(fn[cls]);
    const double f1 = denom > 0.0 ? 2.0 * p / denom : 0.0;
    total += f1 * static_cast<double>(n);
  }
  return total / static_cast<double>(truth.size());
}

namespace detail {

template <typename Pred>
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> binarize(
    std::span<const double> preds, std::span<const double> labels, bool drop_zero_labels, Pred positive) {
  std::vector<std::size_t> p, t;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (drop_zero_labels && labels[i] == 0.0) continue;
    p.push_back(positive(preds[i]) ? 1 : 0);
    t.push_back(positive(labels[i]) ? 1 : 0);
  }
  return {p, t};
}

}  // namespace detail

inline double ba_nonneg(std::span<const double> preds, std::span<const double> labels) {
  detail::require_pairs(preds, labels, "ba_nonneg");
  auto [p, t] = detail::binarize(preds, labels, false, [](double v) { return v >= 0.0; });
  return accuracy(p, t);
}

inline double ba_posneg(std::span<const double> preds, std::span<const double> labels) {
  detail::require_pairs(preds, labels, "ba_posneg");
  auto [p, t] = detail::binarize(preds, labels, true, [](double v) { return v > 0.0; });
  return accuracy(p, t);
}

inline double f1_nonneg(std::span<const double> preds, std::span<const double> labels) {
  detail::require_pairs(preds, labels, "f1_nonneg");
  auto [p, t] = detail::binarize(preds, labels, false, [](double v) { return v >= 0.0; });
  return weighted_f1(p, t);
}

inline double f1_posneg(std::span<const double> preds, std::span<const double> labels) {
  detail::require_pairs(preds, labels, "f1_posneg");
  auto [p, t] = detail::binarize(preds, labels, true, [](double v) { return v > 0.0; });
  return weighted_f1(p, t);
}

inline double mae(std::span<const double> preds, std::span<const double> labels) {
  detail::require_pairs(preds, labels, "mae");
  if (labels.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) s += std::abs(preds[i] - labels[i]);
  return s / static_cast<double>(labels.size());
}

// Pearson correlation; 0 when either side has zero variance.
inline double pearson_corr(std::span<const double> x, std::span<const double> y) {
  detail::require_pairs(x, y, "pearson_corr");
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Bucket of `value` among k equal-width bins over [-3, 3]. Interior edges
// belong to the upper bin; values outside the range clamp to the end bins.
inline std::size_t multiclass_bucket(double value, std::size_t k) {
  if (k == 0) throw ConfigError("multiclass bucket count must be positive");
  auto edge = [k](std::size_t i) { return -3.0 + 6.0 * static_cast<double>(i) / static_cast<double>(k); };
  const double scaled = (value + 3.0) * static_cast<double>(k) / 6.0;
  auto idx = static_cast<std::ptrdiff_t>(std::floor(scaled));
  idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(k) - 1);
  auto u = static_cast<std::size_t>(idx);
  // The arithmetic above can land one bin off right at an edge.
  while (u + 1 < k && value >= edge(u + 1)) ++u;
  while (u > 0 && value < edge(u)) --u;
  return u;
}

inline double multiclass_acc(std::span<const double> preds, std::span<const double> labels, std::size_t k) {
  detail::require_pairs(preds, labels, "multiclass_acc");
  std::vector<std::size_t> p, t;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    p.push_back(multiclass_bucket(preds[i], k));
    t.push_back(multiclass_bucket(labels[i], k));
  }
  return accuracy(p, t);
}

// Full report for a continuous label.
inline MetricsReport regression_report(std::span<const double> preds, std::span<const double> labels) {
  return {
      {"BA_nonneg", ba_nonneg(preds, labels)}, {"BA_posneg", ba_posneg(preds, labels)},
      {"F1_nonneg", f1_nonneg(preds, labels)}, {"F1_posneg", f1_posneg(preds, labels)},
      {"MAE", mae(preds, labels)},             {"Corr", pearson_corr(preds, labels)},
      {"MA5", multiclass_acc(preds, labels, 5)}, {"MA7", multiclass_acc(preds, labels, 7)},
  };
}

// Binary task: logits thresholded at 0 against {0,1} labels.
inline MetricsReport binary_report(std::span<const double> logits, std::span<const double> labels) {
  detail::require_pairs(logits, labels, "binary_report");
  std::vector<std::size_t> p, t;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    p.push_back(logits[i] >= 0.0 ? 1 : 0);
    t.push_back(labels[i] >= 0.5 ? 1 : 0);
  }
  return {{"Accuracy", accuracy(p, t)}, {"F1", weighted_f1(p, t)}};
}

inline MetricsReport categorical_report(std::span<const std::size_t> predicted,
                                        std::span<const std::size_t> truth) {
  return {{"Accuracy", accuracy(predicted, truth)}, {"F1", weighted_f1(predicted, truth)}};
}

}  // namespace fmtlab
