// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "fmtlab/data.hpp"
#include "fmtlab/error.hpp"
#include "fmtlab/metrics.hpp"
#include "fmtlab/model.hpp"
#include "fmtlab/ops.hpp"
#include "fmtlab/parameter.hpp"

namespace fmtlab {

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(std::vector<Parameter>& params, AdamOptions options = {})
      : params_(&params), options_(options) {
    for (const auto& p : params) {
      first_.emplace_back(p.tensor.numel(), 0.0);
      second_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  std::size_t steps() const { return step_; }
  const AdamOptions& options() const { return options_; }

  // Bias-corrected update from the parameters' accumulated gradients.
  void step() {
    auto& params = *params_;
    if (params.size() != first_.size()) throw UsageError("Adam: parameter list changed size");
    for (const auto& p : params) {
      const auto& g = p.tensor.node()->grad;
      for (double v : g) {
        if (!std::isfinite(v)) throw NumericError("Adam: non-finite gradient for parameter " + p.name);
      }
    }
    ++step_;
    const double t = static_cast<double>(step_);
    const double c1 = 1.0 - std::pow(options_.beta1, t);
    const double c2 = 1.0 - std::pow(options_.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& tensor = params[i].tensor;
      const auto& g = tensor.node()->grad;
      if (g.empty()) continue;  // no gradient reached this parameter
      auto w = tensor.mutable_data();
      auto& m = first_[i];
      auto& v = second_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g[j];
        v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g[j] * g[j];
        const double mhat = m[j] / c1;
        const double vhat = v[j] / c2;
        w[j] -= options_.learning_rate * mhat / (std::sqrt(vhat) + options_.eps);
      }
    }
  }

 private:
  std::vector<Parameter>* params_;
  AdamOptions options_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::size_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Losses: L1 for regression, BCE-with-logits for binary, softmax CE for
// categorical.

inline std::vector<std::size_t> class_indices(const Tensor& labels) {
  std::vector<std::size_t> out;
  for (double v : labels.data()) {
    if (v < 0.0 || v != std::floor(v)) throw DataError("categorical label " + std::to_string(v) + " is not a class index");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

inline Tensor compute_loss(const Tensor& predictions, const Tensor& labels, LabelKind kind) {
  switch (kind) {
    case LabelKind::regression:
      if (predictions.shape() != labels.shape()) {
        throw DimensionError("regression loss: predictions " + shape_str(predictions.shape()) +
                             " vs labels " + shape_str(labels.shape()));
      }
      return l1_distance(predictions, labels);
    case LabelKind::binary:
      return bce_with_logits(predictions, labels);
    case LabelKind::categorical: {
      auto idx = class_indices(labels);
      return softmax_cross_entropy(predictions, idx);
    }
  }
  throw UsageError("unknown label kind");
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t max_epochs = 200;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t patience = 20;   // epochs without validation improvement
  std::size_t max_steps = 0;   // 0 = no step cap

  void validate() const {
    if (max_epochs == 0) throw ConfigError("train.max_epochs must be positive");
    if (patience > max_epochs) throw ConfigError("train.patience must not exceed train.max_epochs");
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (learning_rate < 0.0 || !std::isfinite(learning_rate)) {
      throw ConfigError("train.learning_rate must be a nonnegative number");
    }
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_validation_loss = std::numeric_limits<double>::infinity();
  std::size_t steps = 0;
};

// Predictions for every sample, in dataset order, in evaluation mode.
inline Tensor predict(const FmtModel& model, const Dataset& ds, std::size_t batch_size = 64) {
  NoGradGuard no_grad;
  const std::size_t n = ds.size();
  const std::size_t dy = model.config().d_y;
  std::vector<double> out(n * dy);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    Tensor y = model.forward(ds.batch(idx));
    std::copy(y.data().begin(), y.data().end(), out.begin() + static_cast<std::ptrdiff_t>(start * dy));
  }
  return Tensor({n, dy}, std::move(out));
}

// Mean loss over a dataset in evaluation mode, weighted by batch size.
inline double evaluate_loss(const FmtModel& model, const Dataset& ds, std::size_t batch_size = 64) {
  NoGradGuard no_grad;
  Tensor preds = predict(model, ds, batch_size);
  return compute_loss(preds, ds.data.labels, ds.label_kind).item();
}

inline MetricsReport evaluate(const FmtModel& model, const Dataset& ds, std::size_t batch_size = 64) {
  Tensor preds = predict(model, ds, batch_size);
  switch (ds.label_kind) {
    case LabelKind::regression:
      return regression_report(preds.data(), ds.data.labels.data());
    case LabelKind::binary:
      return binary_report(preds.data(), ds.data.labels.data());
    case LabelKind::categorical: {
      const std::size_t k = preds.dim(1);
      std::vector<std::size_t> predicted;
      for (std::size_t i = 0; i < preds.dim(0); ++i) {
        auto row = preds.data().subspan(i * k, k);
        predicted.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
      }
      auto truth = class_indices(ds.data.labels);
      return categorical_report(predicted, truth);
    }
  }
  return {};
}

// Mini-batch Adam with per-epoch seeded shuffling and validation-loss early
// stopping. On return the model holds the parameters of the best epoch.
// Without a validation set, the epoch's training loss is used for selection.
inline TrainResult train(FmtModel& model, const Dataset& train_set, const Dataset* validation,
                         const TrainConfig& config) {
  config.validate();
  auto& params = model.parameters().all();
  Adam adam(params, {config.learning_rate});
  std::mt19937_64 shuffle_rng(config.seed);
  std::mt19937_64 dropout_rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  ForwardOptions fwd{true, &dropout_rng};

  TrainResult result;
  auto best = model.parameters().snapshot();
  std::size_t since_best = 0;
  std::vector<std::size_t> order = train_set.all_indices();

  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double weighted = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      if (config.max_steps && result.steps >= config.max_steps) break;
      std::span<const std::size_t> idx(order.data() + start,
                                       std::min(config.batch_size, order.size() - start));
      MultimodalBatch batch = train_set.batch(idx);
      model.parameters().zero_grad();
      double value = 0.0;
      try {
        Tensor loss = compute_loss(model.forward(batch, fwd), batch.labels, train_set.label_kind);
        value = loss.item();
        if (!std::isfinite(value)) throw NumericError("non-finite loss");
        loss.backward();
        adam.step();
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      ++result.steps;
      weighted += value * static_cast<double>(idx.size());
      seen += idx.size();
    }
    if (seen == 0) break;  // step cap reached
    EpochRecord rec{epoch, weighted / static_cast<double>(seen), 0.0};
    rec.validation_loss = validation ? evaluate_loss(model, *validation) : rec.train_loss;
    if (!std::isfinite(rec.validation_loss)) {
      throw NumericError("training diverged: non-finite validation loss at epoch " + std::to_string(epoch));
    }
    result.history.push_back(rec);
    if (rec.validation_loss < result.best_validation_loss) {
      result.best_validation_loss = rec.validation_loss;
      result.best_epoch = epoch;
      best = model.parameters().snapshot();
      since_best = 0;
    } else if (++since_best >= config.patience && config.patience > 0) {
      break;
    }
  }
  model.parameters().restore(best);
  return result;
}

}  // namespace fmtlab
