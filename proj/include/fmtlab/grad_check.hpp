// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "fmtlab/error.hpp"
#include "fmtlab/parameter.hpp"
#include "fmtlab/tensor.hpp"

namespace fmtlab {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t samples = 0;  // 0 = every coordinate
  std::uint64_t seed = 0;
};

// Compares reverse-mode gradients against central differences on a sample of
// parameter coordinates. Error per coordinate is
//   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline GradCheckResult grad_check(const std::function<Tensor()>& forward,
                                  std::vector<Parameter>& params,
                                  const GradCheckOptions& options = {}) {
  if (options.eps <= 0.0) throw ConfigError("grad_check: eps must be positive");

  for (auto& p : params) {
    for (double v : p.tensor.data()) {
      if (!std::isfinite(v)) throw NumericError("grad_check: non-finite value in parameter " + p.name);
    }
    p.tensor.zero_grad();
  }
  Tensor loss = forward();
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
  loss.backward();

  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    analytic.push_back(p.tensor.grad());
    for (double g : analytic.back()) {
      if (!std::isfinite(g)) {
        throw NumericError("grad_check: non-finite gradient for parameter " + p.name);
      }
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t j = 0; j < params[i].tensor.numel(); ++j) coords.emplace_back(i, j);
  if (options.samples > 0 && options.samples < coords.size()) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.samples);
    std::sort(coords.begin(), coords.end());
  }

  NoGradGuard no_grad;
  GradCheckResult result;
  for (auto [pi, j] : coords) {
    auto values = params[pi].tensor.mutable_data();
    const double original = values[j];
    values[j] = original + options.eps;
    const double up = forward().item();
    values[j] = original - options.eps;
    const double down = forward().item();
    values[j] = original;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("grad_check: non-finite loss when perturbing " + params[pi].name +
                         "[" + std::to_string(j) + "]");
    }
    const double numeric = (up - down) / (2.0 * options.eps);
    const double a = analytic[pi][j];
    const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    ++result.coordinates_checked;
    if (err > result.max_relative_error || result.worst_parameter.empty()) {
      result.max_relative_error = err;
      result.worst_parameter = params[pi].name;
      result.worst_index = j;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace fmtlab
