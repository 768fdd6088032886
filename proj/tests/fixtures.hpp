// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small model configs and random batches shared by the test suites.

#include <random>
#include <vector>

#include "fmtlab/config.hpp"
#include "fmtlab/data.hpp"
#include "fmtlab/factor.hpp"

namespace fixtures {

inline fmtlab::ModelConfig tiny_config(std::size_t modalities = 3, std::size_t embed = 4,
                                       std::size_t units = 2, std::size_t layers = 2,
                                       std::size_t d_y = 3, std::uint64_t seed = 1) {
  fmtlab::ModelConfig c;
  const auto names = fmtlab::default_modality_names(modalities);
  for (std::size_t m = 0; m < modalities; ++m) c.modalities.push_back({names[m], 2 + m, embed});
  c.factors = fmtlab::enumerate_factors(modalities);
  c.fms_units = units;
  c.mtl_layers = layers;
  c.d_y = d_y;
  c.seed = seed;
  return c;
}

// Batch of B left-padded sequences with the given true lengths (T if empty).
inline fmtlab::MultimodalBatch random_batch(const fmtlab::ModelConfig& c, std::size_t B, std::size_t T,
                                            std::mt19937_64& rng, std::vector<std::size_t> lengths = {}) {
  std::normal_distribution<double> n(0.0, 1.0);
  if (lengths.empty()) lengths.assign(B, T);
  fmtlab::MultimodalBatch b;
  b.mask.assign(B * T, 0);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t t = T - lengths[i]; t < T; ++t) b.mask[i * T + t] = 1;
  for (const auto& m : c.modalities) {
    std::vector<double> v(B * T * m.input_dim, 0.0);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t t = T - lengths[i]; t < T; ++t)
        for (std::size_t d = 0; d < m.input_dim; ++d) v[(i * T + t) * m.input_dim + d] = n(rng);
    b.inputs.emplace_back(fmtlab::Shape{B, T, m.input_dim}, std::move(v));
  }
  std::vector<double> y(B * c.d_y);
  for (auto& v : y) v = n(rng);
  b.labels = fmtlab::Tensor({B, c.d_y}, std::move(y));
  return b;
}

}  // namespace fixtures
