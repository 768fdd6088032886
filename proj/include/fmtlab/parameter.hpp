// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "fmtlab/error.hpp"
#include "fmtlab/tensor.hpp"

namespace fmtlab {

struct Parameter {
  std::string name;  // hierarchical path, e.g. "mtl.0.fms.2.attn.LV.W_Q"
  Tensor tensor;
};

// Ordered, uniquely named set of trainable leaves. Enumeration order is
// registration order.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Shape shape, std::vector<double> values) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_.emplace(name, params_.size());
    params_.push_back({name, Tensor::parameter(std::move(shape), std::move(values))});
    return params_.back().tensor;
  }

  // Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Tensor add_uniform(const std::string& name, Shape shape, std::size_t fan_in,
                     std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = dist(rng);
    return add(name, std::move(shape), std::move(values));
  }

  Tensor add_constant(const std::string& name, Shape shape, double value) {
    std::vector<double> values(shape_numel(shape), value);
    return add(name, std::move(shape), std::move(values));
  }

  const std::vector<Parameter>& all() const { return params_; }
  std::vector<Parameter>& all() { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return params_[it->second].tensor;
  }
  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return params_[it->second].tensor;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Deep copy of all values, in enumeration order.
  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.tensor.values());
    return out;
  }

  void restore(const std::vector<std::vector<double>>& values) {
    if (values.size() != params_.size()) throw UsageError("snapshot does not match parameters");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto dst = params_[i].tensor.mutable_data();
      if (dst.size() != values[i].size()) {
        throw UsageError("snapshot size mismatch for " + params_[i].name);
      }
      std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
  }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fmtlab
