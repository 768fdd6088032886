// SPDX-License-Identifier: Apache-2.0
#pragma once

// Modality subsets ("factors") and the ordered factor collections that define
// which attentions exist inside a factorized self-attention unit.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <string>
#include <vector>

#include "fmtlab/error.hpp"

namespace fmtlab {

inline constexpr std::size_t kMaxModalities = 6;

// Nonempty bitmask over modality indices.
class Factor {
 public:
  constexpr Factor() = default;
  explicit Factor(std::uint32_t members) : members_(members) {
    if (members == 0) throw ConfigError("factor must contain at least one modality");
    if (members >> kMaxModalities) {
      throw ConfigError("factor mask " + std::to_string(members) + " exceeds " +
                        std::to_string(kMaxModalities) + " modalities");
    }
  }

  std::uint32_t mask() const { return members_; }
  std::size_t size() const { return static_cast<std::size_t>(std::popcount(members_)); }
  bool contains(std::size_t modality) const { return (members_ >> modality) & 1u; }

  // Member modality indices in ascending order.
  std::vector<std::size_t> members() const {
    std::vector<std::size_t> out;
    for (std::size_t m = 0; m < kMaxModalities; ++m)
      if (contains(m)) out.push_back(m);
    return out;
  }

  // Concatenated member names, e.g. "LV".
  std::string label(const std::vector<std::string>& names) const {
    std::string s;
    for (auto m : members()) s += m < names.size() ? names[m] : "M" + std::to_string(m);
    return s;
  }

  friend bool operator==(Factor a, Factor b) { return a.members_ == b.members_; }

 private:
  std::uint32_t members_ = 0;
};

class FactorSet {
 public:
  FactorSet() = default;
  explicit FactorSet(std::vector<Factor> factors) {
    for (auto f : factors) push_back(f);
  }

  void push_back(Factor f) {
    if (contains(f)) throw ConfigError("factor set already contains mask " + std::to_string(f.mask()));
    factors_.push_back(f);
  }

  bool contains(Factor f) const {
    return std::find(factors_.begin(), factors_.end(), f) != factors_.end();
  }

  const std::vector<Factor>& factors() const { return factors_; }
  std::size_t size() const { return factors_.size(); }
  bool empty() const { return factors_.empty(); }
  auto begin() const { return factors_.begin(); }
  auto end() const { return factors_.end(); }
  const Factor& operator[](std::size_t i) const { return factors_[i]; }

  // Union of all members.
  std::uint32_t covered() const {
    std::uint32_t u = 0;
    for (auto f : factors_) u |= f.mask();
    return u;
  }

  std::vector<std::uint32_t> masks() const {
    std::vector<std::uint32_t> out;
    for (auto f : factors_) out.push_back(f.mask());
    return out;
  }

  friend bool operator==(const FactorSet& a, const FactorSet& b) {
    return a.factors_ == b.factors_;
  }

 private:
  std::vector<Factor> factors_;
};

// All 2^M - 1 nonempty subsets, ordered by size then lexicographically by the
// sorted member list (L < V < A ...).
inline FactorSet enumerate_factors(std::size_t num_modalities) {
  if (num_modalities == 0) throw ConfigError("enumerate_factors: need at least one modality");
  if (num_modalities > kMaxModalities) {
    throw ConfigError("enumerate_factors: at most " + std::to_string(kMaxModalities) +
                      " modalities supported");
  }
  std::vector<Factor> all;
  for (std::uint32_t m = 1; m < (1u << num_modalities); ++m) all.emplace_back(m);
  std::stable_sort(all.begin(), all.end(), [](Factor a, Factor b) {
    if (a.size() != b.size()) return a.size() < b.size();
    return a.members() < b.members();
  });
  return FactorSet(std::move(all));
}

// Number of factors containing `modality`.
inline std::size_t fan_in(const FactorSet& set, std::size_t modality) {
  std::size_t n = 0;
  for (auto f : set)
    if (f.contains(modality)) ++n;
  if (n == 0) {
    throw ConfigError("modality " + std::to_string(modality) +
                      " is unreachable: it appears in no factor");
  }
  return n;
}

// Parses "L", "LV", ... against modality names. Names are matched greedily,
// longest first, so multi-character names work.
inline Factor parse_factor(const std::string& text, const std::vector<std::string>& names) {
  std::uint32_t mask = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t best = names.size();
    std::size_t best_len = 0;
    for (std::size_t i = 0; i < names.size(); ++i) {
      const auto& n = names[i];
      if (n.size() > best_len && text.compare(pos, n.size(), n) == 0) {
        best = i;
        best_len = n.size();
      }
    }
    if (best == names.size()) throw ConfigError("unknown modality in factor '" + text + "'");
    if (mask & (1u << best)) throw ConfigError("repeated modality in factor '" + text + "'");
    mask |= 1u << best;
    pos += best_len;
  }
  return Factor(mask);
}

}  // namespace fmtlab
