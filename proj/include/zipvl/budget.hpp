// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Per-layer important-token budgets and the important/unimportant split.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>

#include "zipvl/numkit.hpp"

namespace zipvl {

/// tau == 0 marks a budget that was not derived adaptively.
struct LayerBudget {
  double tau = 0.0;
  std::size_t n = 0;
  std::size_t p = 0;
  std::optional<double> retained_mass_fraction;
};

struct TokenPartition {
  IndexList important;
  IndexList unimportant;
};

/// Fraction of `mass_total` carried by the p largest scores.
inline double top_mass_fraction(std::span<const float> scores, std::size_t p,
                                double mass_total) {
  if (p == 0 || p > scores.size()) throw BoundsError("top_mass_fraction: p out of range");
  const auto cum = cumsum_desc(scores);
  return mass_total > 0.0 ? cum[p - 1] / mass_total : 1.0;
}

/// Smallest p whose top-p scores retain at least tau of the total mass.
/// Falls back to p = n when rounding keeps the full sum just below the
/// threshold; p is never below 1.
inline LayerBudget adaptive_budget(std::span<const float> scores, double tau,
                                   double mass_total) {
  if (scores.empty()) throw EmptySequenceError("adaptive_budget: empty score vector");
  if (!(tau > 0.0 && tau <= 1.0)) {
    throw DomainError("adaptive_budget: tau=" + std::to_string(tau) + " not in (0, 1]");
  }
  const auto cum = cumsum_desc(scores);
  const double threshold = tau * mass_total;
  const std::size_t n = scores.size();
  std::size_t p = n;
  for (std::size_t i = 0; i < n; ++i) {
    if (cum[i] >= threshold) {
      p = i + 1;
      break;
    }
  }
  LayerBudget b{tau, n, p, std::nullopt};
  b.retained_mass_fraction = mass_total > 0.0 ? cum[p - 1] / mass_total : 1.0;
  return b;
}

inline LayerBudget fixed_budget(std::size_t n, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw DomainError("fixed_budget: ratio=" + std::to_string(ratio) + " not in (0, 1]");
  }
  if (n == 0) throw EmptySequenceError("fixed_budget: n == 0");
  const auto rounded = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  return {0.0, n, std::clamp<std::size_t>(rounded, 1, n), std::nullopt};
}

/// Fixed budget with the retained mass filled in from actual scores.
inline LayerBudget fixed_budget(std::span<const float> scores, double ratio,
                                double mass_total) {
  LayerBudget b = fixed_budget(scores.size(), ratio);
  b.retained_mass_fraction = top_mass_fraction(scores, b.p, mass_total);
  return b;
}

/// Top-p by score (smaller index wins ties) plus, when keep_last > 0, the
/// trailing keep_last positions. The important set may then exceed p.
inline TokenPartition partition_tokens(std::span<const float> scores, std::size_t p,
                                       std::size_t keep_last = 0) {
  const std::size_t n = scores.size();
  if (p < 1 || p > n) {
    throw BoundsError("partition_tokens: p=" + std::to_string(p) + " not in [1, " +
                      std::to_string(n) + "]");
  }
  std::vector<bool> keep(n, false);
  for (auto i : topk_indices(scores, p)) keep[i] = true;
  for (std::size_t i = n - std::min(keep_last, n); i < n; ++i) keep[i] = true;
  TokenPartition part;
  for (std::size_t i = 0; i < n; ++i) {
    (keep[i] ? part.important : part.unimportant).push_back(i);
  }
  return part;
}

}  // namespace zipvl
