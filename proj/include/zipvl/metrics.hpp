// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Attention FLOPs and KV-cache accounting.
//
// Convention: a multiply-add is 2 FLOPs. Per head, Q·Kᵀ over an n × n causal
// block is charged as a full 2·n²·d and A·V as another 2·n²·d; softmax, norms,
// projections and the MLP are outside the attention metric. Score rows
// computed only to estimate importance (probe rows) cost 2·rows·n·d per head
// and carry no A·V term.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "zipvl/budget.hpp"
#include "zipvl/policy.hpp"

namespace zipvl {

using FlopCount = std::uint64_t;

constexpr FlopCount attn_flops_dense(std::uint64_t n, std::uint64_t d_head,
                                     std::uint64_t heads) {
  return 4 * n * n * d_head * heads;
}

constexpr FlopCount attn_flops_sparse(std::uint64_t p, std::uint64_t n, std::uint64_t d_head,
                                      std::uint64_t heads, std::uint64_t probe_rows) {
  return 4 * p * p * d_head * heads + 2 * probe_rows * n * d_head * heads;
}

/// 1 − Σp / Σn.
inline double kv_reduction(std::span<const LayerBudget> budgets) {
  if (budgets.empty()) throw EmptySequenceError("kv_reduction: no budgets");
  std::uint64_t kept = 0;
  std::uint64_t total = 0;
  for (const auto& b : budgets) {
    kept += b.p;
    total += b.n;
  }
  return 1.0 - static_cast<double>(kept) / static_cast<double>(total);
}

inline double reduction(std::uint64_t actual, std::uint64_t dense) {
  return dense == 0 ? 0.0 : 1.0 - static_cast<double>(actual) / static_cast<double>(dense);
}

struct LayerReport {
  std::size_t layer = 0;
  std::size_t n = 0;
  std::size_t p = 0;
  double ratio = 1.0;
  double retained_mass = 1.0;
  std::size_t score_rows = 0;  // probe rows charged to this layer
  FlopCount attn_flops = 0;
  std::size_t kv_rows = 0;

  friend bool operator==(const LayerReport&, const LayerReport&) = default;
};

struct RunReport {
  ModelConfig model;
  SparsityPolicy policy;
  IndexList prompt;
  IndexList generated;
  std::vector<LayerReport> layers;
  FlopCount total_attn_flops_dense = 0;
  FlopCount total_attn_flops_actual = 0;
  double flops_reduction = 0.0;
  std::uint64_t kv_bytes_dense = 0;
  std::uint64_t kv_bytes_actual = 0;
  double kv_reduction = 0.0;
  double mean_ratio = 1.0;
  FlopCount model_flops = 0;  // projections + MLP + actual attention, prefill only

  friend bool operator==(const RunReport&, const RunReport&) = default;
};

inline std::vector<std::pair<std::size_t, double>> ratio_profile(
    std::span<const LayerReport> reports) {
  std::vector<std::pair<std::size_t, double>> out;
  out.reserve(reports.size());
  for (std::size_t i = 0; i < reports.size(); ++i) {
    if (i > 0 && reports[i].layer <= reports[i - 1].layer) {
      throw OrderingError("ratio_profile: reports must be sorted by layer");
    }
    out.emplace_back(reports[i].layer, reports[i].ratio);
  }
  return out;
}

inline double mean_ratio(std::span<const LayerReport> reports) {
  if (reports.empty()) return 1.0;
  double s = 0.0;
  for (const auto& r : reports) s += r.ratio;
  return s / static_cast<double>(reports.size());
}

/// Fills the totals of `r` from its per-layer reports and byte counts.
inline void finalize_totals(RunReport& r, std::size_t d_head, std::size_t heads) {
  r.total_attn_flops_dense = 0;
  r.total_attn_flops_actual = 0;
  for (const auto& l : r.layers) {
    r.total_attn_flops_dense += attn_flops_dense(l.n, d_head, heads);
    r.total_attn_flops_actual += l.attn_flops;
  }
  r.flops_reduction = reduction(r.total_attn_flops_actual, r.total_attn_flops_dense);
  r.kv_reduction = reduction(r.kv_bytes_actual, r.kv_bytes_dense);
  r.mean_ratio = mean_ratio(r.layers);
}

}  // namespace zipvl
