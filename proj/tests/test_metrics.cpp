// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "zipvl/metrics.hpp"

namespace zipvl {
namespace {

TEST(AttnFlops, DenseExamples) {
  EXPECT_EQ(attn_flops_dense(1, 8, 2), 4U * 8 * 2);
  EXPECT_EQ(attn_flops_dense(200, 8, 2), 4 * attn_flops_dense(100, 8, 2));
  EXPECT_EQ(attn_flops_dense(100, 8, 2), 640000U);
}

TEST(AttnFlops, SparseExamples) {
  EXPECT_EQ(attn_flops_sparse(100, 100, 8, 2, 0), attn_flops_dense(100, 8, 2));
  EXPECT_DOUBLE_EQ(reduction(attn_flops_sparse(50, 100, 8, 2, 0), attn_flops_dense(100, 8, 2)), 0.75);
  EXPECT_EQ(attn_flops_sparse(50, 100, 8, 2, 10), 192000U);
}

LayerBudget lb(std::size_t p, std::size_t n) { return LayerBudget{0.9, n, p, std::nullopt}; }

TEST(KvReduction, Examples) {
  const std::vector<LayerBudget> same{lb(10, 10), lb(7, 7)};
  EXPECT_EQ(kv_reduction(same), 0.0);
  const std::vector<LayerBudget> mixed{lb(25, 100), lb(75, 100)};
  EXPECT_DOUBLE_EQ(kv_reduction(mixed), 0.5);
  const std::vector<LayerBudget> single{lb(48, 100)};
  EXPECT_NEAR(kv_reduction(single), 0.52, 1e-12);
  EXPECT_THROW(kv_reduction(std::vector<LayerBudget>{}), EmptySequenceError);
}

std::vector<LayerReport> uniform_reports(std::size_t layers, std::size_t n, std::size_t p,
                                         std::size_t d, std::size_t h) {
  std::vector<LayerReport> out;
  for (std::size_t l = 0; l < layers; ++l) {
    LayerReport r;
    r.layer = l;
    r.n = n;
    r.p = p;
    r.ratio = static_cast<double>(p) / static_cast<double>(n);
    r.attn_flops = attn_flops_sparse(p, n, d, h, 0);
    r.kv_rows = p;
    out.push_back(r);
  }
  return out;
}

TEST(RatioProfile, ExtractsPairsAndRequiresOrder) {
  auto reps = uniform_reports(3, 10, 10, 4, 1);
  const auto prof = ratio_profile(reps);
  ASSERT_EQ(prof.size(), 3U);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(prof[i].first, i);
    EXPECT_EQ(prof[i].second, 1.0);
  }
  std::swap(reps[0], reps[2]);
  EXPECT_THROW(ratio_profile(reps), OrderingError);
}

TEST(FinalizeTotals, UniformRatioGivesOneMinusRSquared) {
  for (std::size_t p : {1U, 16U, 32U, 48U, 64U}) {
    RunReport r;
    r.layers = uniform_reports(4, 64, p, 8, 2);
    r.kv_bytes_dense = 64 * 100;
    r.kv_bytes_actual = p * 100;
    finalize_totals(r, 8, 2);
    const double ratio = static_cast<double>(p) / 64.0;
    EXPECT_DOUBLE_EQ(r.flops_reduction, 1.0 - ratio * ratio);
    EXPECT_DOUBLE_EQ(r.mean_ratio, ratio);
    EXPECT_NEAR(r.kv_reduction, 1.0 - r.mean_ratio, 1e-9);
  }
}

TEST(FinalizeTotals, HalfRatioExactValues) {
  RunReport r;
  r.layers = uniform_reports(2, 100, 50, 8, 2);
  r.kv_bytes_dense = 2 * 2 * 2 * 100 * 8 * 4;
  r.kv_bytes_actual = r.kv_bytes_dense / 2;
  finalize_totals(r, 8, 2);
  EXPECT_EQ(r.flops_reduction, 0.75);
  EXPECT_EQ(r.kv_reduction, 0.5);
  EXPECT_EQ(r.total_attn_flops_dense, 2U * 640000U);
}

TEST(FinalizeTotals, DenseRunHasZeroReductions) {
  RunReport r;
  r.layers = uniform_reports(3, 40, 40, 8, 2);
  r.kv_bytes_dense = r.kv_bytes_actual = 4096;
  finalize_totals(r, 8, 2);
  EXPECT_EQ(r.flops_reduction, 0.0);
  EXPECT_EQ(r.kv_reduction, 0.0);
  EXPECT_EQ(r.mean_ratio, 1.0);
}

}  // namespace
}  // namespace zipvl
