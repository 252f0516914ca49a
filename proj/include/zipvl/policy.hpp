// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include "zipvl/attention.hpp"
#include "zipvl/error.hpp"
#include "zipvl/kvcache.hpp"

namespace zipvl {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t d_model = 16;
  std::size_t vocab_size = 64;
  std::size_t max_seq = 512;
  std::uint64_t seed = 0;
  float norm_eps = 1e-5F;

  std::size_t d_head() const noexcept { return heads == 0 ? 0 : d_model / heads; }
  std::size_t d_ff() const noexcept { return 4 * d_model; }

  void validate() const {
    if (layers < 1 || heads < 1 || d_model < 1 || vocab_size < 1 || max_seq < 1) {
      throw ConfigError("model config: all counts must be >= 1");
    }
    if (d_model % heads != 0) {
      throw ConfigError("model config: d_model=" + std::to_string(d_model) +
                        " not divisible by heads=" + std::to_string(heads));
    }
    if (!(norm_eps > 0.0F)) throw ConfigError("model config: norm_eps must be > 0");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class AttentionMode { kDense, kZipvlExact, kZipvlProbe, kFixed };
enum class ScoreMetric { kAccumulated, kNormalized };

struct SparsityPolicy {
  AttentionMode mode = AttentionMode::kZipvlExact;
  double tau = 0.975;
  double fixed_ratio = 0.5;
  std::size_t probe_recent = 64;
  std::size_t probe_random = 64;
  ScoreMetric budget_metric = ScoreMetric::kAccumulated;
  ScoreMetric identify_metric = ScoreMetric::kNormalized;
  std::size_t keep_last = 0;
  bool quantize = false;
  std::size_t group_size = kDefaultGroupSize;
  HeadAggregation head_aggregation = HeadAggregation::kMean;
  std::size_t dense_first_layers = 0;

  bool adaptive() const noexcept {
    return mode == AttentionMode::kZipvlExact || mode == AttentionMode::kZipvlProbe;
  }

  void validate() const {
    if (adaptive() && !(tau > 0.0 && tau <= 1.0)) {
      throw ConfigError("policy: tau must be in (0, 1]");
    }
    if (mode == AttentionMode::kFixed && !(fixed_ratio > 0.0 && fixed_ratio <= 1.0)) {
      throw ConfigError("policy: fixed_ratio must be in (0, 1]");
    }
    if (mode == AttentionMode::kZipvlProbe && probe_recent < 1) {
      throw ConfigError("policy: probe_recent must be >= 1");
    }
    if (quantize && group_size < 1) throw ConfigError("policy: group_size must be >= 1");
  }

  friend bool operator==(const SparsityPolicy&, const SparsityPolicy&) = default;
};

inline std::string_view to_string(AttentionMode m) {
  switch (m) {
    case AttentionMode::kDense: return "dense";
    case AttentionMode::kZipvlExact: return "zipvl-exact";
    case AttentionMode::kZipvlProbe: return "zipvl-probe";
    case AttentionMode::kFixed: return "fixed";
  }
  return "?";
}

inline std::string_view to_string(ScoreMetric m) {
  return m == ScoreMetric::kAccumulated ? "accumulated" : "normalized";
}

inline std::string_view to_string(HeadAggregation h) {
  return h == HeadAggregation::kMean ? "mean" : "sum";
}

inline AttentionMode parse_mode(std::string_view s) {
  if (s == "dense") return AttentionMode::kDense;
  if (s == "zipvl-exact") return AttentionMode::kZipvlExact;
  if (s == "zipvl-probe") return AttentionMode::kZipvlProbe;
  if (s == "fixed") return AttentionMode::kFixed;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

inline ScoreMetric parse_metric(std::string_view s) {
  if (s == "accumulated") return ScoreMetric::kAccumulated;
  if (s == "normalized") return ScoreMetric::kNormalized;
  throw ConfigError("unknown score metric '" + std::string(s) + "'");
}

inline HeadAggregation parse_aggregation(std::string_view s) {
  if (s == "mean") return HeadAggregation::kMean;
  if (s == "sum") return HeadAggregation::kSum;
  throw ConfigError("unknown head aggregation '" + std::string(s) + "'");
}

}  // namespace zipvl
