// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Synthetic per-layer score vectors for exercising the budget module
// without a model, and the layer-by-layer budgeting that consumes them.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "zipvl/budget.hpp"
#include "zipvl/config.hpp"
#include "zipvl/metrics.hpp"

namespace zipvl {

/// One nonnegative score vector per layer, each summing to n.
struct ScoreWorkload {
  std::vector<ScoreVector> layers;

  std::size_t n() const noexcept { return layers.empty() ? 0 : layers.front().size(); }
};

inline double default_concentration(WorkloadKind kind) {
  switch (kind) {
    case WorkloadKind::kPeakedScores: return 2.0;
    case WorkloadKind::kDiffuseScores: return 4.0;
    case WorkloadKind::kMixedScores: return 3.0;
    case WorkloadKind::kRandomTokens: break;
  }
  throw ConfigError("random-tokens is not a score workload");
}

/// Weights per kind, u ~ U(0, 1], c = concentration:
///   peaked   w = u^(-c)                 (Pareto tail; larger c, fewer heavy hitters)
///   diffuse  w = 1 + (2u - 1) / c       (c = inf gives exactly uniform)
///   mixed    w = u^(-c·l/(L-1))         (layer 0 uniform, last layer most peaked)
/// then rescaled so each layer sums to n.
inline ScoreWorkload generate_workload(WorkloadKind kind, std::size_t n, std::size_t layers,
                                       double concentration, std::uint64_t seed) {
  if (kind == WorkloadKind::kRandomTokens) throw ConfigError("random-tokens is not a score workload");
  if (n < 1 || layers < 1) throw EmptySequenceError("generate_workload: n and layers must be >= 1");
  if (!(concentration > 0.0)) throw DomainError("generate_workload: concentration must be > 0");
  ScoreWorkload wl;
  for (std::size_t l = 0; l < layers; ++l) {
    Rng rng(derive_seed(seed, l));
    std::vector<double> w(n);
    double exponent = concentration;
    if (kind == WorkloadKind::kMixedScores) {
      exponent = layers == 1 ? concentration
                             : concentration * static_cast<double>(l) / static_cast<double>(layers - 1);
    }
    for (auto& x : w) {
      const double u = rng.uniform_open0();
      x = kind == WorkloadKind::kDiffuseScores ? 1.0 + (2.0 * u - 1.0) / concentration
                                                : std::pow(u, -exponent);
    }
    double sum = 0.0;
    for (double x : w) sum += x;
    ScoreVector v(n);
    for (std::size_t j = 0; j < n; ++j) {
      v[j] = static_cast<float>(w[j] * static_cast<double>(n) / sum);
    }
    wl.layers.push_back(std::move(v));
  }
  return wl;
}

inline std::string format_float(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void write_workload_csv(const ScoreWorkload& wl, std::ostream& os) {
  os << "layer,token,score\n";
  for (std::size_t l = 0; l < wl.layers.size(); ++l) {
    for (std::size_t j = 0; j < wl.layers[l].size(); ++j) {
      os << l << ',' << j << ',' << format_float(wl.layers[l][j]) << '\n';
    }
  }
}

inline ScoreWorkload read_workload_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || detail::trim(line) != "layer,token,score") {
    throw FormatError("workload csv: missing 'layer,token,score' header");
  }
  ScoreWorkload wl;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string_view t = detail::trim(line);
    if (t.empty()) continue;
    const auto c1 = t.find(',');
    const auto c2 = c1 == std::string_view::npos ? c1 : t.find(',', c1 + 1);
    if (c2 == std::string_view::npos) {
      throw FormatError("workload csv line " + std::to_string(lineno) + ": expected 3 fields");
    }
    std::size_t layer = 0;
    std::size_t token = 0;
    float score = 0.0F;
    try {
      layer = detail::parse_number<std::size_t>("layer", t.substr(0, c1));
      token = detail::parse_number<std::size_t>("token", t.substr(c1 + 1, c2 - c1 - 1));
      score = detail::parse_number<float>("score", t.substr(c2 + 1));
    } catch (const ConfigError& e) {
      throw FormatError("workload csv line " + std::to_string(lineno) + ": " + e.what());
    }
    if (layer == wl.layers.size()) wl.layers.emplace_back();
    if (layer + 1 != wl.layers.size() || token != wl.layers.back().size()) {
      throw FormatError("workload csv line " + std::to_string(lineno) +
                        ": rows must be ordered by layer then token");
    }
    if (!std::isfinite(score) || score < 0.0F) {
      throw FormatError("workload csv line " + std::to_string(lineno) + ": score must be finite and >= 0");
    }
    wl.layers.back().push_back(score);
  }
  if (wl.layers.empty()) throw FormatError("workload csv: no rows");
  for (const auto& l : wl.layers) {
    if (l.size() != wl.layers.front().size()) throw FormatError("workload csv: ragged layers");
  }
  return wl;
}

/// Budgets every layer of a score workload. Dense keeps all tokens, fixed
/// uses `fixed_ratio`, zipvl-exact is adaptive. FLOPs use d_head = heads = 1.
inline std::vector<LayerReport> budget_workload(const ScoreWorkload& wl, AttentionMode mode,
                                                double tau, double fixed_ratio) {
  if (mode == AttentionMode::kZipvlProbe) {
    throw ConfigError("zipvl-probe needs a model; score workloads support dense, zipvl-exact, fixed");
  }
  std::vector<LayerReport> out;
  for (std::size_t l = 0; l < wl.layers.size(); ++l) {
    const ScoreVector& v = wl.layers[l];
    const double mass = total_mass(v);
    LayerBudget b{0.0, v.size(), v.size(), 1.0};
    if (mode == AttentionMode::kZipvlExact) b = adaptive_budget(v, tau, mass);
    if (mode == AttentionMode::kFixed) b = fixed_budget(v, fixed_ratio, mass);
    LayerReport r;
    r.layer = l;
    r.n = b.n;
    r.p = b.p;
    r.ratio = static_cast<double>(b.p) / static_cast<double>(b.n);
    r.retained_mass = b.retained_mass_fraction.value_or(1.0);
    r.attn_flops = mode == AttentionMode::kDense ? attn_flops_dense(b.n, 1, 1)
                                                 : attn_flops_sparse(b.p, b.n, 1, 1, 0);
    r.kv_rows = b.p;
    out.push_back(r);
  }
  return out;
}

}  // namespace zipvl
