// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Single-head causal attention: dense and probe-row score matrices, token
// importance statistics, and attention restricted to a retained token set.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "zipvl/numkit.hpp"

namespace zipvl {

/// An r × n_total slice of a causal attention matrix. Row c holds the
/// softmax of query position row_positions[c] against every key; columns
/// beyond that position are exactly zero.
struct AttentionScores {
  Matrix scores;
  IndexList row_positions;
  std::size_t n_total = 0;

  std::size_t num_rows() const noexcept { return row_positions.size(); }
};

/// Query rows whose attention is computed explicitly: the trailing
/// `recent_count` positions plus `random_count` positions drawn from the rest.
struct ProbeSet {
  IndexList indices;
  std::size_t recent_count = 0;
  std::size_t random_count = 0;
  std::uint64_t seed = 0;
};

struct ScoreStats {
  ScoreVector accumulated;
  ScoreVector normalized;
  double mass_total = 0.0;
};

struct QKV {
  Matrix q;
  Matrix k;
  Matrix v;
};

inline QKV compute_qkv(const Matrix& x, const Matrix& wq, const Matrix& wk,
                       const Matrix& wv) {
  return {matmul(x, wq), matmul(x, wk), matmul(x, wv)};
}

inline float default_scale(std::size_t d_head) {
  return static_cast<float>(1.0 / std::sqrt(static_cast<double>(d_head)));
}

/// Causal scores for the query rows `rows` of q against all of k. Masking
/// uses each row's original position. Dense and probe attention both route
/// through here, so equal row sets give bit-equal scores.
inline AttentionScores causal_scores(const Matrix& q, std::span<const std::size_t> rows,
                                     const Matrix& k, float scale) {
  if (q.cols() != k.cols()) {
    throw ShapeError("attention: q width " + std::to_string(q.cols()) +
                     " != k width " + std::to_string(k.cols()));
  }
  if (q.rows() != k.rows()) {
    throw ShapeError("attention: q has " + std::to_string(q.rows()) +
                     " rows, k has " + std::to_string(k.rows()));
  }
  const std::size_t n = k.rows();
  Matrix logits(rows.size(), n);
  for (std::size_t c = 0; c < rows.size(); ++c) {
    const std::size_t pos = rows[c];
    if (pos >= n) throw BoundsError("attention: row position out of range");
    if (c > 0 && pos <= rows[c - 1]) {
      throw OrderingError("attention: row positions must be strictly increasing");
    }
    auto qrow = q.row(pos);
    auto out = logits.row(c);
    for (std::size_t j = 0; j <= pos; ++j) {
      out[j] = static_cast<float>(dot(qrow, k.row(j)) * scale);
    }
  }
  return {masked_softmax_rows(logits, CausalRowMask::causal(rows)),
          IndexList(rows.begin(), rows.end()), n};
}

inline IndexList all_positions(std::size_t n) {
  IndexList idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

struct AttentionResult {
  Matrix output;
  AttentionScores scores;
};

inline AttentionResult dense_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                       float scale) {
  if (v.rows() != k.rows()) throw ShapeError("dense_attention: k/v row mismatch");
  const IndexList rows = all_positions(q.rows());
  AttentionScores s = causal_scores(q, rows, k, scale);
  Matrix out = matmul(s.scores, v);
  return {std::move(out), std::move(s)};
}

inline ProbeSet select_probe_set(std::size_t n, std::size_t recent, std::size_t random,
                                 std::uint64_t seed) {
  if (n == 0) throw EmptySequenceError("select_probe_set: empty sequence");
  if (recent < 1) throw DomainError("select_probe_set: recent must be >= 1");
  const std::size_t keep_recent = std::min(recent, n);
  const std::size_t pool_size = n - keep_recent;
  const std::size_t draws = std::min(random, pool_size);

  // Partial Fisher-Yates over [0, pool_size).
  IndexList pool = all_positions(pool_size);
  Rng rng(seed);
  for (std::size_t i = 0; i < draws; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(pool_size - i));
    std::swap(pool[i], pool[j]);
  }
  IndexList indices(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(draws));
  for (std::size_t p = pool_size; p < n; ++p) indices.push_back(p);
  std::sort(indices.begin(), indices.end());
  return {std::move(indices), recent, random, seed};
}

inline AttentionScores probe_attention(const Matrix& q, const ProbeSet& probe,
                                       const Matrix& k, float scale) {
  for (auto i : probe.indices) {
    if (i >= q.rows()) throw BoundsError("probe_attention: probe index out of range");
  }
  return causal_scores(q, probe.indices, k, scale);
}

/// Column sums over the available rows.
inline ScoreVector accumulated_scores(const AttentionScores& s) {
  std::vector<double> acc(s.n_total, 0.0);
  for (std::size_t c = 0; c < s.num_rows(); ++c) {
    auto row = s.scores.row(c);
    const std::size_t vis = s.row_positions[c] + 1;
    for (std::size_t j = 0; j < vis; ++j) acc[j] += row[j];
  }
  return ScoreVector(acc.begin(), acc.end());
}

/// Number of available rows that can causally see column j. Counted from
/// positions, not from float values.
inline std::vector<std::size_t> structural_nnz(const AttentionScores& s) {
  std::vector<std::size_t> nnz(s.n_total, 0);
  // rows are sorted, so row c sees j iff row_positions[c] >= j
  for (auto pos : s.row_positions) {
    if (pos < s.n_total) ++nnz[pos];
  }
  std::size_t running = 0;
  for (std::size_t j = s.n_total; j-- > 0;) {
    running += nnz[j];
    nnz[j] = running;
  }
  return nnz;
}

inline ScoreVector normalized_scores(const AttentionScores& s) {
  const ScoreVector acc = accumulated_scores(s);
  const auto nnz = structural_nnz(s);
  ScoreVector out(s.n_total, 0.0F);
  for (std::size_t j = 0; j < s.n_total; ++j) {
    if (nnz[j] > 0) {
      out[j] = static_cast<float>(static_cast<double>(acc[j]) / static_cast<double>(nnz[j]));
    }
  }
  return out;
}

inline double total_mass(std::span<const float> v) {
  double m = 0.0;
  for (float x : v) m += x;
  return m;
}

inline ScoreStats score_stats(const AttentionScores& s) {
  ScoreStats st;
  st.accumulated = accumulated_scores(s);
  st.normalized = normalized_scores(s);
  st.mass_total = total_mass(st.accumulated);
  return st;
}

enum class HeadAggregation { kMean, kSum };

/// Combines per-head statistics into one per-layer statistic.
inline ScoreStats aggregate_heads(std::span<const ScoreStats> heads, HeadAggregation how) {
  if (heads.empty()) throw EmptySequenceError("aggregate_heads: no heads");
  const std::size_t n = heads.front().accumulated.size();
  std::vector<double> acc(n, 0.0);
  std::vector<double> norm(n, 0.0);
  for (const auto& h : heads) {
    if (h.accumulated.size() != n || h.normalized.size() != n) {
      throw ShapeError("aggregate_heads: heads disagree on sequence length");
    }
    for (std::size_t j = 0; j < n; ++j) {
      acc[j] += h.accumulated[j];
      norm[j] += h.normalized[j];
    }
  }
  const double div = how == HeadAggregation::kMean ? static_cast<double>(heads.size()) : 1.0;
  ScoreStats out;
  out.accumulated.resize(n);
  out.normalized.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    out.accumulated[j] = static_cast<float>(acc[j] / div);
    out.normalized[j] = static_cast<float>(norm[j] / div);
  }
  out.mass_total = total_mass(out.accumulated);
  return out;
}

/// Causal attention among the retained positions only. Token important[i]
/// may attend to important[j] iff important[j] <= important[i]. Rows of the
/// n × d output outside `important` are zero. When `weights` is non-null it
/// receives the p × p attention matrix in retained-token order.
inline Matrix sparse_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                               std::span<const std::size_t> important, float scale,
                               Matrix* weights = nullptr) {
  if (q.rows() != k.rows() || k.rows() != v.rows()) {
    throw ShapeError("sparse_attention: q/k/v row counts differ");
  }
  if (q.cols() != k.cols()) throw ShapeError("sparse_attention: q/k width mismatch");
  for (std::size_t i = 0; i < important.size(); ++i) {
    if (important[i] >= q.rows()) throw BoundsError("sparse_attention: index out of range");
    if (i > 0 && important[i] <= important[i - 1]) {
      throw OrderingError("sparse_attention: retained set must be strictly increasing");
    }
  }
  const Matrix qt = gather_rows(q, important);
  const Matrix kt = gather_rows(k, important);
  const Matrix vt = gather_rows(v, important);
  // Within the gathered set, local causality is the lower triangle because
  // the retained positions are ascending.
  const IndexList local = all_positions(important.size());
  AttentionScores s = causal_scores(qt, local, kt, scale);
  const Matrix ot = matmul(s.scores, vt);
  Matrix out(q.rows(), v.cols());
  for (std::size_t i = 0; i < important.size(); ++i) {
    std::copy_n(ot.row(i).begin(), v.cols(), out.row(important[i]).begin());
  }
  if (weights != nullptr) *weights = std::move(s.scores);
  return out;
}

}  // namespace zipvl
