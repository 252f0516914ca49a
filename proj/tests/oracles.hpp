// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Independent reference implementations used only by tests. They avoid the
// library's code paths: plain loops, full sorts, brute-force searches.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "zipvl/numkit.hpp"

namespace zipvl::oracle {

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      out(i, j) = static_cast<float>(s);
    }
  }
  return out;
}

struct NaiveAttention {
  std::vector<std::vector<double>> scores;  // n × n
  std::vector<std::vector<double>> output;  // n × d
};

/// Three-loop causal softmax attention in double.
inline NaiveAttention naive_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                      double scale) {
  const std::size_t n = q.rows();
  NaiveAttention r;
  r.scores.assign(n, std::vector<double>(n, 0.0));
  r.output.assign(n, std::vector<double>(v.cols(), 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logit(i + 1);
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < q.cols(); ++c) s += static_cast<double>(q(i, c)) * k(j, c);
      logit[j] = s * scale;
    }
    const double mx = *std::max_element(logit.begin(), logit.end());
    double z = 0;
    for (auto& x : logit) {
      x = std::exp(x - mx);
      z += x;
    }
    for (std::size_t j = 0; j <= i; ++j) r.scores[i][j] = logit[j] / z;
    for (std::size_t c = 0; c < v.cols(); ++c) {
      double s = 0;
      for (std::size_t j = 0; j <= i; ++j) s += r.scores[i][j] * v(j, c);
      r.output[i][c] = s;
    }
  }
  return r;
}

/// Full sort with (value desc, index asc), first k, sorted by index.
inline IndexList full_sort_topk(const std::vector<float>& v, std::size_t k) {
  IndexList idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Tries every p from 1 to n, summing the top-p values from scratch.
inline std::size_t brute_force_budget(const std::vector<float>& scores, double tau, double mass) {
  std::vector<float> sorted = scores;
  std::sort(sorted.begin(), sorted.end(), [](float a, float b) { return a > b; });
  for (std::size_t p = 1; p <= sorted.size(); ++p) {
    double s = 0;
    for (std::size_t i = 0; i < p; ++i) s += sorted[i];
    if (s >= tau * mass) return p;
  }
  return sorted.size();
}

/// Column sums of each head's full causal score matrix, averaged over
/// heads, recomputed in double from a layer's normalized input.
inline std::vector<double> layer_mean_accumulated(const Matrix& xn, const Matrix& wq,
                                                  const Matrix& wk, std::size_t heads) {
  const Matrix q = naive_matmul(xn, wq);
  const Matrix k = naive_matmul(xn, wk);
  const std::size_t n = xn.rows();
  const std::size_t dh = q.cols() / heads;
  std::vector<double> acc(n, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    Matrix qh(n, dh), kh(n, dh);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < dh; ++c) {
        qh(i, c) = q(i, h * dh + c);
        kh(i, c) = k(i, h * dh + c);
      }
    }
    const NaiveAttention a = naive_attention(qh, kh, kh, 1.0 / std::sqrt(static_cast<double>(dh)));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j) acc[j] += a.scores[i][j];
    }
  }
  for (auto& x : acc) x /= static_cast<double>(heads);
  return acc;
}

struct BudgetCheck {
  bool retains_tau = false;  // top-p mass >= tau * mass (within tol)
  bool minimal = false;      // top-(p-1) mass < tau * mass (within tol)
  double top_p_fraction = 0.0;
};

/// Checks a chosen p against the budget definition on double scores; `tol`
/// is a fraction of the total mass absorbed by float/double rounding.
inline BudgetCheck check_budget(std::vector<double> scores, double tau, std::size_t p, double tol) {
  std::sort(scores.begin(), scores.end(), [](double a, double b) { return a > b; });
  double mass = 0;
  for (double s : scores) mass += s;
  double top = 0;
  for (std::size_t i = 0; i + 1 < p; ++i) top += scores[i];
  const double before = top;
  top += scores[p - 1];
  BudgetCheck r;
  r.top_p_fraction = top / mass;
  r.retains_tau = p == scores.size() || top >= (tau - tol) * mass;
  r.minimal = p == 1 || before < (tau + tol) * mass;
  return r;
}

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, float lo = -1.0F, float hi = 1.0F) {
  Matrix m(r, c);
  for (float& x : m.data()) x = rng.uniform(lo, hi);
  return m;
}

inline std::vector<float> random_scores(Rng& rng, std::size_t n) {
  std::vector<float> v(n);
  for (auto& x : v) x = rng.uniform();
  return v;
}

inline double sum(const std::vector<float>& v) {
  double s = 0;
  for (float x : v) s += x;
  return s;
}

}  // namespace zipvl::oracle
