// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Dense numerics substrate: row-major float matrices, masked row softmax,
// a portable seeded RNG, top-k and descending cumulative sums.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "zipvl/error.hpp"

namespace zipvl {

using IndexList = std::vector<std::size_t>;
using ScoreVector = std::vector<float>;

class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0F)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }

  Matrix(std::initializer_list<std::initializer_list<float>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0F;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  void append_row(std::span<const float> values) {
    if (rows_ == 0 && cols_ == 0) cols_ = values.size();
    if (values.size() != cols_) {
      throw ShapeError("append_row: width " + std::to_string(values.size()) +
                       " != " + std::to_string(cols_));
    }
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// Per-row count of visible leading columns. Row r sees columns
/// [0, visible[r]); everything after is masked out.
struct CausalRowMask {
  std::vector<std::size_t> visible;

  /// Row r belongs to original position positions[r] and sees every column
  /// at or before it.
  static CausalRowMask causal(std::span<const std::size_t> positions) {
    CausalRowMask m;
    m.visible.reserve(positions.size());
    for (auto p : positions) m.visible.push_back(p + 1);
    return m;
  }

  static CausalRowMask lower_triangular(std::size_t rows) {
    CausalRowMask m;
    m.visible.resize(rows);
    std::iota(m.visible.begin(), m.visible.end(), std::size_t{1});
    return m;
  }

  static CausalRowMask full(std::size_t rows, std::size_t cols) {
    return CausalRowMask{std::vector<std::size_t>(rows, cols)};
  }
};

inline double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return acc;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " by " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  std::vector<double> acc(b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += aik * brow[j];
    }
    for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) = static_cast<float>(acc[j]);
  }
  return out;
}

/// a · bᵀ without materializing the transpose.
inline Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_transposed: inner dims " +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      out(i, j) = static_cast<float>(dot(a.row(i), b.row(j)));
    }
  }
  return out;
}

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m.rows()) throw BoundsError("gather_rows: row out of range");
    std::copy_n(m.row(rows[i]).begin(), m.cols(), out.row(i).begin());
  }
  return out;
}

inline Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t count) {
  if (begin + count > m.cols()) throw BoundsError("slice_cols: out of range");
  Matrix out(m.rows(), count);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    std::copy_n(m.row(r).begin() + static_cast<std::ptrdiff_t>(begin), count,
                out.row(r).begin());
  }
  return out;
}

/// Row softmax over the visible prefix of each row; masked entries are 0.
/// Exponentials and the normalizer are evaluated in double after subtracting
/// the row max.
inline Matrix masked_softmax_rows(const Matrix& logits, const CausalRowMask& mask) {
  if (mask.visible.size() != logits.rows()) {
    throw ShapeError("masked_softmax_rows: mask has " +
                     std::to_string(mask.visible.size()) + " rows, logits " +
                     std::to_string(logits.rows()));
  }
  Matrix out(logits.rows(), logits.cols());
  std::vector<double> e(logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const std::size_t vis = mask.visible[r];
    if (vis == 0) {
      throw DegenerateMaskError("masked_softmax_rows: row " + std::to_string(r) +
                                " has no visible column");
    }
    if (vis > logits.cols()) throw ShapeError("masked_softmax_rows: mask wider than row");
    auto in = logits.row(r);
    const float mx = *std::max_element(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(vis));
    double sum = 0.0;
    for (std::size_t c = 0; c < vis; ++c) {
      e[c] = std::exp(static_cast<double>(in[c]) - static_cast<double>(mx));
      sum += e[c];
    }
    auto o = out.row(r);
    for (std::size_t c = 0; c < vis; ++c) o[c] = static_cast<float>(e[c] / sum);
  }
  return out;
}

/// Indices of the k largest values, ties broken toward the smaller index,
/// returned in ascending index order.
inline IndexList topk_indices(std::span<const float> values, std::size_t k) {
  if (k < 1 || k > values.size()) {
    throw BoundsError("topk_indices: k=" + std::to_string(k) + " not in [1, " +
                      std::to_string(values.size()) + "]");
  }
  IndexList idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    return values[a] != values[b] ? values[a] > values[b] : a < b;
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1),
                   idx.end(), before);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Values sorted descending, then running sums (in double).
inline std::vector<double> cumsum_desc(std::span<const float> values) {
  std::vector<float> sorted(values.begin(), values.end());
  for (float v : sorted) {
    if (!(v >= 0.0F)) throw DomainError("cumsum_desc: negative or NaN input");
  }
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  std::vector<double> out(sorted.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    acc += sorted[i];
    out[i] = acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rng
//
// xoshiro256** (Blackman & Vigna) with its 256-bit state filled from the
// 64-bit seed by four splitmix64 steps. Integer-only, so streams are
// bit-identical on every platform. Floats take the top 24 bits of a draw.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream seed from a parent seed and a salt
/// (layer index, repeat index, ...).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t s = seed ^ (salt * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL);
  splitmix64(s);
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) on the 2^-24 grid.
  float uniform() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24F; }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform in (0, 1], never zero.
  double uniform_open0() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  /// Uniform integer in [0, bound) by rejection (no modulo bias).
  std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) throw DomainError("Rng::below: zero bound");
    const std::uint64_t limit = -bound % bound;  // 2^64 mod bound
    for (;;) {
      const std::uint64_t x = next_u64();
      if (x >= limit) return x % bound;
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t s_[4]{};
};

}  // namespace zipvl
