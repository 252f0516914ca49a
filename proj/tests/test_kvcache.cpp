// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "zipvl/attention.hpp"
#include "zipvl/kvcache.hpp"

namespace zipvl {
namespace {

// Cache with `t` rows per layer at positions 0..t-1; values encode
// (layer, head, row, channel) so gathers are easy to verify.
KVCache filled_cache(std::size_t layers, std::size_t heads, std::size_t t, std::size_t d) {
  KVCache c(layers, heads, d);
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t pos = 0; pos < t; ++pos) {
      Matrix k(heads, d);
      Matrix v(heads, d);
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t ch = 0; ch < d; ++ch) {
          k(h, ch) = static_cast<float>(1000 * l + 100 * h + 10 * pos + ch);
          v(h, ch) = -k(h, ch);
        }
      }
      c.append(l, k, v, pos);
    }
  }
  return c;
}

KVCache random_cache(Rng& rng, std::size_t layers, std::size_t heads, std::size_t t, std::size_t d) {
  KVCache c(layers, heads, d);
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t pos = 0; pos < t; ++pos) {
      c.append(l, oracle::random_matrix(rng, heads, d, -3, 3), oracle::random_matrix(rng, heads, d, -3, 3),
               pos);
    }
  }
  return c;
}

TEST(Retain, AllPositionsIsIdentity) {
  const KVCache c = filled_cache(2, 2, 4, 3);
  EXPECT_EQ(retain(c, TokenPartition{{0, 1, 2, 3}, {}}, 0), c);
}

TEST(Retain, SubsetGathersRows) {
  const KVCache c = retain(filled_cache(2, 2, 4, 3), TokenPartition{{1, 2}, {0, 3}}, 1);
  EXPECT_EQ(c.layer(1).positions, (IndexList{1, 2}));
  EXPECT_EQ(c.length(0), 4U);
  for (std::size_t h = 0; h < 2; ++h) {
    ASSERT_EQ(c.layer(1).heads[h].keys.rows(), 2U);
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const float want = static_cast<float>(1000 + 100 * h + 10 * (r + 1) + ch);
        EXPECT_EQ(c.layer(1).heads[h].keys(r, ch), want);
        EXPECT_EQ(c.layer(1).heads[h].values(r, ch), -want);
      }
    }
  }
}

TEST(Retain, SingleRow) {
  const KVCache c = retain(filled_cache(1, 2, 4, 3), TokenPartition{{0}, {1, 2, 3}}, 0);
  EXPECT_EQ(c.length(0), 1U);
  EXPECT_EQ(c.layer(0).heads[1].keys(0, 2), 102.0F);
}

TEST(Retain, Idempotent) {
  const TokenPartition p{{0, 2, 5}, {1, 3, 4}};
  const KVCache once = retain(filled_cache(2, 2, 6, 4), p, 0);
  EXPECT_EQ(retain(once, p, 0), once);
}

TEST(Retain, Errors) {
  const KVCache c = filled_cache(2, 1, 4, 2);
  EXPECT_THROW(retain(c, TokenPartition{{0}, {}}, 2), BoundsError);
  EXPECT_THROW(retain(c, TokenPartition{{7}, {}}, 0), BoundsError);
}

TEST(Append, EmptyCacheGetsOneRowBitExact) {
  KVCache c(1, 2, 3);
  const Matrix k{{0.1F, 0.2F, 0.3F}, {1e-30F, -7.0F, 3.5F}};
  const Matrix v{{4, 5, 6}, {7, 8, 9}};
  c = append(std::move(c), k, v, 9, 0);
  EXPECT_EQ(c.length(0), 1U);
  EXPECT_EQ(c.layer(0).positions, (IndexList{9}));
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      EXPECT_EQ(c.layer(0).heads[h].keys(0, ch), k(h, ch));
      EXPECT_EQ(c.layer(0).heads[h].values(0, ch), v(h, ch));
    }
  }
}

TEST(Append, LengthAccountingAfterRetain) {
  KVCache c = filled_cache(2, 2, 10, 4);
  c.retain(0, IndexList{1, 4, 8});
  c.retain(1, IndexList{0, 9});
  for (std::size_t s = 0; s < 5; ++s) {
    for (std::size_t l = 0; l < 2; ++l) c.append(l, Matrix(2, 4), Matrix(2, 4), 10 + s);
  }
  EXPECT_EQ(c.length(0), 3U + 5U);
  EXPECT_EQ(c.length(1), 2U + 5U);
  EXPECT_EQ(c.total_rows(), 15U);
}

TEST(Append, Errors) {
  KVCache c = filled_cache(1, 2, 3, 2);
  EXPECT_THROW(c.append(0, Matrix(2, 2), Matrix(2, 2), 2), OrderingError);
  EXPECT_THROW(c.append(0, Matrix(1, 2), Matrix(2, 2), 5), ShapeError);
  EXPECT_THROW(c.append(3, Matrix(2, 2), Matrix(2, 2), 5), BoundsError);
}

TEST(QuantizeGroup, GridValuesRoundTripExactly) {
  const std::vector<float> x{0, 1, 2, 3};
  const QuantizedGroup g = quantize_group(x, 2);
  EXPECT_EQ(g.codes, (std::vector<std::uint8_t>{0, 1, 2, 3}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(dequantize_value(g.codes[i], g.scale, g.zero, 2), x[i]);
}

TEST(QuantizeGroup, ConstantGroupRoundTripsExactly) {
  const std::vector<float> x{5, 5, 5, 5};
  for (unsigned b : {2U, 4U}) {
    const QuantizedGroup g = quantize_group(x, b);
    EXPECT_EQ(g.scale, 0.0F);
    for (auto code : g.codes) EXPECT_EQ(dequantize_value(code, g.scale, g.zero, b), 5.0F);
  }
}

TEST(QuantizeGroup, HalfStepBoundOnRandomGroups) {
  Rng rng(40);
  for (unsigned b : {2U, 4U}) {
    for (int t = 0; t < 10000; ++t) {
      const std::size_t len = 1 + rng.below(64);
      const float spread = std::ldexp(1.0F, static_cast<int>(rng.below(12)) - 6);
      std::vector<float> x(len);
      for (auto& v : x) v = rng.uniform(-spread, spread);
      const QuantizedGroup g = quantize_group(x, b);
      const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
      const double bound = (static_cast<double>(*mx) - *mn) / (2.0 * ((1U << b) - 1U)) + 1e-6;
      for (std::size_t i = 0; i < len; ++i) {
        const float r = dequantize_value(g.codes[i], g.scale, g.zero, b);
        ASSERT_LE(std::abs(static_cast<double>(x[i]) - r), bound);
        ASSERT_GE(r, *mn);
        ASSERT_LE(r, *mx);
      }
    }
  }
}

TEST(QuantizeGroup, BadBitWidthThrows) {
  EXPECT_THROW(quantize_group(std::vector<float>{1, 2}, 3), DomainError);
}

TEST(QuantizeMixed, PreservesShapePositionsAndBitAssignment) {
  Rng rng(41);
  KVCache c = random_cache(rng, 2, 2, 8, 16);
  c.retain(1, IndexList{0, 3, 5, 7});
  const TokenPartition part{{3, 5}, {0, 1, 2, 4, 6, 7}};
  const QuantizedKV q = quantize_mixed(c, part, 4);
  EXPECT_EQ(q.layers[1].row_bits, (std::vector<std::uint8_t>{2, 4, 4, 2}));
  const KVCache d = dequantize(q);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(d.layer(l).positions, c.layer(l).positions);
    for (std::size_t h = 0; h < 2; ++h) {
      EXPECT_EQ(d.layer(l).heads[h].keys.rows(), c.layer(l).heads[h].keys.rows());
      EXPECT_EQ(d.layer(l).heads[h].values.cols(), 16U);
    }
  }
}

TEST(QuantizeMixed, PerRowErrorWithinItsHalfStep) {
  Rng rng(42);
  const std::size_t d = 12;
  const std::size_t gs = 5;  // last group shorter than the rest
  const KVCache c = random_cache(rng, 1, 3, 20, d);
  IndexList imp;
  for (std::size_t i = 0; i < 20; i += 3) imp.push_back(i);
  const QuantizedKV q = quantize_mixed(c, TokenPartition{imp, {}}, gs);
  const KVCache r = dequantize(q);
  for (std::size_t h = 0; h < 3; ++h) {
    const Matrix& x = c.layer(0).heads[h].keys;
    const Matrix& y = r.layer(0).heads[h].keys;
    for (std::size_t row = 0; row < 20; ++row) {
      const unsigned b = row % 3 == 0 ? 4 : 2;
      for (std::size_t g0 = 0; g0 < d; g0 += gs) {
        const std::size_t len = std::min(gs, d - g0);
        float mn = x(row, g0), mx = x(row, g0);
        for (std::size_t ch = g0; ch < g0 + len; ++ch) {
          mn = std::min(mn, x(row, ch));
          mx = std::max(mx, x(row, ch));
        }
        const double bound = (static_cast<double>(mx) - mn) / (2.0 * ((1U << b) - 1U)) + 1e-6;
        for (std::size_t ch = g0; ch < g0 + len; ++ch) {
          EXPECT_LE(std::abs(static_cast<double>(x(row, ch)) - y(row, ch)), bound);
        }
      }
    }
  }
}

TEST(QuantizeMixed, FourBitErrorNotWorseThanTwoBitBound) {
  Rng rng(43);
  const KVCache c = random_cache(rng, 1, 1, 50, 16);
  const KVCache hi = dequantize(quantize_mixed(c, TokenPartition{all_positions(50), {}}, 16));
  for (std::size_t row = 0; row < 50; ++row) {
    const auto x = c.layer(0).heads[0].keys.row(row);
    const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
    const double two_bit_bound = (static_cast<double>(*mx) - *mn) / 6.0 + 1e-6;
    for (std::size_t ch = 0; ch < 16; ++ch) {
      EXPECT_LE(std::abs(static_cast<double>(x[ch]) - hi.layer(0).heads[0].keys(row, ch)), two_bit_bound);
    }
  }
}

TEST(QuantizeMixed, AllZeroCacheReconstructsZero) {
  KVCache c(2, 2, 8);
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t p = 0; p < 3; ++p) c.append(l, Matrix(2, 8), Matrix(2, 8), p);
  }
  EXPECT_EQ(dequantize(quantize_mixed(c, TokenPartition{{1}, {0, 2}}, 64)), c);
}

TEST(QuantizeMixed, CorruptPackingThrows) {
  Rng rng(44);
  QuantizedKV q = quantize_mixed(random_cache(rng, 1, 1, 4, 8), TokenPartition{{0}, {}}, 4);
  q.layers[0].keys[0].packed.pop_back();
  EXPECT_THROW(dequantize(q), FormatError);
  QuantizedKV q2 = quantize_mixed(random_cache(rng, 1, 1, 4, 8), TokenPartition{{0}, {}}, 4);
  q2.layers[0].row_bits[1] = 3;
  EXPECT_THROW(dequantize(q2), FormatError);
}

TEST(MemoryBytes, Examples) {
  // 2 (K,V) * 2 layers * 2 heads * 10 rows * 8 channels * 4 bytes
  EXPECT_EQ(memory_bytes(filled_cache(2, 2, 10, 8)), 2560U);
  EXPECT_EQ(memory_bytes(KVCache(2, 2, 8)), 0U);
  KVCache half = filled_cache(2, 2, 10, 8);
  half.retain(0, IndexList{0, 2, 4, 6, 8});
  half.retain(1, IndexList{1, 3, 5, 7, 9});
  EXPECT_EQ(memory_bytes(half) * 2, 2560U);
}

TEST(MemoryBytes, QuantizedFormula) {
  // 1 layer, 1 head, d=8, group 4: rows at 4 and 2 bits.
  Rng rng(45);
  const QuantizedKV q = quantize_mixed(random_cache(rng, 1, 1, 2, 8), TokenPartition{{0}, {1}}, 4);
  // per tensor: ceil((4*8 + 2*8) / 8) = 6 packed bytes + 2 rows * 2 groups * 8 = 32
  EXPECT_EQ(memory_bytes(q), 2U * (6U + 32U));
  EXPECT_EQ(q.layers[0].keys[0].packed.size(), 6U);
}

TEST(MemoryBytes, QuantizedSmallerWhenGroupAtLeastFour) {
  Rng rng(46);
  for (std::size_t gs : {4U, 8U, 64U}) {
    for (std::size_t t : {1U, 7U, 40U}) {
      const KVCache c = random_cache(rng, 2, 2, t, 16);
      IndexList imp{0};
      EXPECT_LT(memory_bytes(quantize_mixed(c, TokenPartition{imp, {}}, gs)), memory_bytes(c));
      EXPECT_LT(memory_bytes(quantize_mixed(c, TokenPartition{all_positions(t), {}}, gs)), memory_bytes(c));
    }
  }
}

TEST(Snapshot, RoundTripIsBitExact) {
  Rng rng(47);
  KVCache c = random_cache(rng, 3, 2, 9, 5);
  c.retain(1, IndexList{2, 3, 8});
  std::stringstream ss;
  save_snapshot(c, ss);
  EXPECT_EQ(load_snapshot(ss), c);
}

TEST(Snapshot, HeaderIsLittleEndian) {
  std::stringstream ss;
  save_snapshot(KVCache(2, 3, 4), ss);
  const std::string s = ss.str();
  ASSERT_GE(s.size(), 20U);
  EXPECT_EQ(s.substr(0, 4), "ZVKV");
  EXPECT_EQ(s[4], '\x01');
  EXPECT_EQ(s[8], '\x02');
  EXPECT_EQ(s[12], '\x03');
  EXPECT_EQ(s[16], '\x04');
}

TEST(Snapshot, CorruptInputThrowsFormatError) {
  Rng rng(48);
  std::stringstream good;
  save_snapshot(random_cache(rng, 1, 1, 3, 2), good);
  const std::string bytes = good.str();

  std::stringstream bad_magic("ZVKX" + bytes.substr(4));
  EXPECT_THROW(load_snapshot(bad_magic), FormatError);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_snapshot(truncated), FormatError);
  std::string v2 = bytes;
  v2[4] = '\x02';
  std::stringstream bad_version(v2);
  EXPECT_THROW(load_snapshot(bad_version), FormatError);
}

}  // namespace
}  // namespace zipvl
