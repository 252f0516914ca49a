// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Layer-partitioned key/value cache, decode-time append, mixed-precision
// group quantization, byte accounting and a binary snapshot format.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "zipvl/budget.hpp"
#include "zipvl/numkit.hpp"

namespace zipvl {

struct HeadKV {
  Matrix keys;    // t × d_head
  Matrix values;  // t × d_head

  friend bool operator==(const HeadKV&, const HeadKV&) = default;
};

/// All heads of a layer share one ascending positions list.
struct LayerKV {
  IndexList positions;
  std::vector<HeadKV> heads;

  friend bool operator==(const LayerKV&, const LayerKV&) = default;
};

class KVCache {
 public:
  KVCache() = default;

  KVCache(std::size_t layers, std::size_t heads, std::size_t d_head)
      : heads_(heads), d_head_(d_head), layers_(layers) {
    for (auto& l : layers_) {
      l.heads.assign(heads, HeadKV{Matrix(0, d_head), Matrix(0, d_head)});
    }
  }

  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::size_t num_heads() const noexcept { return heads_; }
  std::size_t d_head() const noexcept { return d_head_; }

  const LayerKV& layer(std::size_t l) const {
    check_layer(l);
    return layers_[l];
  }

  std::size_t length(std::size_t l) const { return layer(l).positions.size(); }

  std::size_t total_rows() const noexcept {
    std::size_t t = 0;
    for (const auto& l : layers_) t += l.positions.size();
    return t;
  }

  /// Replaces a layer wholesale; used by prefill after selecting T.
  void set_layer(std::size_t l, LayerKV kv) {
    check_layer(l);
    validate(kv);
    layers_[l] = std::move(kv);
  }

  /// Keeps only rows whose position is in `keep` (ascending).
  void retain(std::size_t l, std::span<const std::size_t> keep) {
    check_layer(l);
    LayerKV& kv = layers_[l];
    IndexList rows;
    IndexList positions;
    std::size_t cursor = 0;
    for (auto pos : keep) {
      while (cursor < kv.positions.size() && kv.positions[cursor] < pos) ++cursor;
      if (cursor == kv.positions.size() || kv.positions[cursor] != pos) {
        throw BoundsError("retain: position " + std::to_string(pos) +
                          " not present in layer " + std::to_string(l));
      }
      rows.push_back(cursor);
      positions.push_back(pos);
    }
    for (auto& h : kv.heads) {
      h.keys = gather_rows(h.keys, rows);
      h.values = gather_rows(h.values, rows);
    }
    kv.positions = std::move(positions);
  }

  /// Appends one row per head; k_rows and v_rows are heads × d_head.
  void append(std::size_t l, const Matrix& k_rows, const Matrix& v_rows,
              std::size_t position) {
    check_layer(l);
    if (k_rows.rows() != heads_ || v_rows.rows() != heads_ || k_rows.cols() != d_head_ ||
        v_rows.cols() != d_head_) {
      throw ShapeError("append: expected " + std::to_string(heads_) + "x" +
                       std::to_string(d_head_) + " key/value rows");
    }
    LayerKV& kv = layers_[l];
    if (!kv.positions.empty() && position <= kv.positions.back()) {
      throw OrderingError("append: position " + std::to_string(position) +
                          " not after " + std::to_string(kv.positions.back()));
    }
    for (std::size_t h = 0; h < heads_; ++h) {
      kv.heads[h].keys.append_row(k_rows.row(h));
      kv.heads[h].values.append_row(v_rows.row(h));
    }
    kv.positions.push_back(position);
  }

  friend bool operator==(const KVCache&, const KVCache&) = default;

 private:
  void check_layer(std::size_t l) const {
    if (l >= layers_.size()) {
      throw BoundsError("kv cache: layer " + std::to_string(l) + " of " +
                        std::to_string(layers_.size()));
    }
  }

  void validate(const LayerKV& kv) const {
    if (kv.heads.size() != heads_) throw ShapeError("kv cache: head count mismatch");
    for (std::size_t i = 1; i < kv.positions.size(); ++i) {
      if (kv.positions[i] <= kv.positions[i - 1]) {
        throw OrderingError("kv cache: positions must be strictly increasing");
      }
    }
    for (const auto& h : kv.heads) {
      if (h.keys.rows() != kv.positions.size() || h.values.rows() != kv.positions.size() ||
          h.keys.cols() != d_head_ || h.values.cols() != d_head_) {
        throw ShapeError("kv cache: head tensor shape mismatch");
      }
    }
  }

  std::size_t heads_ = 0;
  std::size_t d_head_ = 0;
  std::vector<LayerKV> layers_;
};

inline KVCache retain(KVCache cache, const TokenPartition& partition, std::size_t layer) {
  cache.retain(layer, partition.important);
  return cache;
}

inline KVCache append(KVCache cache, const Matrix& k_rows, const Matrix& v_rows,
                      std::size_t position, std::size_t layer) {
  cache.append(layer, k_rows, v_rows, position);
  return cache;
}

// ---------------------------------------------------------------------------
// Mixed-precision quantization
//
// Each token row is split along channels into groups of `group_size`
// (the last group may be shorter). A group is stored as b-bit codes with a
// float scale and zero-point: scale = (max - min) / (2^b - 1), zero = min,
// code = round((x - zero) / scale). Important rows use 4 bits, the rest 2.
// ---------------------------------------------------------------------------

inline constexpr unsigned kImportantBits = 4;
inline constexpr unsigned kUnimportantBits = 2;
inline constexpr std::size_t kDefaultGroupSize = 64;

struct QuantizedGroup {
  std::vector<std::uint8_t> codes;
  float scale = 0.0F;
  float zero = 0.0F;
};

inline QuantizedGroup quantize_group(std::span<const float> x, unsigned bits) {
  if (bits != 2 && bits != 4) throw DomainError("quantize_group: bits must be 2 or 4");
  QuantizedGroup g;
  g.codes.resize(x.size());
  if (x.empty()) return g;
  const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
  const float levels = static_cast<float>((1U << bits) - 1U);
  g.zero = *mn;
  g.scale = (*mx - *mn) / levels;
  if (g.scale == 0.0F) return g;  // zero range: every code 0, value == zero
  // float rounding can push zero + levels * scale past the group max
  while (static_cast<double>(g.zero) + static_cast<double>(levels) * g.scale > *mx) {
    g.scale = std::nextafter(g.scale, 0.0F);
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double c = std::nearbyint((static_cast<double>(x[i]) - g.zero) / g.scale);
    g.codes[i] = static_cast<std::uint8_t>(std::clamp(c, 0.0, static_cast<double>(levels)));
  }
  return g;
}

/// Reconstruction clamped to the group range [zero, zero + levels * scale].
inline float dequantize_value(std::uint8_t code, float scale, float zero, unsigned bits) {
  const double hi = zero + static_cast<double>((1U << bits) - 1U) * scale;
  const double v = static_cast<double>(code) * scale + zero;
  return static_cast<float>(std::clamp(v, static_cast<double>(zero), hi));
}

/// Codes for one K or V tensor of one head, rows packed LSB-first into a
/// single bit stream; row r uses row_bits[r] bits per element.
struct QuantizedTensor {
  std::vector<std::uint8_t> packed;
  std::vector<float> scales;  // rows × groups
  std::vector<float> zeros;   // rows × groups

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

struct QuantizedLayer {
  IndexList positions;
  std::vector<std::uint8_t> row_bits;
  std::vector<QuantizedTensor> keys;    // per head
  std::vector<QuantizedTensor> values;  // per head

  friend bool operator==(const QuantizedLayer&, const QuantizedLayer&) = default;
};

struct QuantizedKV {
  std::size_t heads = 0;
  std::size_t d_head = 0;
  std::size_t group_size = kDefaultGroupSize;
  std::vector<QuantizedLayer> layers;

  std::size_t groups_per_row() const noexcept {
    return group_size == 0 ? 0 : (d_head + group_size - 1) / group_size;
  }
};

namespace detail {

inline std::size_t packed_bytes(std::span<const std::uint8_t> row_bits, std::size_t d_head) {
  std::size_t bits = 0;
  for (auto b : row_bits) bits += static_cast<std::size_t>(b) * d_head;
  return (bits + 7) / 8;
}

inline QuantizedTensor quantize_tensor(const Matrix& m, std::span<const std::uint8_t> row_bits,
                                       std::size_t group_size) {
  QuantizedTensor t;
  t.packed.assign(packed_bytes(row_bits, m.cols()), 0);
  std::size_t bitpos = 0;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const unsigned bits = row_bits[r];
    auto row = m.row(r);
    for (std::size_t g0 = 0; g0 < m.cols(); g0 += group_size) {
      const std::size_t len = std::min(group_size, m.cols() - g0);
      const QuantizedGroup g = quantize_group(row.subspan(g0, len), bits);
      t.scales.push_back(g.scale);
      t.zeros.push_back(g.zero);
      for (auto code : g.codes) {
        for (unsigned b = 0; b < bits; ++b, ++bitpos) {
          if ((code >> b) & 1U) t.packed[bitpos / 8] |= static_cast<std::uint8_t>(1U << (bitpos % 8));
        }
      }
    }
  }
  return t;
}

inline Matrix dequantize_tensor(const QuantizedTensor& t, std::span<const std::uint8_t> row_bits,
                                std::size_t d_head, std::size_t group_size) {
  const std::size_t rows = row_bits.size();
  const std::size_t groups = (d_head + group_size - 1) / group_size;
  if (t.packed.size() != packed_bytes(row_bits, d_head) || t.scales.size() != rows * groups ||
      t.zeros.size() != rows * groups) {
    throw FormatError("dequantize: packed buffer sizes do not match layout");
  }
  Matrix m(rows, d_head);
  std::size_t bitpos = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const unsigned bits = row_bits[r];
    if (bits != 2 && bits != 4) throw FormatError("dequantize: invalid row bit width");
    for (std::size_t c = 0; c < d_head; ++c) {
      std::uint8_t code = 0;
      for (unsigned b = 0; b < bits; ++b, ++bitpos) {
        if ((t.packed[bitpos / 8] >> (bitpos % 8)) & 1U) code |= static_cast<std::uint8_t>(1U << b);
      }
      const std::size_t gi = r * groups + c / group_size;
      m(r, c) = dequantize_value(code, t.scales[gi], t.zeros[gi], bits);
    }
  }
  return m;
}

}  // namespace detail

/// Rows whose position is in the layer's important set get 4 bits, others
/// 2. One partition per cache layer; group_size is clamped to d_head.
inline QuantizedKV quantize_mixed(const KVCache& cache,
                                  std::span<const TokenPartition> partitions,
                                  std::size_t group_size) {
  if (group_size < 1) throw DomainError("quantize_mixed: group_size must be >= 1");
  if (partitions.size() != cache.num_layers()) {
    throw ShapeError("quantize_mixed: need one partition per layer");
  }
  QuantizedKV q;
  q.heads = cache.num_heads();
  q.d_head = cache.d_head();
  q.group_size = std::min(group_size, std::max<std::size_t>(cache.d_head(), 1));
  for (std::size_t l = 0; l < cache.num_layers(); ++l) {
    const LayerKV& kv = cache.layer(l);
    const auto& imp = partitions[l].important;
    QuantizedLayer ql;
    ql.positions = kv.positions;
    for (auto pos : kv.positions) {
      const bool important = std::binary_search(imp.begin(), imp.end(), pos);
      ql.row_bits.push_back(static_cast<std::uint8_t>(important ? kImportantBits : kUnimportantBits));
    }
    for (const auto& h : kv.heads) {
      ql.keys.push_back(detail::quantize_tensor(h.keys, ql.row_bits, q.group_size));
      ql.values.push_back(detail::quantize_tensor(h.values, ql.row_bits, q.group_size));
    }
    q.layers.push_back(std::move(ql));
  }
  return q;
}

/// Same partition applied to every layer.
inline QuantizedKV quantize_mixed(const KVCache& cache, const TokenPartition& partition,
                                  std::size_t group_size) {
  std::vector<TokenPartition> parts(cache.num_layers(), partition);
  return quantize_mixed(cache, parts, group_size);
}

inline KVCache dequantize(const QuantizedKV& q) {
  if (q.group_size == 0) throw FormatError("dequantize: group_size is zero");
  KVCache cache(q.layers.size(), q.heads, q.d_head);
  for (std::size_t l = 0; l < q.layers.size(); ++l) {
    const QuantizedLayer& ql = q.layers[l];
    if (ql.row_bits.size() != ql.positions.size() || ql.keys.size() != q.heads ||
        ql.values.size() != q.heads) {
      throw FormatError("dequantize: layer " + std::to_string(l) + " metadata inconsistent");
    }
    LayerKV kv;
    kv.positions = ql.positions;
    for (std::size_t h = 0; h < q.heads; ++h) {
      kv.heads.push_back({detail::dequantize_tensor(ql.keys[h], ql.row_bits, q.d_head, q.group_size),
                          detail::dequantize_tensor(ql.values[h], ql.row_bits, q.d_head, q.group_size)});
    }
    cache.set_layer(l, std::move(kv));
  }
  return cache;
}

/// 2 (K and V) × Σ_layers heads × t_layer × d_head × 4 bytes.
inline std::size_t memory_bytes(const KVCache& cache) {
  return 2 * cache.num_heads() * cache.total_rows() * cache.d_head() * sizeof(float);
}

/// Σ over layers, heads and {K, V}: ⌈Σ_rows bits_row × d_head / 8⌉ packed
/// bytes, plus 8 bytes (float scale + float zero-point) per group.
inline std::size_t memory_bytes(const QuantizedKV& q) {
  std::size_t bytes = 0;
  for (const auto& l : q.layers) {
    const std::size_t per_tensor =
        detail::packed_bytes(l.row_bits, q.d_head) + 8 * l.row_bits.size() * q.groups_per_row();
    bytes += 2 * q.heads * per_tensor;
  }
  return bytes;
}

// ---------------------------------------------------------------------------
// Snapshot format (little-endian):
//   char[4] "ZVKV", u32 version (1), u32 layers, u32 heads, u32 d_head
//   per layer: u64 t, u64 positions[t],
//              per head: f32 keys[t*d_head], f32 values[t*d_head]
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes{};
  std::uint64_t bits = 0;
  if constexpr (std::is_same_v<T, float>) {
    std::uint32_t u = 0;
    std::memcpy(&u, &v, sizeof u);
    bits = u;
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) {
    throw FormatError("unexpected end of binary stream");
  }
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  if constexpr (std::is_same_v<T, float>) {
    auto u = static_cast<std::uint32_t>(bits);
    float f = 0;
    std::memcpy(&f, &u, sizeof f);
    return f;
  } else {
    return static_cast<T>(bits);
  }
}

inline void write_floats(std::ostream& os, std::span<const float> v) {
  for (float f : v) write_le<float>(os, f);
}

inline void read_floats(std::istream& is, std::span<float> v) {
  for (float& f : v) f = read_le<float>(is);
}

}  // namespace detail

inline constexpr std::uint32_t kSnapshotVersion = 1;

inline void save_snapshot(const KVCache& cache, std::ostream& os) {
  os.write("ZVKV", 4);
  detail::write_le<std::uint32_t>(os, kSnapshotVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cache.num_layers()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cache.num_heads()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cache.d_head()));
  for (std::size_t l = 0; l < cache.num_layers(); ++l) {
    const LayerKV& kv = cache.layer(l);
    detail::write_le<std::uint64_t>(os, kv.positions.size());
    for (auto p : kv.positions) detail::write_le<std::uint64_t>(os, p);
    for (const auto& h : kv.heads) {
      detail::write_floats(os, h.keys.data());
      detail::write_floats(os, h.values.data());
    }
  }
}

inline KVCache load_snapshot(std::istream& is) {
  char magic[4]{};
  if (!is.read(magic, 4) || std::memcmp(magic, "ZVKV", 4) != 0) {
    throw FormatError("kv snapshot: bad magic");
  }
  if (detail::read_le<std::uint32_t>(is) != kSnapshotVersion) {
    throw FormatError("kv snapshot: unsupported version");
  }
  const auto layers = detail::read_le<std::uint32_t>(is);
  const auto heads = detail::read_le<std::uint32_t>(is);
  const auto d_head = detail::read_le<std::uint32_t>(is);
  constexpr std::uint32_t kSanity = 1U << 20;
  if (layers > kSanity || heads > kSanity || d_head > kSanity) {
    throw FormatError("kv snapshot: implausible header");
  }
  KVCache cache(layers, heads, d_head);
  for (std::size_t l = 0; l < layers; ++l) {
    const auto t = detail::read_le<std::uint64_t>(is);
    if (t > kSanity) throw FormatError("kv snapshot: implausible row count");
    LayerKV kv;
    kv.positions.resize(t);
    for (auto& p : kv.positions) p = detail::read_le<std::uint64_t>(is);
    for (std::size_t h = 0; h < heads; ++h) {
      HeadKV hk{Matrix(t, d_head), Matrix(t, d_head)};
      detail::read_floats(is, hk.keys.data());
      detail::read_floats(is, hk.values.data());
      kv.heads.push_back(std::move(hk));
    }
    try {
      cache.set_layer(l, std::move(kv));
    } catch (const Error& e) {
      throw FormatError(std::string("kv snapshot: ") + e.what());
    }
  }
  return cache;
}

}  // namespace zipvl
