// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// A tiny pre-norm causal transformer with interchangeable attention
// pipelines. Prefill selects a per-layer important-token set, runs attention
// among those tokens only and caches their keys/values; decoding appends to
// that cache and never re-budgets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "zipvl/attention.hpp"
#include "zipvl/budget.hpp"
#include "zipvl/kvcache.hpp"
#include "zipvl/metrics.hpp"
#include "zipvl/numkit.hpp"
#include "zipvl/policy.hpp"

namespace zipvl {

struct LayerWeights {
  Matrix wq, wk, wv, wo;  // d_model × d_model, head h owns columns [h*d_head, (h+1)*d_head)
  Matrix w1;              // d_model × d_ff
  Matrix w2;              // d_ff × d_model
  std::vector<float> attn_gain;
  std::vector<float> mlp_gain;

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct TinyTransformer {
  ModelConfig config;
  Matrix embedding;   // vocab × d_model, also the output head
  Matrix positional;  // max_seq × d_model
  std::vector<LayerWeights> layers;
  std::vector<float> final_gain;

  friend bool operator==(const TinyTransformer&, const TinyTransformer&) = default;
};

namespace detail {

inline Matrix uniform_matrix(Rng& rng, std::size_t rows, std::size_t cols, float bound) {
  Matrix m(rows, cols);
  for (float& v : m.data()) v = rng.uniform(-bound, bound);
  return m;
}

inline float fan_in_bound(std::size_t fan_in) {
  return static_cast<float>(1.0 / std::sqrt(static_cast<double>(fan_in)));
}

}  // namespace detail

/// Weights are drawn from Rng(config.seed) in this order: embedding U(±1),
/// positional U(±0.5), then per layer Wq, Wk, Wv, Wo, W1, W2 each
/// U(±1/√fan_in). Norm gains start at 1.
inline TinyTransformer init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  TinyTransformer m;
  m.config = config;
  const std::size_t d = config.d_model;
  m.embedding = detail::uniform_matrix(rng, config.vocab_size, d, 1.0F);
  m.positional = detail::uniform_matrix(rng, config.max_seq, d, 0.5F);
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerWeights w;
    w.wq = detail::uniform_matrix(rng, d, d, detail::fan_in_bound(d));
    w.wk = detail::uniform_matrix(rng, d, d, detail::fan_in_bound(d));
    w.wv = detail::uniform_matrix(rng, d, d, detail::fan_in_bound(d));
    w.wo = detail::uniform_matrix(rng, d, d, detail::fan_in_bound(d));
    w.w1 = detail::uniform_matrix(rng, d, config.d_ff(), detail::fan_in_bound(d));
    w.w2 = detail::uniform_matrix(rng, config.d_ff(), d, detail::fan_in_bound(config.d_ff()));
    w.attn_gain.assign(d, 1.0F);
    w.mlp_gain.assign(d, 1.0F);
    m.layers.push_back(std::move(w));
  }
  m.final_gain.assign(d, 1.0F);
  return m;
}

inline Matrix rms_norm(const Matrix& x, std::span<const float> gain, float eps) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double ss = 0.0;
    for (float v : in) ss += static_cast<double>(v) * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.cols()) + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c) o[c] = static_cast<float>(in[c] * inv * gain[c]);
  }
  return out;
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("add: shape mismatch");
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) da[i] += db[i];
}

inline Matrix mlp(const LayerWeights& w, const Matrix& x) {
  Matrix h = matmul(x, w.w1);
  for (float& v : h.data()) v = std::max(v, 0.0F);
  return matmul(h, w.w2);
}

/// Intermediate state of one prefill layer, captured on request.
struct LayerTrace {
  Matrix residual_in;        // before attention
  Matrix attn_input;         // normalized residual fed to Q/K/V
  Matrix attn_output;        // concatenated head outputs, before Wo
  Matrix residual_mid;       // after the attention residual add
  ScoreStats stats;          // head-aggregated importance statistics
  IndexList score_rows;      // rows whose scores were computed
  LayerBudget budget;
  TokenPartition partition;
  std::vector<Matrix> head_weights;  // p × p sparse attention per head
};

struct PrefillResult {
  Matrix logits;  // n × vocab
  KVCache cache;
  std::vector<LayerReport> reports;
  std::vector<TokenPartition> partitions;
  std::optional<QuantizedKV> quantized;  // set when the policy quantizes
};

namespace detail {

inline Matrix embed(const TinyTransformer& m, std::span<const std::size_t> tokens,
                    std::size_t first_position) {
  const std::size_t d = m.config.d_model;
  Matrix x(tokens.size(), d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= m.config.vocab_size) {
      throw VocabError("token id " + std::to_string(tokens[i]) + " >= vocab size " +
                       std::to_string(m.config.vocab_size));
    }
    const std::size_t pos = first_position + i;
    if (pos >= m.config.max_seq) {
      throw BoundsError("position " + std::to_string(pos) + " >= max_seq " +
                        std::to_string(m.config.max_seq));
    }
    auto e = m.embedding.row(tokens[i]);
    auto p = m.positional.row(pos);
    auto o = x.row(i);
    for (std::size_t c = 0; c < d; ++c) o[c] = e[c] + p[c];
  }
  return x;
}

inline Matrix output_logits(const TinyTransformer& m, const Matrix& h) {
  return matmul_transposed(rms_norm(h, m.final_gain, m.config.norm_eps), m.embedding);
}

inline std::uint64_t non_attention_flops(const ModelConfig& c, std::uint64_t n) {
  const std::uint64_t d = c.d_model;
  return 8 * n * d * d + 4 * n * d * c.d_ff();
}

}  // namespace detail

/// Seed of the probe-row draw for one layer.
inline std::uint64_t probe_seed(const TinyTransformer& m, std::size_t layer) {
  return derive_seed(m.config.seed, layer);
}

inline PrefillResult prefill(const TinyTransformer& model, std::span<const std::size_t> tokens,
                             const SparsityPolicy& policy,
                             std::vector<LayerTrace>* trace = nullptr) {
  if (tokens.empty()) throw EmptySequenceError("prefill: empty token list");
  policy.validate();
  const ModelConfig& cfg = model.config;
  const std::size_t n = tokens.size();
  const std::size_t H = cfg.heads;
  const std::size_t dh = cfg.d_head();
  const float scale = default_scale(dh);

  Matrix h = detail::embed(model, tokens, 0);
  PrefillResult res;
  res.cache = KVCache(cfg.layers, H, dh);
  if (trace != nullptr) trace->clear();

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerWeights& w = model.layers[l];
    LayerTrace lt;
    if (trace != nullptr) lt.residual_in = h;

    const Matrix xn = rms_norm(h, w.attn_gain, cfg.norm_eps);
    const QKV full = compute_qkv(xn, w.wq, w.wk, w.wv);
    std::vector<QKV> heads;
    heads.reserve(H);
    for (std::size_t hd = 0; hd < H; ++hd) {
      heads.push_back({slice_cols(full.q, hd * dh, dh), slice_cols(full.k, hd * dh, dh),
                       slice_cols(full.v, hd * dh, dh)});
    }

    const AttentionMode mode = l < policy.dense_first_layers ? AttentionMode::kDense : policy.mode;
    LayerBudget budget{0.0, n, n, 1.0};
    TokenPartition part{all_positions(n), {}};
    IndexList score_rows;
    std::size_t charged_rows = 0;

    if (mode != AttentionMode::kDense) {
      if (mode == AttentionMode::kZipvlProbe) {
        score_rows = select_probe_set(n, policy.probe_recent, policy.probe_random,
                                      probe_seed(model, l)).indices;
        charged_rows = score_rows.size();
      } else {
        score_rows = all_positions(n);
      }
      std::vector<ScoreStats> per_head;
      per_head.reserve(H);
      for (const auto& hq : heads) {
        per_head.push_back(score_stats(causal_scores(hq.q, score_rows, hq.k, scale)));
      }
      ScoreStats stats = aggregate_heads(per_head, policy.head_aggregation);

      const ScoreVector& budget_vec = policy.budget_metric == ScoreMetric::kAccumulated
                                          ? stats.accumulated
                                          : stats.normalized;
      const ScoreVector& ident_vec = policy.identify_metric == ScoreMetric::kAccumulated
                                         ? stats.accumulated
                                         : stats.normalized;
      const double mass = total_mass(budget_vec);
      budget = mode == AttentionMode::kFixed ? fixed_budget(budget_vec, policy.fixed_ratio, mass)
                                             : adaptive_budget(budget_vec, policy.tau, mass);
      part = partition_tokens(ident_vec, budget.p, policy.keep_last);
      if (part.important.size() != budget.p) {
        budget.retained_mass_fraction = top_mass_fraction(budget_vec, part.important.size(), mass);
      }
      if (trace != nullptr) lt.stats = std::move(stats);
    }

    const IndexList& T = part.important;
    const std::size_t p = T.size();
    Matrix attn(n, cfg.d_model);
    LayerKV kv;
    kv.positions = policy.quantize ? all_positions(n) : T;
    for (std::size_t hd = 0; hd < H; ++hd) {
      const QKV& hq = heads[hd];
      Matrix weights;
      const Matrix out = sparse_attention(hq.q, hq.k, hq.v, T, scale,
                                          trace != nullptr ? &weights : nullptr);
      for (std::size_t r = 0; r < n; ++r) {
        std::copy_n(out.row(r).begin(), dh,
                    attn.row(r).begin() + static_cast<std::ptrdiff_t>(hd * dh));
      }
      kv.heads.push_back({gather_rows(hq.k, kv.positions), gather_rows(hq.v, kv.positions)});
      if (trace != nullptr) lt.head_weights.push_back(std::move(weights));
    }
    res.cache.set_layer(l, std::move(kv));

    add_inplace(h, matmul(attn, w.wo));
    if (trace != nullptr) {
      lt.attn_input = xn;
      lt.attn_output = attn;
      lt.residual_mid = h;
    }
    add_inplace(h, mlp(w, rms_norm(h, w.mlp_gain, cfg.norm_eps)));

    LayerReport rep;
    rep.layer = l;
    rep.n = n;
    rep.p = p;
    rep.ratio = static_cast<double>(p) / static_cast<double>(n);
    rep.retained_mass = budget.retained_mass_fraction.value_or(1.0);
    rep.score_rows = charged_rows;
    rep.attn_flops = mode == AttentionMode::kDense
                         ? attn_flops_dense(n, dh, H)
                         : attn_flops_sparse(p, n, dh, H, charged_rows);
    rep.kv_rows = res.cache.length(l);
    res.reports.push_back(rep);

    if (trace != nullptr) {
      lt.score_rows = std::move(score_rows);
      lt.budget = budget;
      lt.partition = part;
      trace->push_back(std::move(lt));
    }
    res.partitions.push_back(std::move(part));
  }

  if (policy.quantize) {
    res.quantized = quantize_mixed(res.cache, res.partitions, policy.group_size);
    res.cache = dequantize(*res.quantized);
  }
  res.logits = detail::output_logits(model, h);
  return res;
}

/// One autoregressive step: appends the token's key/value to every layer
/// and attends over the whole cached set. Returns next-token logits.
inline std::vector<float> decode_step(const TinyTransformer& model, std::size_t token,
                                      KVCache& cache, std::size_t position) {
  const ModelConfig& cfg = model.config;
  if (cache.num_layers() != cfg.layers || cache.num_heads() != cfg.heads ||
      cache.d_head() != cfg.d_head()) {
    throw ShapeError("decode_step: cache does not match model config");
  }
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& pos = cache.layer(l).positions;
    if (!pos.empty() && position <= pos.back()) {
      throw OrderingError("decode_step: position " + std::to_string(position) +
                          " not after cached position " + std::to_string(pos.back()));
    }
  }
  const std::size_t H = cfg.heads;
  const std::size_t dh = cfg.d_head();
  const float scale = default_scale(dh);
  const std::size_t tok[1] = {token};
  Matrix h = detail::embed(model, tok, position);

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerWeights& w = model.layers[l];
    const Matrix xn = rms_norm(h, w.attn_gain, cfg.norm_eps);
    const QKV qkv = compute_qkv(xn, w.wq, w.wk, w.wv);
    Matrix k_rows(H, dh);
    Matrix v_rows(H, dh);
    for (std::size_t hd = 0; hd < H; ++hd) {
      std::copy_n(qkv.k.row(0).begin() + static_cast<std::ptrdiff_t>(hd * dh), dh, k_rows.row(hd).begin());
      std::copy_n(qkv.v.row(0).begin() + static_cast<std::ptrdiff_t>(hd * dh), dh, v_rows.row(hd).begin());
    }
    cache.append(l, k_rows, v_rows, position);

    Matrix attn(1, cfg.d_model);
    const LayerKV& kv = cache.layer(l);
    for (std::size_t hd = 0; hd < H; ++hd) {
      const Matrix q = slice_cols(qkv.q, hd * dh, dh);
      Matrix scaled(1, kv.positions.size());
      for (std::size_t j = 0; j < scaled.cols(); ++j) {
        // same rounding path as causal_scores
        scaled(0, j) = static_cast<float>(dot(q.row(0), kv.heads[hd].keys.row(j)) * scale);
      }
      const Matrix a = masked_softmax_rows(scaled, CausalRowMask::full(1, scaled.cols()));
      const Matrix o = matmul(a, kv.heads[hd].values);
      std::copy_n(o.row(0).begin(), dh, attn.row(0).begin() + static_cast<std::ptrdiff_t>(hd * dh));
    }
    add_inplace(h, matmul(attn, w.wo));
    add_inplace(h, mlp(w, rms_norm(h, w.mlp_gain, cfg.norm_eps)));
  }
  const Matrix logits = detail::output_logits(model, h);
  return {logits.row(0).begin(), logits.row(0).end()};
}

/// Index of the largest logit, smaller index on ties.
inline std::size_t argmax(std::span<const float> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

/// Draws from softmax(logits).
inline std::size_t sample(std::span<const float> logits, Rng& rng) {
  const float mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> cdf(logits.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    acc += std::exp(static_cast<double>(logits[i]) - mx);
    cdf[i] = acc;
  }
  const double u = static_cast<double>(rng.next_u64() >> 11) * 0x1.0p-53 * acc;
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), logits.size() - 1);
}

/// Run report for a finished prefill; `generated` is left empty. KV bytes
/// are measured on the prefill cache (quantized bytes when quantizing).
inline RunReport make_report(const TinyTransformer& model, std::span<const std::size_t> prompt,
                             const SparsityPolicy& policy, const PrefillResult& pre) {
  const ModelConfig& cfg = model.config;
  RunReport r;
  r.model = cfg;
  r.policy = policy;
  r.prompt.assign(prompt.begin(), prompt.end());
  r.layers = pre.reports;
  r.kv_bytes_dense = 2 * cfg.layers * cfg.heads * prompt.size() * cfg.d_head() * sizeof(float);
  r.kv_bytes_actual = pre.quantized ? memory_bytes(*pre.quantized) : memory_bytes(pre.cache);
  std::uint64_t mf = 2ULL * prompt.size() * cfg.d_model * cfg.vocab_size;
  for (const auto& lr : pre.reports) mf += detail::non_attention_flops(cfg, lr.n) + lr.attn_flops;
  r.model_flops = mf;
  finalize_totals(r, cfg.d_head(), cfg.heads);
  return r;
}

struct GenerateResult {
  IndexList tokens;  // prompt followed by generated tokens
  RunReport report;
};

/// Prefill, then produce `steps` new tokens. The first comes from the
/// prefill logits; each later one from a decode_step fed the previous token.
inline GenerateResult generate(const TinyTransformer& model, std::span<const std::size_t> prompt,
                               std::size_t steps, const SparsityPolicy& policy,
                               bool greedy = true, std::uint64_t sample_seed = 0) {
  const ModelConfig& cfg = model.config;
  if (prompt.size() + steps > cfg.max_seq + 1) {
    throw BoundsError("generate: prompt + steps exceeds max_seq");
  }
  PrefillResult pre = prefill(model, prompt, policy);
  Rng rng(sample_seed);
  auto pick = [&](std::span<const float> logits) {
    return greedy ? argmax(logits) : sample(logits, rng);
  };

  GenerateResult out;
  out.tokens.assign(prompt.begin(), prompt.end());
  out.report = make_report(model, prompt, policy, pre);
  RunReport& r = out.report;

  if (steps == 0) return out;
  std::size_t next = pick(pre.logits.row(pre.logits.rows() - 1));
  r.generated.push_back(next);
  for (std::size_t i = 1; i < steps; ++i) {
    const auto logits = decode_step(model, next, pre.cache, prompt.size() + i - 1);
    next = pick(logits);
    r.generated.push_back(next);
  }
  out.tokens.insert(out.tokens.end(), r.generated.begin(), r.generated.end());
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint format (little-endian):
//   char[4] "ZVMD", u32 version (1),
//   u64 layers, heads, d_model, vocab_size, max_seq, seed; f32 norm_eps
//   f32 blobs in order: embedding, positional, per layer {wq, wk, wv, wo,
//   w1, w2, attn_gain, mlp_gain}, final_gain. Shapes follow from the header.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const TinyTransformer& m, std::ostream& os) {
  using detail::write_floats;
  using detail::write_le;
  os.write("ZVMD", 4);
  write_le<std::uint32_t>(os, kCheckpointVersion);
  const ModelConfig& c = m.config;
  for (std::uint64_t v : {std::uint64_t{c.layers}, std::uint64_t{c.heads}, std::uint64_t{c.d_model},
                          std::uint64_t{c.vocab_size}, std::uint64_t{c.max_seq}, c.seed}) {
    write_le<std::uint64_t>(os, v);
  }
  write_le<float>(os, c.norm_eps);
  write_floats(os, m.embedding.data());
  write_floats(os, m.positional.data());
  for (const auto& w : m.layers) {
    for (const Matrix* mat : {&w.wq, &w.wk, &w.wv, &w.wo, &w.w1, &w.w2}) write_floats(os, mat->data());
    write_floats(os, w.attn_gain);
    write_floats(os, w.mlp_gain);
  }
  write_floats(os, m.final_gain);
}

inline TinyTransformer load_checkpoint(std::istream& is) {
  using detail::read_le;
  char magic[4]{};
  if (!is.read(magic, 4) || std::string_view(magic, 4) != "ZVMD") {
    throw FormatError("checkpoint: bad magic");
  }
  if (read_le<std::uint32_t>(is) != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version");
  }
  ModelConfig c;
  c.layers = read_le<std::uint64_t>(is);
  c.heads = read_le<std::uint64_t>(is);
  c.d_model = read_le<std::uint64_t>(is);
  c.vocab_size = read_le<std::uint64_t>(is);
  c.max_seq = read_le<std::uint64_t>(is);
  c.seed = read_le<std::uint64_t>(is);
  c.norm_eps = read_le<float>(is);
  constexpr std::size_t kSanity = 1U << 16;
  if (c.layers > kSanity || c.d_model > kSanity || c.vocab_size > (1U << 24) ||
      c.max_seq > (1U << 24)) {
    throw FormatError("checkpoint: implausible header");
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  TinyTransformer m;
  m.config = c;
  const std::size_t d = c.d_model;
  auto read_matrix = [&](std::size_t r, std::size_t cols) {
    Matrix x(r, cols);
    detail::read_floats(is, x.data());
    return x;
  };
  auto read_vec = [&](std::size_t len) {
    std::vector<float> v(len);
    detail::read_floats(is, v);
    return v;
  };
  m.embedding = read_matrix(c.vocab_size, d);
  m.positional = read_matrix(c.max_seq, d);
  for (std::size_t l = 0; l < c.layers; ++l) {
    LayerWeights w;
    w.wq = read_matrix(d, d);
    w.wk = read_matrix(d, d);
    w.wv = read_matrix(d, d);
    w.wo = read_matrix(d, d);
    w.w1 = read_matrix(d, c.d_ff());
    w.w2 = read_matrix(c.d_ff(), d);
    w.attn_gain = read_vec(d);
    w.mlp_gain = read_vec(d);
    m.layers.push_back(std::move(w));
  }
  m.final_gain = read_vec(d);
  return m;
}

}  // namespace zipvl
