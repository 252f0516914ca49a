// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Experiment configuration: a flat `key = value` text format. Blank lines
// and lines starting with '#' are ignored. Unknown keys, duplicate keys and
// malformed values are errors. The full key list is in docs/FORMATS.md.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include "zipvl/policy.hpp"

namespace zipvl {

enum class WorkloadKind { kRandomTokens, kPeakedScores, kDiffuseScores, kMixedScores };

inline std::string_view to_string(WorkloadKind k) {
  switch (k) {
    case WorkloadKind::kRandomTokens: return "random-tokens";
    case WorkloadKind::kPeakedScores: return "peaked-scores";
    case WorkloadKind::kDiffuseScores: return "diffuse-scores";
    case WorkloadKind::kMixedScores: return "mixed-scores";
  }
  return "?";
}

inline WorkloadKind parse_workload_kind(std::string_view s) {
  if (s == "random-tokens") return WorkloadKind::kRandomTokens;
  if (s == "peaked-scores") return WorkloadKind::kPeakedScores;
  if (s == "diffuse-scores") return WorkloadKind::kDiffuseScores;
  if (s == "mixed-scores") return WorkloadKind::kMixedScores;
  throw ConfigError("unknown workload kind '" + std::string(s) + "'");
}

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelConfig model{};
  SparsityPolicy policy{};
  std::size_t prompt_len = 64;
  std::size_t decode_steps = 16;
  std::size_t repeats = 1;
  bool greedy = true;
  std::string output_path = "out";
  WorkloadKind workload = WorkloadKind::kRandomTokens;
  std::size_t workload_n = 1000;
  std::size_t workload_layers = 32;
  std::optional<double> workload_concentration;  // kind-specific default when unset
  std::string workload_file;                     // score CSV; overrides generation

  bool score_workload() const noexcept { return workload != WorkloadKind::kRandomTokens; }

  void validate() const {
    model.validate();
    policy.validate();
    if (repeats < 1) throw ConfigError("run.repeats must be >= 1");
    if (!score_workload()) {
      if (prompt_len < 1) throw ConfigError("run.prompt_len must be >= 1");
      if (prompt_len + decode_steps > model.max_seq + 1) {
        throw ConfigError("run.prompt_len + run.decode_steps exceeds model.max_seq");
      }
      if (policy.dense_first_layers > model.layers) {
        throw ConfigError("policy.dense_first_layers exceeds model.layers");
      }
    } else {
      if (workload_n < 1 || workload_layers < 1) {
        throw ConfigError("workload.n and workload.layers must be >= 1");
      }
      if (workload_concentration && !(*workload_concentration > 0.0)) {
        throw ConfigError("workload.concentration must be > 0");
      }
    }
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError("bad value for " + std::string(key) + ": '" + std::string(v) + "'");
  }
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean for " + std::string(key) + ": '" + std::string(v) + "'");
}

/// "inf" is accepted for concentrations (exactly uniform diffuse workload).
inline double parse_positive_or_inf(std::string_view key, std::string_view v) {
  if (v == "inf") return std::numeric_limits<double>::infinity();
  return parse_number<double>(key, v);
}

}  // namespace detail

/// Applies one key/value pair; throws ConfigError on unknown keys.
inline void apply_config_key(ExperimentConfig& c, std::string_view key, std::string_view v) {
  using detail::parse_bool;
  using detail::parse_number;
  using Setter = std::function<void(std::string_view)>;
  const std::map<std::string_view, Setter> setters = {
      {"seed", [&](auto s) { c.seed = parse_number<std::uint64_t>(key, s); }},
      {"model.layers", [&](auto s) { c.model.layers = parse_number<std::size_t>(key, s); }},
      {"model.heads", [&](auto s) { c.model.heads = parse_number<std::size_t>(key, s); }},
      {"model.d_model", [&](auto s) { c.model.d_model = parse_number<std::size_t>(key, s); }},
      {"model.vocab_size", [&](auto s) { c.model.vocab_size = parse_number<std::size_t>(key, s); }},
      {"model.max_seq", [&](auto s) { c.model.max_seq = parse_number<std::size_t>(key, s); }},
      {"model.norm_eps", [&](auto s) { c.model.norm_eps = parse_number<float>(key, s); }},
      {"policy.mode", [&](auto s) { c.policy.mode = parse_mode(s); }},
      {"policy.tau", [&](auto s) { c.policy.tau = parse_number<double>(key, s); }},
      {"policy.fixed_ratio", [&](auto s) { c.policy.fixed_ratio = parse_number<double>(key, s); }},
      {"policy.probe_recent", [&](auto s) { c.policy.probe_recent = parse_number<std::size_t>(key, s); }},
      {"policy.probe_random", [&](auto s) { c.policy.probe_random = parse_number<std::size_t>(key, s); }},
      {"policy.budget_metric", [&](auto s) { c.policy.budget_metric = parse_metric(s); }},
      {"policy.identify_metric", [&](auto s) { c.policy.identify_metric = parse_metric(s); }},
      {"policy.keep_last", [&](auto s) { c.policy.keep_last = parse_number<std::size_t>(key, s); }},
      {"policy.quantize", [&](auto s) { c.policy.quantize = parse_bool(key, s); }},
      {"policy.group_size", [&](auto s) { c.policy.group_size = parse_number<std::size_t>(key, s); }},
      {"policy.head_aggregation", [&](auto s) { c.policy.head_aggregation = parse_aggregation(s); }},
      {"policy.dense_first_layers",
       [&](auto s) { c.policy.dense_first_layers = parse_number<std::size_t>(key, s); }},
      {"run.prompt_len", [&](auto s) { c.prompt_len = parse_number<std::size_t>(key, s); }},
      {"run.decode_steps", [&](auto s) { c.decode_steps = parse_number<std::size_t>(key, s); }},
      {"run.repeats", [&](auto s) { c.repeats = parse_number<std::size_t>(key, s); }},
      {"run.greedy", [&](auto s) { c.greedy = parse_bool(key, s); }},
      {"run.output_path", [&](auto s) { c.output_path = std::string(s); }},
      {"workload.kind", [&](auto s) { c.workload = parse_workload_kind(s); }},
      {"workload.n", [&](auto s) { c.workload_n = parse_number<std::size_t>(key, s); }},
      {"workload.layers", [&](auto s) { c.workload_layers = parse_number<std::size_t>(key, s); }},
      {"workload.concentration",
       [&](auto s) { c.workload_concentration = detail::parse_positive_or_inf(key, s); }},
      {"workload.file", [&](auto s) { c.workload_file = std::string(s); }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->second(v);
}

inline ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig c;
  std::map<std::string, std::size_t> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key(detail::trim(t.substr(0, eq)));
    const std::string_view value = detail::trim(t.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ConfigError("line " + std::to_string(lineno) + ": empty key or value");
    }
    if (auto [it, fresh] = seen.emplace(key, lineno); !fresh) {
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key +
                        "' (first on line " + std::to_string(it->second) + ")");
    }
    try {
      apply_config_key(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

inline ExperimentConfig parse_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  return parse_config(in);
}

}  // namespace zipvl
