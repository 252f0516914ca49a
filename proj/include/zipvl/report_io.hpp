// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// JSON and CSV encodings of run reports. Keys and columns are documented in
// docs/FORMATS.md. CSV uses '.' decimals, '\n' line endings and a header row.

#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "zipvl/config.hpp"
#include "zipvl/metrics.hpp"
#include "zipvl/workload.hpp"

namespace zipvl {

using Json = nlohmann::ordered_json;

inline Json to_json(const ModelConfig& m) {
  return Json{{"layers", m.layers},         {"heads", m.heads},     {"d_model", m.d_model},
              {"vocab_size", m.vocab_size}, {"max_seq", m.max_seq}, {"seed", m.seed},
              {"norm_eps", m.norm_eps}};
}

inline Json to_json(const SparsityPolicy& p) {
  return Json{{"mode", to_string(p.mode)},
              {"tau", p.tau},
              {"fixed_ratio", p.fixed_ratio},
              {"probe_recent", p.probe_recent},
              {"probe_random", p.probe_random},
              {"budget_metric", to_string(p.budget_metric)},
              {"identify_metric", to_string(p.identify_metric)},
              {"keep_last", p.keep_last},
              {"quantize", p.quantize},
              {"group_size", p.group_size},
              {"head_aggregation", to_string(p.head_aggregation)},
              {"dense_first_layers", p.dense_first_layers}};
}

inline Json to_json(const LayerReport& r) {
  return Json{{"layer", r.layer},
              {"n", r.n},
              {"p", r.p},
              {"ratio", r.ratio},
              {"retained_mass", r.retained_mass},
              {"score_rows", r.score_rows},
              {"attn_flops", r.attn_flops},
              {"kv_rows", r.kv_rows}};
}

inline Json to_json(const RunReport& r) {
  Json layers = Json::array();
  for (const auto& l : r.layers) layers.push_back(to_json(l));
  return Json{{"model", to_json(r.model)},
              {"policy", to_json(r.policy)},
              {"prompt", r.prompt},
              {"generated", r.generated},
              {"layers", std::move(layers)},
              {"total_attn_flops_dense", r.total_attn_flops_dense},
              {"total_attn_flops_actual", r.total_attn_flops_actual},
              {"flops_reduction", r.flops_reduction},
              {"kv_bytes_dense", r.kv_bytes_dense},
              {"kv_bytes_actual", r.kv_bytes_actual},
              {"kv_reduction", r.kv_reduction},
              {"mean_ratio", r.mean_ratio},
              {"model_flops", r.model_flops}};
}

namespace detail {

template <typename T>
T field(const Json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("report json: missing key '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report json: bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline ModelConfig model_from_json(const Json& j) {
  using detail::field;
  ModelConfig m;
  m.layers = field<std::size_t>(j, "layers");
  m.heads = field<std::size_t>(j, "heads");
  m.d_model = field<std::size_t>(j, "d_model");
  m.vocab_size = field<std::size_t>(j, "vocab_size");
  m.max_seq = field<std::size_t>(j, "max_seq");
  m.seed = field<std::uint64_t>(j, "seed");
  m.norm_eps = field<float>(j, "norm_eps");
  return m;
}

inline SparsityPolicy policy_from_json(const Json& j) {
  using detail::field;
  SparsityPolicy p;
  try {
    p.mode = parse_mode(field<std::string>(j, "mode"));
    p.budget_metric = parse_metric(field<std::string>(j, "budget_metric"));
    p.identify_metric = parse_metric(field<std::string>(j, "identify_metric"));
    p.head_aggregation = parse_aggregation(field<std::string>(j, "head_aggregation"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("report json: ") + e.what());
  }
  p.tau = field<double>(j, "tau");
  p.fixed_ratio = field<double>(j, "fixed_ratio");
  p.probe_recent = field<std::size_t>(j, "probe_recent");
  p.probe_random = field<std::size_t>(j, "probe_random");
  p.keep_last = field<std::size_t>(j, "keep_last");
  p.quantize = field<bool>(j, "quantize");
  p.group_size = field<std::size_t>(j, "group_size");
  p.dense_first_layers = field<std::size_t>(j, "dense_first_layers");
  return p;
}

inline LayerReport layer_from_json(const Json& j) {
  using detail::field;
  LayerReport r;
  r.layer = field<std::size_t>(j, "layer");
  r.n = field<std::size_t>(j, "n");
  r.p = field<std::size_t>(j, "p");
  r.ratio = field<double>(j, "ratio");
  r.retained_mass = field<double>(j, "retained_mass");
  r.score_rows = field<std::size_t>(j, "score_rows");
  r.attn_flops = field<FlopCount>(j, "attn_flops");
  r.kv_rows = field<std::size_t>(j, "kv_rows");
  return r;
}

inline RunReport report_from_json(const Json& j) {
  using detail::field;
  if (!j.is_object()) throw FormatError("report json: expected an object");
  RunReport r;
  r.model = model_from_json(field<Json>(j, "model"));
  r.policy = policy_from_json(field<Json>(j, "policy"));
  r.prompt = field<IndexList>(j, "prompt");
  r.generated = field<IndexList>(j, "generated");
  for (const auto& l : field<Json>(j, "layers")) r.layers.push_back(layer_from_json(l));
  r.total_attn_flops_dense = field<FlopCount>(j, "total_attn_flops_dense");
  r.total_attn_flops_actual = field<FlopCount>(j, "total_attn_flops_actual");
  r.flops_reduction = field<double>(j, "flops_reduction");
  r.kv_bytes_dense = field<std::uint64_t>(j, "kv_bytes_dense");
  r.kv_bytes_actual = field<std::uint64_t>(j, "kv_bytes_actual");
  r.kv_reduction = field<double>(j, "kv_reduction");
  r.mean_ratio = field<double>(j, "mean_ratio");
  r.model_flops = field<FlopCount>(j, "model_flops");
  return r;
}

inline RunReport parse_report(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("report json: ") + e.what());
  }
  return report_from_json(j);
}

inline void write_layers_csv(const std::vector<LayerReport>& layers, std::ostream& os) {
  os << "layer,n,p,ratio,retained_mass,score_rows,attn_flops,kv_rows\n";
  for (const auto& r : layers) {
    os << r.layer << ',' << r.n << ',' << r.p << ',' << format_float(r.ratio) << ','
       << format_float(r.retained_mass) << ',' << r.score_rows << ',' << r.attn_flops << ','
       << r.kv_rows << '\n';
  }
}

}  // namespace zipvl
