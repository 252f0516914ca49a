// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Experiment commands behind the CLI: run, sweep-tau, compare, gen-workload.
// Each has a pure part returning data and a cmd_* wrapper that writes files.

#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "zipvl/config.hpp"
#include "zipvl/engine.hpp"
#include "zipvl/report_io.hpp"
#include "zipvl/workload.hpp"

namespace zipvl {

class UsageError : public Error {
 public:
  using Error::Error;
};

enum class OutputFormat { kCsv, kJson };

/// Process exit codes, one per error class.
enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitUsage = 2,
  kExitConfig = 3,
  kExitFormat = 4,
  kExitRuntime = 5,
  kExitIo = 6,
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) != nullptr) return kExitUsage;
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return kExitConfig;
  if (dynamic_cast<const FormatError*>(&e) != nullptr) return kExitFormat;
  if (dynamic_cast<const IoError*>(&e) != nullptr) return kExitIo;
  if (dynamic_cast<const Error*>(&e) != nullptr) return kExitRuntime;
  return kExitInternal;
}

namespace detail {

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << content;
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string dump(const Json& j) { return j.dump(2) + "\n"; }

/// FNV-1a over the important sets of every layer.
inline std::string partition_digest(const std::vector<TokenPartition>& parts) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFFU;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : parts) {
    mix(p.important.size());
    for (auto i : p.important) mix(i);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace detail

inline ModelConfig effective_model(const ExperimentConfig& cfg) {
  ModelConfig m = cfg.model;
  m.seed = cfg.seed;
  return m;
}

/// Prompt tokens for one repeat, uniform over the vocabulary.
inline IndexList make_prompt(const ExperimentConfig& cfg, std::size_t repeat) {
  Rng rng(derive_seed(cfg.seed, 0x70726f6d7074ULL + repeat));
  IndexList t(cfg.prompt_len);
  for (auto& x : t) x = static_cast<std::size_t>(rng.below(cfg.model.vocab_size));
  return t;
}

inline ScoreWorkload load_or_generate_workload(const ExperimentConfig& cfg) {
  if (!cfg.workload_file.empty()) {
    std::ifstream in(cfg.workload_file);
    if (!in) throw IoError("cannot open workload file '" + cfg.workload_file + "'");
    return read_workload_csv(in);
  }
  return generate_workload(cfg.workload, cfg.workload_n, cfg.workload_layers,
                           cfg.workload_concentration.value_or(default_concentration(cfg.workload)),
                           cfg.seed);
}

/// Report for a score workload: FLOPs with d_head = heads = 1, KV bytes for
/// one head of width 1 (8 bytes per retained row).
inline RunReport score_report(const ExperimentConfig& cfg, const SparsityPolicy& policy,
                              std::vector<LayerReport> layers) {
  RunReport r;
  r.model = effective_model(cfg);
  r.policy = policy;
  r.layers = std::move(layers);
  for (const auto& l : r.layers) {
    r.kv_bytes_dense += 2 * l.n * sizeof(float);
    r.kv_bytes_actual += 2 * l.p * sizeof(float);
  }
  finalize_totals(r, 1, 1);
  return r;
}

// ----------------------------------------------------------------- run ----

inline std::vector<RunReport> run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.score_workload()) {
    const ScoreWorkload wl = load_or_generate_workload(cfg);
    return {score_report(cfg, cfg.policy,
                         budget_workload(wl, cfg.policy.mode, cfg.policy.tau, cfg.policy.fixed_ratio))};
  }
  const TinyTransformer model = init_model(effective_model(cfg));
  std::vector<RunReport> reports(cfg.repeats);
  std::vector<std::exception_ptr> errors(cfg.repeats);
  auto one = [&](std::size_t r) {
    try {
      const IndexList prompt = make_prompt(cfg, r);
      reports[r] = generate(model, prompt, cfg.decode_steps, cfg.policy, cfg.greedy,
                            derive_seed(cfg.seed, 0x73616d706c65ULL + r))
                       .report;
    } catch (...) {
      errors[r] = std::current_exception();
    }
  };
  if (cfg.repeats == 1) {
    one(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t r = 0; r < cfg.repeats; ++r) pool.emplace_back(one, r);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return reports;
}

inline std::string summary_line(const RunReport& r) {
  std::ostringstream os;
  os << "mean_ratio=" << format_float(r.mean_ratio)
     << " flops_reduction=" << format_float(r.flops_reduction)
     << " kv_reduction=" << format_float(r.kv_reduction);
  return os.str();
}

/// Writes report.json and layers.csv (or report_r<i>.json / layers_r<i>.csv
/// per repeat when repeats > 1). Returns the summary line of repeat 0.
inline std::string cmd_run(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  const auto reports = run_experiment(cfg);
  for (std::size_t r = 0; r < reports.size(); ++r) {
    const std::string suffix = reports.size() == 1 ? "" : "_r" + std::to_string(r);
    detail::write_file(out_dir / ("report" + suffix + ".json"), detail::dump(to_json(reports[r])));
    std::ostringstream csv;
    write_layers_csv(reports[r].layers, csv);
    detail::write_file(out_dir / ("layers" + suffix + ".csv"), csv.str());
  }
  return summary_line(reports.front());
}

// ----------------------------------------------------------- sweep-tau ----

struct SweepRow {
  double tau = 1.0;
  double mean_ratio = 1.0;
  double flops_reduction = 0.0;
  double kv_reduction = 0.0;
};

/// Runs the configured workload at each tau. Non-adaptive modes are swept as
/// zipvl-exact. Engine runs average over `repeats` prompts (prefill only).
inline std::vector<SweepRow> sweep_tau(const ExperimentConfig& cfg, const std::vector<double>& taus) {
  if (taus.empty()) throw UsageError("sweep-tau: empty tau list");
  for (double t : taus) {
    if (!(t > 0.0 && t <= 1.0)) throw UsageError("sweep-tau: tau " + format_float(t) + " not in (0, 1]");
  }
  ExperimentConfig base = cfg;
  if (!base.policy.adaptive()) base.policy.mode = AttentionMode::kZipvlExact;
  base.validate();

  std::vector<SweepRow> rows;
  if (base.score_workload()) {
    const ScoreWorkload wl = load_or_generate_workload(base);
    for (double t : taus) {
      SparsityPolicy p = base.policy;
      p.tau = t;
      const RunReport r = score_report(base, p, budget_workload(wl, p.mode, t, p.fixed_ratio));
      rows.push_back({t, r.mean_ratio, r.flops_reduction, r.kv_reduction});
    }
    return rows;
  }
  const TinyTransformer model = init_model(effective_model(base));
  std::vector<IndexList> prompts;
  for (std::size_t r = 0; r < base.repeats; ++r) prompts.push_back(make_prompt(base, r));
  for (double t : taus) {
    SparsityPolicy p = base.policy;
    p.tau = t;
    SweepRow row{t, 0.0, 0.0, 0.0};
    for (const auto& prompt : prompts) {
      const RunReport r = make_report(model, prompt, p, prefill(model, prompt, p));
      row.mean_ratio += r.mean_ratio;
      row.flops_reduction += r.flops_reduction;
      row.kv_reduction += r.kv_reduction;
    }
    const auto k = static_cast<double>(prompts.size());
    row.mean_ratio /= k;
    row.flops_reduction /= k;
    row.kv_reduction /= k;
    rows.push_back(row);
  }
  return rows;
}

inline std::string sweep_to_string(const std::vector<SweepRow>& rows, OutputFormat fmt) {
  if (fmt == OutputFormat::kJson) {
    Json a = Json::array();
    for (const auto& r : rows) {
      a.push_back(Json{{"tau", r.tau},
                       {"mean_ratio", r.mean_ratio},
                       {"flops_reduction", r.flops_reduction},
                       {"kv_reduction", r.kv_reduction}});
    }
    return detail::dump(a);
  }
  std::ostringstream os;
  os << "tau,mean_ratio,flops_reduction,kv_reduction\n";
  for (const auto& r : rows) {
    os << format_float(r.tau) << ',' << format_float(r.mean_ratio) << ','
       << format_float(r.flops_reduction) << ',' << format_float(r.kv_reduction) << '\n';
  }
  return os.str();
}

inline void cmd_sweep_tau(const ExperimentConfig& cfg, const std::vector<double>& taus,
                          const std::filesystem::path& out_dir, OutputFormat fmt) {
  const auto rows = sweep_tau(cfg, taus);
  detail::write_file(out_dir / (fmt == OutputFormat::kJson ? "sweep.json" : "sweep.csv"),
                     sweep_to_string(rows, fmt));
}

// ------------------------------------------------------------- compare ----

struct CompareRow {
  std::string mode;
  double fixed_ratio = 0.0;  // ratio used when mode == fixed
  double mean_ratio = 1.0;
  double flops_reduction = 0.0;
  double kv_reduction = 0.0;
  std::optional<double> logit_delta;  // max-abs prefill logit delta vs dense
  double min_retained_mass = 1.0;
  std::size_t layers_below_tau = 0;
  std::string partition_digest;
  std::vector<LayerReport> layers;
  std::vector<TokenPartition> partitions;
};

inline std::vector<AttentionMode> parse_modes(const std::vector<std::string>& names) {
  std::vector<AttentionMode> modes;
  for (const auto& n : names) {
    try {
      modes.push_back(parse_mode(n));
    } catch (const ConfigError& e) {
      throw UsageError(std::string("compare: ") + e.what());
    }
  }
  return modes;
}

inline double max_abs_delta(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::fabs(static_cast<double>(a.data()[i]) - b.data()[i]));
  }
  return m;
}

/// Runs each mode on identical inputs. A fixed-ratio entry uses the mean
/// ratio of the first adaptive entry, so fixed and adaptive keep the same
/// overall token count and differ only in how it is spread over layers.
/// Retention is judged against the configured tau.
inline std::vector<CompareRow> compare_modes(const ExperimentConfig& cfg,
                                             const std::vector<AttentionMode>& modes) {
  if (modes.size() < 2) throw UsageError("compare: need at least two modes");
  cfg.validate();
  const double tau = cfg.policy.tau;

  auto finish_row = [&](CompareRow& row, const RunReport& r) {
    row.mean_ratio = r.mean_ratio;
    row.flops_reduction = r.flops_reduction;
    row.kv_reduction = r.kv_reduction;
    row.layers = r.layers;
    row.min_retained_mass = 1.0;
    for (const auto& l : r.layers) {
      row.min_retained_mass = std::min(row.min_retained_mass, l.retained_mass);
      if (l.retained_mass < tau - 1e-6) ++row.layers_below_tau;
    }
  };

  std::vector<CompareRow> rows(modes.size());
  auto order = std::vector<std::size_t>();
  // adaptive entries first so the fixed entry can match their ratio
  for (std::size_t i = 0; i < modes.size(); ++i) {
    if (modes[i] != AttentionMode::kFixed) order.push_back(i);
  }
  for (std::size_t i = 0; i < modes.size(); ++i) {
    if (modes[i] == AttentionMode::kFixed) order.push_back(i);
  }
  std::optional<double> matched;

  if (cfg.score_workload()) {
    const ScoreWorkload wl = load_or_generate_workload(cfg);
    for (auto i : order) {
      SparsityPolicy p = cfg.policy;
      p.mode = modes[i];
      if (p.mode == AttentionMode::kZipvlProbe) {
        throw UsageError("compare: zipvl-probe requires the random-tokens workload");
      }
      if (p.mode == AttentionMode::kFixed) p.fixed_ratio = matched.value_or(cfg.policy.fixed_ratio);
      CompareRow& row = rows[i];
      row.mode = std::string(to_string(p.mode));
      row.fixed_ratio = p.mode == AttentionMode::kFixed ? p.fixed_ratio : 0.0;
      const RunReport r = score_report(cfg, p, budget_workload(wl, p.mode, p.tau, p.fixed_ratio));
      finish_row(row, r);
      if (p.adaptive() && !matched) matched = r.mean_ratio;
    }
    return rows;
  }

  const TinyTransformer model = init_model(effective_model(cfg));
  const IndexList prompt = make_prompt(cfg, 0);
  SparsityPolicy dense_policy = cfg.policy;
  dense_policy.mode = AttentionMode::kDense;
  const Matrix dense_logits = prefill(model, prompt, dense_policy).logits;
  for (auto i : order) {
    SparsityPolicy p = cfg.policy;
    p.mode = modes[i];
    if (p.mode == AttentionMode::kFixed) p.fixed_ratio = matched.value_or(cfg.policy.fixed_ratio);
    CompareRow& row = rows[i];
    row.mode = std::string(to_string(p.mode));
    row.fixed_ratio = p.mode == AttentionMode::kFixed ? p.fixed_ratio : 0.0;
    PrefillResult pre = prefill(model, prompt, p);
    row.logit_delta = max_abs_delta(pre.logits, dense_logits);
    finish_row(row, make_report(model, prompt, p, pre));
    row.partitions = std::move(pre.partitions);
    row.partition_digest = detail::partition_digest(row.partitions);
    if (p.adaptive() && !matched) matched = row.mean_ratio;
  }
  return rows;
}

inline std::string compare_to_string(const std::vector<CompareRow>& rows, OutputFormat fmt) {
  if (fmt == OutputFormat::kJson) {
    Json a = Json::array();
    for (const auto& r : rows) {
      Json o{{"mode", r.mode},
             {"fixed_ratio", r.fixed_ratio},
             {"mean_ratio", r.mean_ratio},
             {"flops_reduction", r.flops_reduction},
             {"kv_reduction", r.kv_reduction},
             {"logit_delta", r.logit_delta ? Json(*r.logit_delta) : Json(nullptr)},
             {"min_retained_mass", r.min_retained_mass},
             {"layers_below_tau", r.layers_below_tau},
             {"partition_digest", r.partition_digest}};
      a.push_back(std::move(o));
    }
    return detail::dump(a);
  }
  std::ostringstream os;
  os << "mode,fixed_ratio,mean_ratio,flops_reduction,kv_reduction,logit_delta,"
        "min_retained_mass,layers_below_tau,partition_digest\n";
  for (const auto& r : rows) {
    os << r.mode << ',' << format_float(r.fixed_ratio) << ',' << format_float(r.mean_ratio) << ','
       << format_float(r.flops_reduction) << ',' << format_float(r.kv_reduction) << ','
       << (r.logit_delta ? format_float(*r.logit_delta) : std::string()) << ','
       << format_float(r.min_retained_mass) << ',' << r.layers_below_tau << ','
       << r.partition_digest << '\n';
  }
  return os.str();
}

inline void cmd_compare(const ExperimentConfig& cfg, const std::vector<AttentionMode>& modes,
                        const std::filesystem::path& out_dir, OutputFormat fmt) {
  const auto rows = compare_modes(cfg, modes);
  detail::write_file(out_dir / (fmt == OutputFormat::kJson ? "compare.json" : "compare.csv"),
                     compare_to_string(rows, fmt));
}

// -------------------------------------------------------- gen-workload ----

inline WorkloadKind parse_generator_kind(const std::string& s) {
  if (s == "peaked") return WorkloadKind::kPeakedScores;
  if (s == "diffuse") return WorkloadKind::kDiffuseScores;
  if (s == "mixed") return WorkloadKind::kMixedScores;
  throw UsageError("gen-workload: unknown kind '" + s + "' (peaked|diffuse|mixed)");
}

inline void cmd_gen_workload(WorkloadKind kind, std::size_t n, std::size_t layers,
                             double concentration, std::uint64_t seed,
                             const std::filesystem::path& out_file) {
  if (n < 1 || layers < 1) throw UsageError("gen-workload: n and layers must be >= 1");
  if (!(concentration > 0.0)) throw UsageError("gen-workload: concentration must be > 0");
  std::ostringstream os;
  write_workload_csv(generate_workload(kind, n, layers, concentration, seed), os);
  detail::write_file(out_file, os.str());
}

}  // namespace zipvl
