// Copyright 2026 The zipvl-engine Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdint>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "zipvl/commands.hpp"

namespace {

constexpr const char* kFooter = R"(Exit codes:
  0  success
  1  internal error
  2  usage error (bad flags, unknown mode, empty tau list)
  3  config error (unknown key, bad value, inconsistent counts)
  4  input format error (malformed workload/report file)
  5  runtime error (shape, bounds, domain, ordering)
  6  I/O error (cannot read or write a file))";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"zipvl: adaptive important-token sparse attention and KV eviction on a toy transformer"};
  app.footer(kFooter);
  app.fallthrough();
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::string format = "csv";
  app.add_option("--config", config_path, "Experiment config file (key = value)");
  app.add_option("--seed", seed, "Global seed; overrides the config's seed");
  app.add_option("--out", out_dir, "Output directory (default: run.output_path or ./out)");
  app.add_option("--format", format, "Table format for sweep-tau/compare")
      ->check(CLI::IsMember({"json", "csv"}));

  auto* run = app.add_subcommand("run", "Prefill + decode; writes report.json and layers.csv");

  auto* sweep = app.add_subcommand("sweep-tau", "Mean ratio and reductions across tau values");
  std::vector<double> taus;
  sweep->add_option("--taus", taus, "Comma-separated tau values in (0, 1]")
      ->delimiter(',')
      ->required();

  auto* compare = app.add_subcommand("compare", "Compare attention modes on identical inputs");
  std::vector<std::string> modes;
  compare->add_option("--modes", modes, "Comma-separated: dense, zipvl-exact, zipvl-probe, fixed")
      ->delimiter(',')
      ->required();

  auto* gen = app.add_subcommand("gen-workload", "Write a synthetic per-layer score CSV");
  std::string kind = "peaked";
  std::size_t n = 1000;
  std::size_t layers = 32;
  std::string concentration;
  gen->add_option("--kind", kind, "peaked | diffuse | mixed");
  gen->add_option("--n", n, "Tokens per layer");
  gen->add_option("--layers", layers, "Number of layers");
  gen->add_option("--concentration", concentration, "Shape parameter (> 0, or inf)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? zipvl::kExitOk : zipvl::kExitUsage;
  }

  try {
    zipvl::ExperimentConfig cfg = config_path.empty() ? zipvl::ExperimentConfig{}
                                                      : zipvl::load_config(config_path);
    if (seed) cfg.seed = *seed;
    const std::filesystem::path out = out_dir.value_or(cfg.output_path);
    const auto fmt = format == "json" ? zipvl::OutputFormat::kJson : zipvl::OutputFormat::kCsv;

    if (run->parsed()) {
      std::cout << zipvl::cmd_run(cfg, out) << "\n";
    } else if (sweep->parsed()) {
      zipvl::cmd_sweep_tau(cfg, taus, out, fmt);
    } else if (compare->parsed()) {
      zipvl::cmd_compare(cfg, zipvl::parse_modes(modes), out, fmt);
    } else if (gen->parsed()) {
      double c = 0.0;
      const auto k = zipvl::parse_generator_kind(kind);
      if (concentration.empty()) {
        c = zipvl::default_concentration(k);
      } else if (concentration == "inf") {
        c = std::numeric_limits<double>::infinity();
      } else {
        try {
          c = std::stod(concentration);
        } catch (const std::exception&) {
          throw zipvl::UsageError("gen-workload: bad concentration '" + concentration + "'");
        }
      }
      zipvl::cmd_gen_workload(k, n, layers, c, cfg.seed, out / "workload.csv");
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return zipvl::exit_code_for(e);
  }
  return zipvl::kExitOk;
}
