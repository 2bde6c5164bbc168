// SPDX-License-Identifier: Apache-2.0
//
// lrtp: run, validate and compare tensor-parallel scenarios.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "lrtp/scenario.hpp"

namespace {

namespace sc = lrtp::scenario;

void add_common(CLI::App* cmd, sc::Overrides& o) {
  cmd->add_option("--seed", o.seed, "RNG seed for weights and inputs");
  cmd->add_option("--element-bytes", o.element_bytes, "bytes per element for volume accounting")
      ->check(CLI::IsMember({1, 2, 4, 8}));
  cmd->add_option("--exec-cap", o.exec_cap, "largest hidden size that is executed");
  cmd->add_option("--lowrank-architecture-type", o.flags.lowrank_architecture_type, "full-rank, svd, cola or lax");
  cmd->add_flag("--enable-btp", o.flags.enable_btp, "bottleneck-aware TP (--enable-btp=false to disable)");
  cmd->add_flag("--enable-online-rmsnorm", o.flags.enable_online_rmsnorm, "online RMSNorm");
  cmd->add_flag("--enable-grouping", o.flags.enable_grouping, "grouped GEMMs and coalesced collectives");
  cmd->add_flag("--enable-lowrank-ckpt", o.flags.enable_lowrank_ckpt, "checkpoint the low-rank boundaries");
}

sc::Scenario load(const std::string& path, const sc::Overrides& o) {
  sc::Scenario s = sc::load_scenario(path);
  sc::apply_overrides(s, o);
  return s;
}

void print_warnings(const nlohmann::ordered_json& report) {
  if (!report.contains("warnings")) return;
  for (const auto& w : report.at("warnings")) std::cerr << "warning: " << w.get<std::string>() << "\n";
}

int cmd_run(const std::string& config, const std::string& out_dir, const sc::Overrides& o) {
  const sc::Scenario s = load(config, o);
  const sc::Outcome out = sc::run_scenario(s);
  print_warnings(out.report);
  sc::write_run(out, out_dir);
  const auto& sim = out.report.at("simulation");
  std::cout << s.name << ": " << sim.at("status").get<std::string>() << "\n";
  if (sim.contains("volumes")) {
    std::cout << "  block volume " << sim.at("volumes").at("block").at("elements") << " elements (formula "
              << out.formula_block_elements << "), oracle diff " << sim.at("oracle_max_abs_diff") << "\n";
  }
  std::cout << "  wrote " << (std::filesystem::path(out_dir) / "report.json").string() << "\n";
  if (out.exit_code != sc::kOk) std::cerr << out.message << "\n";
  return out.exit_code;
}

int cmd_compare(const std::vector<std::string>& configs, const std::string& out_dir, const sc::Overrides& o) {
  if (configs.size() < 2) {
    std::cerr << "compare needs at least two scenario files\n";
    return sc::kConfigError;
  }
  std::vector<sc::Scenario> scenarios;
  for (const auto& c : configs) scenarios.push_back(load(c, o));
  const sc::Comparison cmp = sc::compare_scenarios(scenarios);
  std::filesystem::create_directories(out_dir);
  sc::write_text(std::filesystem::path(out_dir) / "comparison.json", cmp.report.dump(2) + "\n");
  sc::write_text(std::filesystem::path(out_dir) / "comparison.csv", cmp.csv);
  for (const auto& w : cmp.incompatible) std::cerr << "warning: incompatible: " << w << "\n";
  std::cout << cmp.csv;
  return cmp.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tensor-parallel planner and simulator for low-rank decoder blocks"};
  app.require_subcommand(1);

  sc::Overrides run_o, val_o, cmp_o;
  std::string run_cfg, val_cfg, run_out = "out", cmp_out = "out";
  std::vector<std::string> cmp_cfgs;

  auto* run = app.add_subcommand("run", "simulate one scenario and write report.json and trace.csv");
  run->add_option("--config", run_cfg, "scenario file (.json or .toml)")->required();
  run->add_option("--out", run_out, "output directory");
  add_common(run, run_o);

  auto* val = app.add_subcommand("validate", "run the property suite for one scenario");
  val->add_option("--config", val_cfg, "scenario file (.json or .toml)")->required();
  add_common(val, val_o);

  auto* cmp = app.add_subcommand("compare", "side-by-side report for several scenarios");
  cmp->add_option("--config", cmp_cfgs, "scenario files")->required();
  cmp->add_option("--out", cmp_out, "output directory");
  add_common(cmp, cmp_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : sc::kConfigError;
  }

  try {
    if (*run) return cmd_run(run_cfg, run_out, run_o);
    if (*val) {
      const sc::Scenario s = load(val_cfg, val_o);
      return sc::validate_scenario(s, std::cout, std::cerr);
    }
    return cmd_compare(cmp_cfgs, cmp_out, cmp_o);
  } catch (const lrtp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return sc::kConfigError;
  } catch (const lrtp::PlanError& e) {
    std::cerr << "plan error: " << e.what() << "\n";
    return sc::kPlanError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return sc::kFailure;
  }
}
