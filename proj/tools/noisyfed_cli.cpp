// noisyfed: run, sweep, bounds, power, bcd-demo

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "noisyfed/experiment.hpp"

namespace {

void add_common(CLI::App* cmd, noisyfed::CommonOptions& opt, std::string& out,
                std::uint64_t& seed) {
  cmd->add_option("--config", opt.config, "experiment config (JSON)")->required();
  cmd->add_option("--out", out, "output path prefix (overrides the config)");
  cmd->add_option("--seed-override", seed, "run this single seed instead of repeat_seeds");
}

}  // namespace

int main(int argc, char** argv) {
  using namespace noisyfed;
  CLI::App app{"Noisy-FedAvg simulator"};
  app.require_subcommand(1);

  CommonOptions opt;
  std::string out_prefix;
  std::uint64_t seed = 0;

  auto* run = app.add_subcommand("run", "run every seed of a config, write metrics and summary");
  add_common(run, opt, out_prefix, seed);

  auto* sweep = app.add_subcommand("sweep", "noise-free / uplink-only / downlink-only over r or E");
  add_common(sweep, opt, out_prefix, seed);
  std::string axis = "r";
  std::vector<std::size_t> values;
  sweep->add_option("--axis", axis, "r or E")->check(CLI::IsMember({"r", "E"}));
  sweep->add_option("--values", values, "axis values")->delimiter(',');

  auto* bounds = app.add_subcommand("bounds", "print the convergence bound for a config");
  add_common(bounds, opt, out_prefix, seed);
  bool csv = false;
  bounds->add_flag("--csv", csv, "CSV output");

  auto* power = app.add_subcommand("power", "compare transmit-power budgets of scaling policies");
  std::size_t rounds = 100, local_steps = 5;
  power->add_option("-K,--rounds", rounds, "communication rounds");
  power->add_option("-E,--local-steps", local_steps, "local steps");
  power->add_flag("--csv", csv, "CSV output");

  auto* bcd = app.add_subcommand("bcd-demo", "witness violating bounded client dissimilarity");
  std::size_t clients = 50;
  double bound_g = 10.0;
  bcd->add_option("-n,--clients", clients, "number of clients");
  bcd->add_option("-G,--bound", bound_g, "claimed dissimilarity bound G");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInvalidConfig;
  }

  if (!out_prefix.empty()) opt.out = out_prefix;
  for (auto* cmd : {run, sweep, bounds})
    if (cmd->parsed() && cmd->count("--seed-override") > 0) opt.seed_override = seed;

  if (run->parsed()) return cmd_run(opt, std::cout, std::cerr);
  if (sweep->parsed()) {
    const SweepAxis ax = axis == "E" ? SweepAxis::E : SweepAxis::r;
    if (values.empty())
      values = ax == SweepAxis::r ? std::vector<std::size_t>{5, 10, 20, 40}
                                  : std::vector<std::size_t>{1, 2, 5, 10};
    return cmd_sweep(opt, ax, values, std::cout, std::cerr);
  }
  if (bounds->parsed()) return cmd_bounds(opt, csv, std::cout, std::cerr);
  if (power->parsed()) return cmd_power(rounds, local_steps, csv, std::cout, std::cerr);
  return cmd_bcd_demo(clients, bound_g, std::cout, std::cerr);
}
