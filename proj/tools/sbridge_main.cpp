#include "sbridge/runner.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

using sbridge::cfg::json;

/// Parse a sweep value: integer if it looks like one, then double, else the
/// raw string.
json parse_value(const std::string& s) {
  try {
    std::size_t used = 0;
    const long v = std::stol(s, &used);
    if (used == s.size()) return json(v);
  } catch (const std::exception&) {
  }
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return json(v);
  } catch (const std::exception&) {
  }
  return json(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sbridge: Schrodinger bridge training via iterative proportional fitting"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, axis, metric, out_path = "-";
  std::vector<std::string> value_strs;
  std::vector<std::uint64_t> seed_override;
  bool sequential = false;
  long n_dump = 256;

  CLI::App* cmd_run = app.add_subcommand("run", "train every seed of a config and aggregate");
  cmd_run->add_option("config", config_path, "experiment config (json)")->required();
  cmd_run->add_option("--seeds", seed_override, "override the config's seed list");
  cmd_run->add_flag("--sequential", sequential, "run seeds one after another");

  CLI::App* cmd_sweep = app.add_subcommand("sweep", "repeat a run over values of one field");
  cmd_sweep->add_option("config", config_path, "experiment config (json)")->required();
  cmd_sweep->add_option("--axis", axis, "dotted config path, e.g. grid.n_steps")->required();
  cmd_sweep->add_option("--values", value_strs, "comma separated values")
      ->required()
      ->delimiter(',');
  cmd_sweep->add_flag("--sequential", sequential, "run seeds one after another");

  CLI::App* cmd_eval = app.add_subcommand("eval", "recompute metrics from a checkpoint");
  cmd_eval->add_option("checkpoint", checkpoint_path, "checkpoint.json path")->required();
  cmd_eval->add_option("--metric", metric, "metric name (default: all)");

  CLI::App* cmd_dump = app.add_subcommand("dump-traj", "sample trajectories from a checkpoint");
  cmd_dump->add_option("checkpoint", checkpoint_path, "checkpoint.json path")->required();
  cmd_dump->add_option("--n", n_dump, "trajectory count");
  cmd_dump->add_option("--out", out_path, "output csv path ('-' for stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_run->parsed()) {
      sbridge::cfg::ExperimentConfig config = sbridge::cfg::ExperimentConfig::load(config_path);
      if (!seed_override.empty()) config.seeds = seed_override;
      config.validate();
      const json agg = sbridge::run::run_experiment(config, !sequential);
      std::cout << agg.dump(2) << '\n';
    } else if (cmd_sweep->parsed()) {
      std::vector<json> values;
      for (const auto& s : value_strs) values.push_back(parse_value(s));
      std::ifstream in(config_path);
      if (!in) throw sbridge::cfg::ConfigError("cannot open config file: " + config_path);
      json base;
      in >> base;
      const json combined = sbridge::run::sweep_experiment(base, axis, values, !sequential);
      std::cout << combined.dump(2) << '\n';
    } else if (cmd_eval->parsed()) {
      std::cout << sbridge::run::eval_checkpoint(checkpoint_path, metric).dump(2) << '\n';
    } else if (cmd_dump->parsed()) {
      sbridge::run::dump_trajectories(checkpoint_path, n_dump, out_path);
    }
  } catch (const sbridge::cfg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
