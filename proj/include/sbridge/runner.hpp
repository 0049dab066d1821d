#pragma once

#include "sbridge/checkpoint.hpp"
#include "sbridge/config.hpp"
#include "sbridge/driver.hpp"

#include <string>
#include <vector>

namespace sbridge::run {

using nlohmann::json;

/// Directory all artifacts go under: $SBRIDGE_OUTPUT_ROOT when set, else the
/// config's output_dir.
std::string output_root(const cfg::ExperimentConfig& config);

/// Fan a validated config out over its seed list. Each seed writes
///   <root>/<name>/seed_<s>/{checkpoint.json, runlog.csv, metrics.json,
///                           traj_ipf_<i>.csv}
/// and the family is summarised in <root>/<name>/aggregate.json with
/// across-seed mean +- sample standard deviation per metric, the config hash,
/// and content hashes of every checkpoint. Seeds run in parallel when
/// hardware allows. Returns the aggregate document.
json run_experiment(const cfg::ExperimentConfig& config, bool parallel_seeds = true);

/// One run_experiment per value of a dotted config field; writes
/// <root>/<base-name>_sweep/<...> per value plus a combined long-format CSV
/// (axis value, metric, mean, std, n_seeds). Returns the combined document.
json sweep_experiment(const json& base_config, const std::string& axis,
                      const std::vector<json>& values, bool parallel_seeds = true);

/// Recompute metrics from a checkpoint (all of them, or one by name) at the
/// config's final_samples count. Returns the metric document.
json eval_checkpoint(const std::string& checkpoint_path, const std::string& metric = "");

/// Forward rollouts of a checkpointed bridge in plot-ready long-format CSV
/// (traj, k, t, x coordinates), written to out_path ("-" for stdout).
void dump_trajectories(const std::string& checkpoint_path, long n, const std::string& out_path);

/// 17-significant-digit decimal form (round-trips any double).
std::string fmt17(double v);

}  // namespace sbridge::run
