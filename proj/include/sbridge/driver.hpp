#pragma once

#include "sbridge/checkpoint.hpp"
#include "sbridge/config.hpp"
#include "sbridge/metrics.hpp"

#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace sbridge::drv {

/// One run-log line, emitted after every half-bridge phase. Metrics that are
/// not computable in the active regime are NaN.
struct MetricRow {
  long ipf_iter = 0;  // 1-based
  std::string phase;  // "backward" or "forward"
  long step = 0;      // optimiser steps taken within the phase
  double loss = std::numeric_limits<double>::quiet_NaN();  // phase mean
  double elbo = std::numeric_limits<double>::quiet_NaN();
  double path_kl = std::numeric_limits<double>::quiet_NaN();
  double w2sq = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0.0;
};

using MetricMap = std::map<std::string, metrics::MetricValue>;

/// Observation points into a run; all optional.
struct RunHooks {
  std::function<void(const MetricRow&)> on_row;
  std::function<void(long ipf_iter, const ckpt::BridgeState&)> on_iteration;
  /// Called with the latest state before an error propagates out of run_ipf.
  std::function<void(const ckpt::BridgeState&)> on_abort;
};

struct RunResult {
  ckpt::BridgeState state;
  std::vector<MetricRow> rows;
  MetricMap final_metrics;
};

/// The outer IPF loop: n_ipf_iterations alternations of a backward phase and
/// a forward phase, with the regime deciding each phase's loss and data
/// source. Weights and buffers persist across iterations.
RunResult run_ipf(const cfg::ExperimentConfig& config, std::uint64_t seed,
                  const RunHooks& hooks = {});

/// Forward rollouts of a bridge from its natural x0 source (the p0 sampler
/// when one exists, the x0 replay buffer otherwise).
dyn::TrajectoryBatch sample_bridge(const cfg::ExperimentConfig& config,
                                   const ckpt::BridgeState& state, long n, Rng& rng);

/// The full evaluation bundle at a given sample count. Keys: w2sq, path_kl,
/// path_kl_naive, path_energy, elbo, l2_cost, and modes_covered when the
/// target is a mixture. Uncomputable entries are omitted.
MetricMap compute_metrics(const cfg::ExperimentConfig& config, const ckpt::BridgeState& state,
                          long n, Rng& rng);

}  // namespace sbridge::drv
