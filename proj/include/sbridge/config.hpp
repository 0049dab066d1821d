#pragma once

#include "sbridge/dynamics.hpp"
#include "sbridge/nn.hpp"
#include "sbridge/replay.hpp"
#include "sbridge/targets.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace sbridge::cfg {

using nlohmann::json;

/// Config parse/validation failure; message carries field-level diagnostics.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Regime { kDataToData, kDataToEnergy, kEnergyToEnergy };

std::string to_string(Regime r);
Regime regime_from_string(const std::string& s);

/// Declarative endpoint description, buildable into a Target.
struct TargetSpec {
  std::string kind;  // gauss | diag_gauss | gmm | gmm_ring | two_moons
  std::vector<double> mean;                // gauss, diag_gauss
  double sigma = 1.0;                      // gauss, gmm_ring
  std::vector<double> sigmas;              // diag_gauss, gmm
  std::vector<std::vector<double>> means;  // gmm
  std::vector<double> weights;             // gmm
  long n_components = 8;                   // gmm_ring
  double radius = 4.0;                     // gmm_ring
  double noise = 0.1;                      // two_moons
  double energy_shift = 0.0;

  targets::TargetPtr build() const;
  long dim() const;

  /// Mixture layout for mode-coverage diagnostics (gmm and gmm_ring kinds).
  bool is_mixture() const { return kind == "gmm" || kind == "gmm_ring"; }
  Tensor mixture_means() const;
  double mixture_sigma() const;

  json to_json() const;
  static TargetSpec from_json(const json& j, const std::string& where);
};

struct ScheduleConfig {
  long n_ipf_iterations = 20;
  long steps_per_backward_phase = 4000;
  long steps_per_forward_phase = 4000;
  long batch_size = 64;    // trajectories per ML step; groups per variance step
  long n_traj_per_x0 = 2;  // N in the variance losses
};

struct OptimizerConfig {
  double lr = 8e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-2;
  double grad_clip = 10.0;
  bool reset_moments_each_phase = true;
};

struct OffPolicyConfig {
  offpolicy::OffPolicyPlan plan;
  long buffer_capacity = 10000;
  double reinit_fraction = 0.0;
};

struct EvalConfig {
  long samples_per_phase = 512;
  long final_samples = 10000;
  std::vector<long> traj_dump_iters = {1, 7, 20};
  long traj_dump_count = 256;
};

struct ExperimentConfig {
  std::string name = "run";
  Regime regime = Regime::kDataToData;
  TargetSpec source;
  TargetSpec target;
  dyn::TimeGrid grid;
  dyn::ReferenceProcess reference;
  dyn::VarianceMode variance_mode = dyn::VarianceMode::kLearnt;
  nn::MlpConfig net;  // input/output dims filled per policy at build time
  ScheduleConfig schedule;
  OptimizerConfig optimizer;
  OffPolicyConfig offpolicy;
  EvalConfig eval;
  std::vector<std::uint64_t> seeds = {42, 43, 44, 45, 46};
  std::string output_dir = "runs";

  /// Full structural + capability validation; throws ConfigError listing
  /// every failing field.
  void validate() const;

  long dim() const { return source.dim(); }

  json to_json() const;
  static ExperimentConfig from_json(const json& j);
  static ExperimentConfig load(const std::string& path);

  /// FNV-1a over the canonical (sorted-key) serialisation.
  std::string hash() const;
};

/// Set a scalar field addressed by a dotted path ("grid.n_steps",
/// "offpolicy.ratio", ...) on the raw JSON form, preserving the K*dt == t_max
/// invariant by re-deriving dt when the grid shape changes.
json set_by_path(json cfg, const std::string& path, const json& value);

std::string hash_bytes(const std::string& bytes);

}  // namespace sbridge::cfg
