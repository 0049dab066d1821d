#pragma once

#include "sbridge/graph.hpp"
#include "sbridge/nn.hpp"
#include "sbridge/rng.hpp"
#include "sbridge/tensor.hpp"

#include <string>
#include <vector>

namespace sbridge::dyn {

enum class Direction { kForward, kBackward };

inline const char* to_string(Direction d) {
  return d == Direction::kForward ? "forward" : "backward";
}

enum class VarianceMode { kFixed, kLearnt };

struct TimeGrid {
  long n_steps = 0;  // number of transitions K; states live on K+1 grid points
  double dt = 0.0;

  double t_max() const { return static_cast<double>(n_steps) * dt; }

  void validate() const {
    if (n_steps < 1) throw std::invalid_argument("TimeGrid: need at least one step");
    if (!(dt > 0.0)) throw std::invalid_argument("TimeGrid: dt must be positive");
  }

  bool operator==(const TimeGrid&) const = default;
};

/// The fixed process transport is measured against: dX = f_ref(X) dt + sigma dW
/// with f_ref(x) = -ou_alpha * x (ou_alpha = 0 gives plain Brownian motion).
struct ReferenceProcess {
  double sigma = 1.4142135623730951;  // sqrt(2), the benchmark default
  double ou_alpha = 0.0;

  void validate() const {
    if (!(sigma > 0.0)) throw std::invalid_argument("ReferenceProcess: sigma must be positive");
    if (ou_alpha < 0.0)
      throw std::invalid_argument("ReferenceProcess: ou_alpha must be >= 0");
  }

  /// Euler-Maruyama kernel mean leaving x: x + f_ref(x) * dt.
  Tensor mean(const Tensor& x, double dt) const {
    Tensor m(x.shape());
    m.arr() = x.arr() * (1.0 - ou_alpha * dt);
    return m;
  }

  double step_var(double dt) const { return sigma * sigma * dt; }
};

/// Euler-Maruyama transition kernel of one policy at one step: elementwise
/// N(mean, var) over the batch, with logvar kept alongside var so density
/// code never re-derives one from the other.
struct Kernel {
  Tensor mean;    // [B, d]
  Tensor var;     // [B, d]
  Tensor logvar;  // [B, d]
};

/// Taped version; variance enters losses only through logvar.
struct KernelGraph {
  ag::Var mean;
  ag::Var logvar;
};

/// Drift + (optionally) log-variance network for one time direction.
///
/// Kernel leaving state x at grid index k (time k*dt):
///   mean   = x + (f_ref(x) + drift_head(x, k*dt/t_max)) * dt
///   var    = sigma^2 * dt * exp(clamp(c_head, -5, 5))   (learnt mode)
///          = sigma^2 * dt                               (fixed mode)
/// Forward policies step k -> k+1 for k in [0, K-1]; backward policies step
/// k -> k-1 for k in [1, K]. The net always sees the conditioning state and
/// its own time index. A fresh net has a zero head, so an untrained policy is
/// exactly the discretised reference process.
class Policy {
 public:
  Policy() = default;
  Policy(Direction dir, VarianceMode vmode, long dim, TimeGrid grid, ReferenceProcess ref,
         nn::MlpConfig net_cfg, Rng& init_rng, const std::string& scope);

  /// Convenience constructor using the benchmark net shape (3x64, LayerNorm).
  static Policy make(Direction dir, VarianceMode vmode, long dim, TimeGrid grid,
                     ReferenceProcess ref, Rng& init_rng);

  Direction direction() const { return dir_; }
  VarianceMode variance_mode() const { return vmode_; }
  long dim() const { return dim_; }
  const TimeGrid& grid() const { return grid_; }
  const ReferenceProcess& ref() const { return ref_; }

  Kernel kernel(const Tensor& x, long k) const;
  KernelGraph kernel_graph(const Tensor& x, long k) const;

  nn::Mlp& net() { return net_; }
  const nn::Mlp& net() const { return net_; }
  std::span<ag::Var> params() { return net_.params(); }
  std::span<const ag::Var> params() const { return net_.params(); }

  /// Step indices a transition may leave from.
  long first_step() const { return dir_ == Direction::kForward ? 0 : 1; }
  long last_step() const { return dir_ == Direction::kForward ? grid_.n_steps - 1 : grid_.n_steps; }

  void check_step(long k) const;

 private:
  Tensor net_input(const Tensor& x, long k) const;

  Direction dir_ = Direction::kForward;
  VarianceMode vmode_ = VarianceMode::kFixed;
  long dim_ = 0;
  TimeGrid grid_;
  ReferenceProcess ref_;
  nn::Mlp net_;
};

/// Batch of n trajectories on a shared grid; states[k] holds all n positions
/// at time index k regardless of which direction generated them.
struct TrajectoryBatch {
  TimeGrid grid;
  Direction generated_by = Direction::kForward;
  long n = 0;
  long dim = 0;
  std::vector<Tensor> states;  // K+1 tensors of shape [n, d]

  const Tensor& x0() const { return states.front(); }
  const Tensor& x1() const { return states.back(); }

  /// Same states, opposite provenance tag (states are time-indexed, so
  /// re-orienting a trajectory is pure bookkeeping).
  TrajectoryBatch reversed() const {
    TrajectoryBatch t = *this;
    t.generated_by =
        generated_by == Direction::kForward ? Direction::kBackward : Direction::kForward;
    return t;
  }
};

/// Ancestral sampling under the policy. Forward policies consume start as x0
/// and fill indices 0 -> K; backward policies consume start as x1 and fill
/// K -> 0.
TrajectoryBatch rollout(const Policy& policy, const Tensor& start, Rng& rng);

/// Sum over the policy's transitions of diagonal-Gaussian log-densities at
/// the realised states: log p(tau | x0) for forward policies, log p(tau | x1)
/// for backward ones. Returns [n].
Tensor traj_log_density(const Policy& policy, const TrajectoryBatch& traj);

/// Taped variant of traj_log_density (states are constants; gradients flow to
/// the policy parameters only).
ag::Var traj_log_density_graph(const Policy& policy, const TrajectoryBatch& traj);

/// Closed-form diagonal-Gaussian KL of the policy kernel at (x, k) against
/// the reference kernel at the same point. Returns per-sample values [n].
Tensor transition_kl(const Policy& policy, const ReferenceProcess& ref, const Tensor& x, long k);

/// Shared elementwise log-density kernel, used by both the eager and the
/// taped density paths.
Tensor gauss_logpdf_rowsum_eager(const Tensor& y, const Tensor& mean, const Tensor& logvar);

}  // namespace sbridge::dyn
