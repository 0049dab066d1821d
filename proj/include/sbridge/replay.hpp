#pragma once

#include "sbridge/dynamics.hpp"
#include "sbridge/rng.hpp"
#include "sbridge/targets.hpp"
#include "sbridge/tensor.hpp"

#include <functional>
#include <optional>

namespace sbridge::offpolicy {

/// Periodic unadjusted-Langevin correction of buffer contents.
struct LangevinPlan {
  bool enabled = false;
  long every = 500;       // refresh period in forward-phase steps
  long n_steps = 50;      // Langevin iterations per refresh
  double step_size = 0.01;
  std::optional<double> anneal_to;  // linear step-size anneal across n_steps

  void validate() const {
    if (!enabled) return;
    if (every <= 0) throw std::invalid_argument("LangevinPlan: every must be positive");
    if (n_steps < 0) throw std::invalid_argument("LangevinPlan: n_steps must be >= 0");
    if (!(step_size > 0.0))
      throw std::invalid_argument("LangevinPlan: step_size must be positive");
    if (anneal_to && !(*anneal_to > 0.0))
      throw std::invalid_argument("LangevinPlan: anneal_to must be positive");
  }
};

/// How variance-loss training groups are sourced within a forward phase.
struct OffPolicyPlan {
  double ratio = 0.8;  // fraction of groups built from the buffer
  std::optional<std::pair<double, double>> anneal;  // linear ratio schedule
  bool reuse_backward = true;
  LangevinPlan langevin;

  void validate() const {
    if (ratio < 0.0 || ratio > 1.0)
      throw std::invalid_argument("OffPolicyPlan: ratio must be in [0,1]");
    if (anneal) {
      auto [a, b] = *anneal;
      if (a < 0.0 || a > 1.0 || b < 0.0 || b > 1.0)
        throw std::invalid_argument("OffPolicyPlan: annealed ratios must be in [0,1]");
    }
    langevin.validate();
  }

  /// Ratio at a given step of a phase (linear in step index when annealed).
  double current_ratio(long step, long total_steps) const {
    if (!anneal) return ratio;
    auto [a, b] = *anneal;
    if (total_steps <= 1) return b;
    const double f = static_cast<double>(step) / static_cast<double>(total_steps - 1);
    return a + (b - a) * f;
  }
};

/// Fixed-capacity ring buffer of endpoint samples.
class ReplayBuffer {
 public:
  ReplayBuffer() = default;
  ReplayBuffer(long capacity, long dim);

  long capacity() const { return capacity_; }
  long dim() const { return dim_; }
  long size() const { return size_; }
  bool empty() const { return size_ == 0; }

  /// Count of non-finite samples that were dropped instead of stored.
  long skipped_nonfinite() const { return skipped_; }

  /// Append rows; overwrites the oldest entries once full.
  void push(const Tensor& batch);

  /// Uniform sample (with replacement) of n stored rows.
  Tensor sample(long n, Rng& rng) const;

  /// Overwrite roughly fraction*size uniformly chosen distinct slots with the
  /// supplied fresh rows (used at IPF iteration boundaries).
  void reinit_slots(const Tensor& fresh, Rng& rng);

  double* row(long i) { return store_.data() + i * dim_; }
  const double* row(long i) const { return store_.data() + i * dim_; }

  /// Number of rows a reinit at this fraction will want.
  long reinit_count(double fraction) const;

  /// Rebuild an exact buffer state from a snapshot (checkpoint resumption).
  static ReplayBuffer restore(long capacity, long dim, long size, long cursor, long skipped,
                              const Tensor& store);

 private:
  long capacity_ = 0;
  long dim_ = 0;
  long size_ = 0;
  long cursor_ = 0;
  long skipped_ = 0;
  Tensor store_;  // [capacity, dim]
};

/// In-place unadjusted Langevin sweep over every stored sample:
///   x <- x + eta * score(x) + sqrt(2 eta) * xi
/// for plan.n_steps iterations. Samples whose norm exceeds the divergence
/// guard are replaced through reinit_sampler and counted; the count is
/// returned.
long langevin_refresh(ReplayBuffer& buffer, const targets::Target& target,
                      const LangevinPlan& plan, Rng& rng,
                      const std::function<Tensor(long)>& reinit_sampler);

enum class GroupSource { kOnPolicy, kOffPolicy };

/// Bernoulli choice at the current (possibly annealed) ratio. Ratios 0 and 1
/// short-circuit without consuming randomness, so a ratio-0 plan leaves the
/// rng stream untouched relative to pure on-policy training.
GroupSource mix_policy_choice(const OffPolicyPlan& plan, long step, long total_steps, Rng& rng);

/// One buffer-seeded variance-loss group: draw x1 from the buffer, roll it
/// backward under phi to get x0, then (reuse_backward) keep that trajectory
/// plus N-1 forward rollouts from x0, or (otherwise) N forward rollouts from
/// x0. All rows share x0 bitwise. Returned batch has n == N and forward
/// orientation.
dyn::TrajectoryBatch sample_group_offpolicy(const ReplayBuffer& buffer, const dyn::Policy& phi,
                                            const dyn::Policy& theta, long n_traj,
                                            bool reuse_backward, Rng& rng);

/// Mirror image anchored at x0 drawn from the buffer: forward rollout under
/// theta supplies x1 and is kept (or replaced by a backward rollout when
/// reuse is off), plus N-1 backward rollouts from x1. All rows share x1
/// bitwise. Returned batch has n == N and backward orientation.
dyn::TrajectoryBatch sample_group_offpolicy_backward(const ReplayBuffer& buffer,
                                                     const dyn::Policy& theta,
                                                     const dyn::Policy& phi, long n_traj,
                                                     bool reuse_forward, Rng& rng);

/// Concatenate same-grid groups row-wise into one batch (groups stay
/// contiguous, group g occupying rows [g*N, (g+1)*N)).
dyn::TrajectoryBatch concat_groups(const std::vector<dyn::TrajectoryBatch>& groups);

}  // namespace sbridge::offpolicy
