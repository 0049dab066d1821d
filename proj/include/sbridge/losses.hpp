#pragma once

#include "sbridge/dynamics.hpp"
#include "sbridge/graph.hpp"
#include "sbridge/targets.hpp"

namespace sbridge::ipf {

/// Negative mean log-likelihood of the realised reverse transitions under the
/// backward policy. Trajectories come from the frozen forward policy; states
/// enter the tape as constants, so gradients reach phi only.
ag::Var backward_ml_loss(const dyn::Policy& phi, const dyn::TrajectoryBatch& traj);

/// Mirror image: negative mean forward log-likelihood on trajectories from
/// the frozen backward policy.
ag::Var forward_ml_loss(const dyn::Policy& theta, const dyn::TrajectoryBatch& traj);

/// Conditional log-variance loss for the forward half-bridge. groups holds
/// n_groups contiguous blocks of n_traj trajectories, each block sharing x0
/// bitwise. Per-trajectory statistic
///   s_i = log p_theta(tau_i | x0) - log p_phi(tau_i | x1_i) + E1(x1_i),
/// loss = mean over blocks of the unbiased sample variance of {s_i}.
/// Gradients flow to theta only; E1 enters through its shift-free base, so
/// declared energy shifts cancel identically.
ag::Var lv_forward_loss(const dyn::Policy& theta, const dyn::Policy& phi,
                        const targets::Target& e1, const dyn::TrajectoryBatch& groups,
                        long n_groups, long n_traj);

/// Mirror image anchored at shared x1:
///   s_i = log p_phi(tau_i | x1) - log p_theta(tau_i | x0_i) + E0(x0_i),
/// gradients to phi only.
ag::Var lv_backward_loss(const dyn::Policy& phi, const dyn::Policy& theta,
                         const targets::Target& e0, const dyn::TrajectoryBatch& groups,
                         long n_groups, long n_traj);

}  // namespace sbridge::ipf
