#pragma once

#include "sbridge/dynamics.hpp"
#include "sbridge/ot.hpp"
#include "sbridge/rng.hpp"
#include "sbridge/targets.hpp"

#include <optional>
#include <string>

namespace sbridge::metrics {

struct MetricValue {
  double value = 0.0;
  std::optional<double> stderr_;  // absent for transport estimates
  long n = 0;
  std::string method;
};

/// Evidence lower bound on log Z of the (possibly unnormalised) target
/// energy: E over forward rollouts of
///   log p_phi(tau | x1) - E1(x1) - log p_theta(tau | x0) - log p0(x0).
/// p0 must expose sample + energy with analytic normalisation; declared
/// energy shifts on E1 move the bound by exactly their negation.
MetricValue elbo(const dyn::Policy& theta, const dyn::Policy& phi, const targets::Target& p0,
                 const targets::Target& p1, long n, Rng& rng);

/// Rao-Blackwellised path KL against the policy's reference process: mean
/// over rollouts of the summed closed-form per-step Gaussian KLs.
MetricValue path_kl(const dyn::Policy& theta, const targets::Target& p0, long n, Rng& rng);

/// Naive high-variance estimator of the same quantity: mean log-ratio of the
/// trajectory density under the policy and under the discretised reference.
MetricValue path_kl_naive(const dyn::Policy& theta, const targets::Target& p0, long n, Rng& rng);

/// Expected discrete path energy: E[ sum_k ||F(x_k, k dt)||^2 / (2 sigma^2) dt ]
/// with F the policy's full drift and sigma its reference coefficient.
MetricValue path_energy(const dyn::Policy& theta, const targets::Target& p0, long n, Rng& rng);

/// Static quadratic transport cost E||x1 - x0||^2 under the learnt forward
/// process.
MetricValue l2_cost(const dyn::Policy& theta, const targets::Target& p0, long n, Rng& rng);

/// Squared 2-Wasserstein between sample batches (see ot::w2_squared).
MetricValue w2sq(const Tensor& a, const Tensor& b);

/// Number of mixture components owning at least min_fraction of the samples
/// within radius_sigmas * sigma of their mean (mode-coverage diagnostic).
long modes_covered(const Tensor& samples, const Tensor& means, double sigma,
                   double radius_sigmas = 3.0, double min_fraction = 0.02);

}  // namespace sbridge::metrics
