#pragma once

#include "sbridge/tensor.hpp"

#include <string>

namespace sbridge::ot {

struct W2Result {
  double value = 0.0;   // squared 2-Wasserstein estimate
  std::string method;   // "exact_assignment" or "sinkhorn_debiased"
};

/// Squared 2-Wasserstein distance between the empirical measures of two point
/// sets. Solved exactly by linear assignment when n == m <= max_exact;
/// otherwise by entropically regularised transport (log-domain Sinkhorn with
/// epsilon-scaling, debiased, epsilon = 1e-3 * median pairwise cost).
W2Result w2_squared(const Tensor& a, const Tensor& b, long max_exact = 2048);

/// Exact minimum-cost perfect matching on squared Euclidean costs; requires
/// a.rows() == b.rows(). O(n^3).
double assignment_w2sq(const Tensor& a, const Tensor& b);

/// Debiased entropic estimate; works for unequal sizes.
double sinkhorn_w2sq(const Tensor& a, const Tensor& b);

}  // namespace sbridge::ot
