#include "sbridge/ot.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace sbridge::ot {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_dims(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw std::invalid_argument("w2_squared: dimension mismatch (" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.cols()) + ")");
  if (a.rows() < 1 || b.rows() < 1)
    throw std::invalid_argument("w2_squared: need at least one point per side");
}

double sq_dist(const double* x, const double* y, long d) {
  double s = 0.0;
  for (long j = 0; j < d; ++j) {
    const double t = x[j] - y[j];
    s += t * t;
  }
  return s;
}

/// Shortest-augmenting-path assignment with potentials on a dense square
/// cost matrix (1-based internal indexing).
double solve_assignment(const std::vector<double>& cost, long n) {
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<double> v(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<long> p(static_cast<std::size_t>(n + 1), 0);    // row matched to column j
  std::vector<long> way(static_cast<std::size_t>(n + 1), 0);  // augmenting path back-pointers

  std::vector<double> minv(static_cast<std::size_t>(n + 1));
  std::vector<char> used(static_cast<std::size_t>(n + 1));

  for (long i = 1; i <= n; ++i) {
    p[0] = i;
    long j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const long i0 = p[static_cast<std::size_t>(j0)];
      long j1 = -1;
      double delta = kInf;
      const double* crow = cost.data() + (i0 - 1) * n;
      for (long j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = crow[j - 1] - u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (long j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const long j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }

  double total = 0.0;
  for (long j = 1; j <= n; ++j)
    total += cost[static_cast<std::size_t>((p[static_cast<std::size_t>(j)] - 1) * n + (j - 1))];
  return total;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CRowMap = Eigen::Map<const RowMat>;

/// One soft Sinkhorn half-step: new[i] = -eps * (log_w + lse_j((other[j] - C(i,j)) / eps)).
/// Costs are formed block-by-block (GEMM + broadcasts) so no n*m matrix is ever
/// materialised and the inner exp runs vectorised. Returns max |new - out|, writing
/// the new potential into out.
double potential_update(const CRowMap& x, const Eigen::VectorXd& x_sq, const CRowMap& y,
                        const Eigen::VectorXd& y_sq, const Eigen::VectorXd& other, double eps,
                        double log_w, Eigen::VectorXd& out) {
  const long n = x.rows(), m = y.rows();
  const long block = std::clamp((1L << 21) / std::max(1L, m), 1L, n);
  const Eigen::VectorXd shift = other - y_sq;  // combines the potential and |y_j|^2 terms
  const double inv_eps = 1.0 / eps;
  RowMat z;
  double delta = 0.0;
  for (long i0 = 0; i0 < n; i0 += block) {
    const long bs = std::min(block, n - i0);
    z.noalias() = 2.0 * (x.middleRows(i0, bs) * y.transpose());
    z.rowwise() += shift.transpose();
    z.colwise() -= x_sq.segment(i0, bs);
    for (long r = 0; r < bs; ++r) {
      const double mx = z.row(r).maxCoeff();
      const double s = ((z.row(r).array() - mx) * inv_eps).exp().sum();
      const double nv = -(mx + eps * (std::log(s) + log_w));
      delta = std::max(delta, std::abs(nv - out[i0 + r]));
      out[i0 + r] = nv;
    }
  }
  return delta;
}

std::vector<double> eps_schedule(double eps0, double eps_final) {
  std::vector<double> schedule;
  for (double e = eps0; e > eps_final * 1.5; e *= 0.25) schedule.push_back(e);
  schedule.push_back(eps_final);
  return schedule;
}

double median_cost(const Tensor& a, const Tensor& b, long budget = 4096) {
  // Median over a deterministic strided subsample of pairwise costs.
  const long n = a.rows(), m = b.rows(), d = a.cols();
  std::vector<double> vals;
  vals.reserve(static_cast<std::size_t>(budget));
  const long total = n * m;
  const long stride = std::max(1L, total / budget);
  for (long t = 0; t < total && static_cast<long>(vals.size()) < budget; t += stride) {
    const long i = t / m, j = t % m;
    vals.push_back(sq_dist(a.row_ptr(i), b.row_ptr(j), d));
  }
  std::nth_element(vals.begin(), vals.begin() + vals.size() / 2, vals.end());
  return vals[vals.size() / 2];
}

/// Balanced log-domain Sinkhorn with epsilon-scaling; returns the dual value
/// mean(f) + mean(g) at the final epsilon.
double sinkhorn_dual(const Tensor& a, const Tensor& b, double eps_final) {
  const long n = a.rows(), m = b.rows(), d = a.cols();
  const double log_n = std::log(static_cast<double>(n));
  const double log_m = std::log(static_cast<double>(m));

  const CRowMap A(a.data(), n, d), B(b.data(), m, d);
  const Eigen::VectorXd a_sq = A.rowwise().squaredNorm();
  const Eigen::VectorXd b_sq = B.rowwise().squaredNorm();
  Eigen::VectorXd f = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(m);

  const auto schedule = eps_schedule(std::max(eps_final, median_cost(a, b)), eps_final);
  for (std::size_t lvl = 0; lvl < schedule.size(); ++lvl) {
    const double eps = schedule[lvl];
    const long iters = (lvl + 1 == schedule.size()) ? 40 : 8;
    for (long it = 0; it < iters; ++it) {
      double delta = potential_update(A, a_sq, B, b_sq, g, eps, log_n, f);
      delta = std::max(delta, potential_update(B, b_sq, A, a_sq, f, eps, log_m, g));
      if (delta < 1e-3 * eps) break;
    }
  }

  return f.mean() + g.mean();
}

/// Self-transport dual for the debiasing terms. With identical marginals the two
/// potentials coincide, so we iterate a single one with fixed-point averaging
/// (h <- (h + T h)/2), which halves the work per sweep and converges quickly.
double sinkhorn_self_dual(const Tensor& a, double eps_final) {
  const long n = a.rows(), d = a.cols();
  const double log_n = std::log(static_cast<double>(n));

  const CRowMap A(a.data(), n, d);
  const Eigen::VectorXd a_sq = A.rowwise().squaredNorm();
  Eigen::VectorXd h = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd th(n);

  const auto schedule = eps_schedule(std::max(eps_final, median_cost(a, a)), eps_final);
  for (std::size_t lvl = 0; lvl < schedule.size(); ++lvl) {
    const double eps = schedule[lvl];
    const long iters = (lvl + 1 == schedule.size()) ? 40 : 8;
    for (long it = 0; it < iters; ++it) {
      th = h;
      potential_update(A, a_sq, A, a_sq, h, eps, log_n, th);
      th = 0.5 * (h + th);
      const double delta = (th - h).cwiseAbs().maxCoeff();
      h = th;
      if (delta < 1e-3 * eps) break;
    }
  }

  return 2.0 * h.mean();
}

}  // namespace

double assignment_w2sq(const Tensor& a, const Tensor& b) {
  check_dims(a, b);
  const long n = a.rows();
  if (b.rows() != n)
    throw std::invalid_argument("assignment_w2sq: point counts must match");
  const long d = a.cols();
  std::vector<double> cost(static_cast<std::size_t>(n) * static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < n; ++j)
      cost[static_cast<std::size_t>(i * n + j)] = sq_dist(a.row_ptr(i), b.row_ptr(j), d);
  return solve_assignment(cost, n) / static_cast<double>(n);
}

double sinkhorn_w2sq(const Tensor& a, const Tensor& b) {
  check_dims(a, b);
  const double med = median_cost(a, b);
  const double eps = std::max(1e-3 * med, 1e-9);
  const double ab = sinkhorn_dual(a, b, eps);
  const double aa = sinkhorn_self_dual(a, eps);
  const double bb = sinkhorn_self_dual(b, eps);
  // The divergence is nonnegative at convergence; guard against rounding.
  return std::max(0.0, ab - 0.5 * (aa + bb));
}

W2Result w2_squared(const Tensor& a, const Tensor& b, long max_exact) {
  check_dims(a, b);
  if (a.rows() == b.rows() && a.rows() <= max_exact)
    return {assignment_w2sq(a, b), "exact_assignment"};
  return {sinkhorn_w2sq(a, b), "sinkhorn_debiased"};
}

}  // namespace sbridge::ot
