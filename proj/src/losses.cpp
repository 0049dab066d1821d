#include "sbridge/losses.hpp"

#include <cmath>
#include <cstring>

namespace sbridge::ipf {

namespace {

void check_direction(const dyn::Policy& p, dyn::Direction want, const char* who) {
  if (p.direction() != want)
    throw std::invalid_argument(std::string(who) + ": policy has the wrong time direction");
}

/// Every block of n_traj rows must share the anchor state (x0 for forward
/// groups, x1 for backward ones) down to the last bit; anything else means
/// the group sampler is broken and the variance statistic is meaningless.
void check_group_anchor(const Tensor& anchor, long n_groups, long n_traj, const char* who) {
  const long d = anchor.cols();
  for (long g = 0; g < n_groups; ++g) {
    const double* first = anchor.row_ptr(g * n_traj);
    for (long i = 1; i < n_traj; ++i) {
      if (std::memcmp(first, anchor.row_ptr(g * n_traj + i),
                      static_cast<std::size_t>(d) * sizeof(double)) != 0)
        throw std::invalid_argument(std::string(who) + ": group " + std::to_string(g) +
                                    " does not share its anchor state bitwise");
    }
  }
}

void check_group_shape(const dyn::TrajectoryBatch& groups, long n_groups, long n_traj,
                       const char* who) {
  if (n_traj < 2) throw std::invalid_argument(std::string(who) + ": need N >= 2 per group");
  if (n_groups < 1) throw std::invalid_argument(std::string(who) + ": need at least one group");
  if (groups.n != n_groups * n_traj)
    throw std::invalid_argument(std::string(who) + ": batch holds " + std::to_string(groups.n) +
                                " trajectories, expected " + std::to_string(n_groups * n_traj));
}

void check_finite_stats(const Tensor& s, long n_traj, const char* who) {
  for (long i = 0; i < s.size(); ++i)
    if (!std::isfinite(s[i]))
      throw std::runtime_error(std::string(who) + ": non-finite statistic for trajectory " +
                               std::to_string(i % n_traj) + " of group " +
                               std::to_string(i / n_traj));
}

}  // namespace

ag::Var backward_ml_loss(const dyn::Policy& phi, const dyn::TrajectoryBatch& traj) {
  check_direction(phi, dyn::Direction::kBackward, "backward_ml_loss");
  return ag::scale(ag::mean_all(traj_log_density_graph(phi, traj)), -1.0);
}

ag::Var forward_ml_loss(const dyn::Policy& theta, const dyn::TrajectoryBatch& traj) {
  check_direction(theta, dyn::Direction::kForward, "forward_ml_loss");
  return ag::scale(ag::mean_all(traj_log_density_graph(theta, traj)), -1.0);
}

ag::Var lv_forward_loss(const dyn::Policy& theta, const dyn::Policy& phi,
                        const targets::Target& e1, const dyn::TrajectoryBatch& groups,
                        long n_groups, long n_traj) {
  check_direction(theta, dyn::Direction::kForward, "lv_forward_loss");
  check_direction(phi, dyn::Direction::kBackward, "lv_forward_loss");
  check_group_shape(groups, n_groups, n_traj, "lv_forward_loss");
  check_group_anchor(groups.x0(), n_groups, n_traj, "lv_forward_loss");

  const ag::Var lp_theta = traj_log_density_graph(theta, groups);
  const Tensor lp_phi = traj_log_density(phi, groups);
  const Tensor e = e1.energy_base(groups.x1());

  Tensor offset({groups.n});
  offset.arr() = e.arr() - lp_phi.arr();
  const ag::Var s = ag::add(lp_theta, ag::constant(std::move(offset)));
  check_finite_stats(s->val, n_traj, "lv_forward_loss");
  return ag::group_variance(s, n_groups, n_traj);
}

ag::Var lv_backward_loss(const dyn::Policy& phi, const dyn::Policy& theta,
                         const targets::Target& e0, const dyn::TrajectoryBatch& groups,
                         long n_groups, long n_traj) {
  check_direction(phi, dyn::Direction::kBackward, "lv_backward_loss");
  check_direction(theta, dyn::Direction::kForward, "lv_backward_loss");
  check_group_shape(groups, n_groups, n_traj, "lv_backward_loss");
  check_group_anchor(groups.x1(), n_groups, n_traj, "lv_backward_loss");

  const ag::Var lp_phi = traj_log_density_graph(phi, groups);
  const Tensor lp_theta = traj_log_density(theta, groups);
  const Tensor e = e0.energy_base(groups.x0());

  Tensor offset({groups.n});
  offset.arr() = e.arr() - lp_theta.arr();
  const ag::Var s = ag::add(lp_phi, ag::constant(std::move(offset)));
  check_finite_stats(s->val, n_traj, "lv_backward_loss");
  return ag::group_variance(s, n_groups, n_traj);
}

}  // namespace sbridge::ipf
