#include "sbridge/dynamics.hpp"

#include <cmath>

namespace sbridge::dyn {

namespace {

constexpr double kClampLo = -5.0;
constexpr double kClampHi = 5.0;

void check_traj_grid(const Policy& policy, const TrajectoryBatch& traj) {
  if (!(traj.grid == policy.grid()))
    throw std::invalid_argument("traj_log_density: trajectory grid does not match policy grid");
  if (traj.dim != policy.dim())
    throw std::invalid_argument("traj_log_density: dimension mismatch");
  if (traj.states.size() != static_cast<std::size_t>(traj.grid.n_steps + 1))
    throw std::invalid_argument("traj_log_density: malformed trajectory state list");
}

}  // namespace

Policy::Policy(Direction dir, VarianceMode vmode, long dim, TimeGrid grid, ReferenceProcess ref,
               nn::MlpConfig net_cfg, Rng& init_rng, const std::string& scope)
    : dir_(dir), vmode_(vmode), dim_(dim), grid_(grid), ref_(ref) {
  grid_.validate();
  ref_.validate();
  if (dim <= 0) throw std::invalid_argument("Policy: dim must be positive");
  net_cfg.input_dim = dim + 1;  // state plus normalised time
  net_cfg.output_dim = vmode == VarianceMode::kLearnt ? 2 * dim : dim;
  net_ = nn::Mlp(net_cfg, init_rng, scope);
}

Policy Policy::make(Direction dir, VarianceMode vmode, long dim, TimeGrid grid,
                    ReferenceProcess ref, Rng& init_rng) {
  nn::MlpConfig cfg;
  cfg.hidden_dim = 64;
  cfg.n_hidden = 3;
  return Policy(dir, vmode, dim, grid, ref, cfg, init_rng, to_string(dir));
}

void Policy::check_step(long k) const {
  if (k < first_step() || k > last_step())
    throw std::invalid_argument(std::string("Policy::kernel: ") + to_string(dir_) +
                                " transition may not leave step index " + std::to_string(k) +
                                " on a " + std::to_string(grid_.n_steps) + "-step grid");
}

Tensor Policy::net_input(const Tensor& x, long k) const {
  const long B = x.rows();
  Tensor in({B, dim_ + 1});
  const double t_feat = (static_cast<double>(k) * grid_.dt) / grid_.t_max();
  MatMap m = in.mat();
  m.leftCols(dim_) = x.mat();
  m.col(dim_).setConstant(t_feat);
  return in;
}

Kernel Policy::kernel(const Tensor& x, long k) const {
  check_step(k);
  if (x.cols() != dim_) throw std::invalid_argument("Policy::kernel: dimension mismatch");
  const long B = x.rows();
  const Tensor out = net_.forward_eager(net_input(x, k));

  Kernel ker;
  ker.mean = ref_.mean(x, grid_.dt);
  ker.mean.mat() += grid_.dt * out.mat().leftCols(dim_);

  const double base_var = ref_.step_var(grid_.dt);
  const double base_logvar = std::log(base_var);
  ker.var = Tensor({B, dim_});
  ker.logvar = Tensor({B, dim_});
  if (vmode_ == VarianceMode::kLearnt) {
    ConstMatMap c = out.cmat();
    for (long r = 0; r < B; ++r)
      for (long j = 0; j < dim_; ++j) {
        const double cc = std::min(std::max(c(r, dim_ + j), kClampLo), kClampHi);
        ker.var.at(r, j) = base_var * std::exp(cc);
        ker.logvar.at(r, j) = base_logvar + cc;
      }
  } else {
    ker.var.fill(base_var);
    ker.logvar.fill(base_logvar);
  }
  return ker;
}

KernelGraph Policy::kernel_graph(const Tensor& x, long k) const {
  check_step(k);
  if (x.cols() != dim_) throw std::invalid_argument("Policy::kernel_graph: dimension mismatch");
  const ag::Var out = net_.forward(ag::constant(net_input(x, k)));

  Tensor base = ref_.mean(x, grid_.dt);
  KernelGraph ker;
  ker.mean =
      ag::add(ag::constant(std::move(base)), ag::scale(ag::slice_cols(out, 0, dim_), grid_.dt));

  const double base_logvar = std::log(ref_.step_var(grid_.dt));
  if (vmode_ == VarianceMode::kLearnt) {
    ker.logvar = ag::add_scalar(ag::clamp(ag::slice_cols(out, dim_, 2 * dim_), kClampLo, kClampHi),
                                base_logvar);
  } else {
    ker.logvar = ag::constant(Tensor::full({x.rows(), dim_}, base_logvar));
  }
  return ker;
}

TrajectoryBatch rollout(const Policy& policy, const Tensor& start, Rng& rng) {
  if (start.cols() != policy.dim())
    throw std::invalid_argument("rollout: start dimension mismatch");
  if (!start.all_finite()) throw std::runtime_error("rollout: non-finite start state");

  const TimeGrid& grid = policy.grid();
  const long K = grid.n_steps;
  const long n = start.rows();
  const long d = policy.dim();

  TrajectoryBatch traj;
  traj.grid = grid;
  traj.generated_by = policy.direction();
  traj.n = n;
  traj.dim = d;
  traj.states.assign(static_cast<std::size_t>(K + 1), Tensor());

  const bool fwd = policy.direction() == Direction::kForward;
  long k = fwd ? 0 : K;
  traj.states[static_cast<std::size_t>(k)] = start;
  for (long s = 0; s < K; ++s) {
    const Tensor& x = traj.states[static_cast<std::size_t>(k)];
    Kernel ker = policy.kernel(x, k);
    Tensor next({n, d});
    for (long i = 0; i < next.size(); ++i)
      next[i] = ker.mean[i] + std::sqrt(ker.var[i]) * rng.normal();
    const long k_next = fwd ? k + 1 : k - 1;
    if (!next.all_finite())
      throw std::runtime_error("rollout: non-finite state produced at step index " +
                               std::to_string(k_next));
    traj.states[static_cast<std::size_t>(k_next)] = std::move(next);
    k = k_next;
  }
  return traj;
}

Tensor gauss_logpdf_rowsum_eager(const Tensor& y, const Tensor& mean, const Tensor& logvar) {
  const long B = y.rows(), D = y.cols();
  Tensor out({B});
  for (long r = 0; r < B; ++r) {
    double acc = 0.0;
    for (long j = 0; j < D; ++j) {
      const double diff = y.at(r, j) - mean.at(r, j);
      const double lv = logvar.at(r, j);
      acc += lv + diff * diff * std::exp(-lv);
    }
    out[r] = -0.5 * (static_cast<double>(D) * ag::kLog2Pi + acc);
  }
  return out;
}

Tensor traj_log_density(const Policy& policy, const TrajectoryBatch& traj) {
  check_traj_grid(policy, traj);
  const long K = traj.grid.n_steps;
  Tensor total({traj.n});
  const bool fwd = policy.direction() == Direction::kForward;
  for (long k = policy.first_step(); k <= policy.last_step(); ++k) {
    const Tensor& x = traj.states[static_cast<std::size_t>(k)];
    const Tensor& y = traj.states[static_cast<std::size_t>(fwd ? k + 1 : k - 1)];
    Kernel ker = policy.kernel(x, k);
    Tensor lp = gauss_logpdf_rowsum_eager(y, ker.mean, ker.logvar);
    total.arr() += lp.arr();
  }
  (void)K;
  return total;
}

ag::Var traj_log_density_graph(const Policy& policy, const TrajectoryBatch& traj) {
  check_traj_grid(policy, traj);
  const bool fwd = policy.direction() == Direction::kForward;
  ag::Var total;
  for (long k = policy.first_step(); k <= policy.last_step(); ++k) {
    const Tensor& x = traj.states[static_cast<std::size_t>(k)];
    const Tensor& y = traj.states[static_cast<std::size_t>(fwd ? k + 1 : k - 1)];
    KernelGraph ker = policy.kernel_graph(x, k);
    ag::Var lp = ag::gauss_logpdf_rowsum(y, ker.mean, ker.logvar);
    total = total ? ag::add(total, lp) : lp;
  }
  return total;
}

Tensor transition_kl(const Policy& policy, const ReferenceProcess& ref, const Tensor& x, long k) {
  Kernel p = policy.kernel(x, k);
  const Tensor q_mean = ref.mean(x, policy.grid().dt);
  const double q_var = ref.step_var(policy.grid().dt);

  const long n = x.rows(), d = x.cols();
  Tensor out({n});
  for (long r = 0; r < n; ++r) {
    double acc = 0.0;
    for (long j = 0; j < d; ++j) {
      const double vp = p.var.at(r, j);
      const double dm = p.mean.at(r, j) - q_mean.at(r, j);
      acc += 0.5 * (std::log(q_var / vp) + (vp + dm * dm) / q_var - 1.0);
    }
    out[r] = acc;
  }
  return out;
}

}  // namespace sbridge::dyn
