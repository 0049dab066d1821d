#include "sbridge/driver.hpp"

#include "sbridge/losses.hpp"
#include "sbridge/replay.hpp"

#include <chrono>
#include <cmath>

namespace sbridge::drv {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

/// Replay-buffer contents exposed as a sampling distribution, for evaluating
/// policy expectations in regimes that lack an endpoint sampler.
class BufferSource final : public targets::Target {
 public:
  explicit BufferSource(const offpolicy::ReplayBuffer& b)
      : Target(b.dim(), targets::kSample, 0.0), b_(b) {}
  std::string kind() const override { return "replay_buffer"; }

 protected:
  Tensor sample_impl(long n, Rng& rng) const override { return b_.sample(n, rng); }

 private:
  const offpolicy::ReplayBuffer& b_;
};

Tensor repeat_rows(const Tensor& x, long times) {
  const long n = x.rows(), d = x.cols();
  Tensor out({n * times, d});
  for (long i = 0; i < n; ++i)
    for (long r = 0; r < times; ++r)
      std::copy(x.row_ptr(i), x.row_ptr(i) + d, out.row_ptr(i * times + r));
  return out;
}

void copy_row(Tensor& dst, long di, const Tensor& src, long si) {
  std::copy(src.row_ptr(si), src.row_ptr(si) + src.cols(), dst.row_ptr(di));
}

struct Driver {
  const cfg::ExperimentConfig& C;
  ckpt::BridgeState& st;
  targets::TargetPtr src;
  targets::TargetPtr tgt;
  Rng train;
  Rng eval_rng;
  nn::AdamW opt_theta;
  nn::AdamW opt_phi;

  Driver(const cfg::ExperimentConfig& config, ckpt::BridgeState& state, std::uint64_t seed)
      : C(config),
        st(state),
        src(config.source.build()),
        tgt(config.target.build()),
        train(Rng::stream(seed, "train")),
        eval_rng(Rng::stream(seed, "eval")) {
    nn::AdamWConfig oc;
    oc.lr = C.optimizer.lr;
    oc.beta1 = C.optimizer.beta1;
    oc.beta2 = C.optimizer.beta2;
    oc.weight_decay = C.optimizer.weight_decay;
    opt_theta = nn::AdamW(oc);
    opt_phi = nn::AdamW(oc);
  }

  void optimizer_step(nn::AdamW& opt, dyn::Policy& policy, const ag::Var& loss) {
    ag::backward(loss);
    nn::clip_grad_norm(policy.params(), C.optimizer.grad_clip);
    opt.step(policy.params());
    ag::zero_grad(policy.params());
  }

  // ---- group construction for the variance losses -------------------------

  /// Batched assembly of G groups x N forward-oriented trajectories sharing
  /// x0 within each group. On-policy groups anchor at fresh p0 draws;
  /// off-policy groups anchor at the x0 of a backward rollout seeded from the
  /// buffer. Rollouts run once per partition so the per-step network cost is
  /// two batched passes, not one per group.
  dyn::TrajectoryBatch build_forward_groups(const std::vector<offpolicy::GroupSource>& choice,
                                            long N) {
    const long G = static_cast<long>(choice.size());
    const long d = st.theta.dim();
    std::vector<long> off_idx;
    long n_on = 0;
    for (long g = 0; g < G; ++g)
      if (choice[static_cast<std::size_t>(g)] == offpolicy::GroupSource::kOffPolicy)
        off_idx.push_back(g);
      else
        ++n_on;
    const long n_off = static_cast<long>(off_idx.size());

    dyn::TrajectoryBatch on_traj;
    if (n_on > 0) {
      const Tensor x0 = src->sample(n_on, train);
      on_traj = dyn::rollout(st.theta, repeat_rows(x0, N), train);
    }

    const bool reuse = C.offpolicy.plan.reuse_backward;
    const long fwd_per_off = reuse ? N - 1 : N;
    dyn::TrajectoryBatch off_bwd, off_fwd;
    if (n_off > 0) {
      const Tensor x1 = st.buffer_x1->sample(n_off, train);
      off_bwd = dyn::rollout(st.phi, x1, train);
      off_fwd = dyn::rollout(st.theta, repeat_rows(off_bwd.x0(), fwd_per_off), train);
    }

    dyn::TrajectoryBatch out;
    out.grid = st.theta.grid();
    out.generated_by = dyn::Direction::kForward;
    out.n = G * N;
    out.dim = d;
    const long K = out.grid.n_steps;
    out.states.assign(static_cast<std::size_t>(K + 1), Tensor({G * N, d}));
    long on_pos = 0, off_pos = 0;
    for (long g = 0; g < G; ++g) {
      const bool off = choice[static_cast<std::size_t>(g)] == offpolicy::GroupSource::kOffPolicy;
      for (long k = 0; k <= K; ++k) {
        Tensor& dst = out.states[static_cast<std::size_t>(k)];
        const std::size_t uk = static_cast<std::size_t>(k);
        if (!off) {
          for (long i = 0; i < N; ++i)
            copy_row(dst, g * N + i, on_traj.states[uk], on_pos * N + i);
        } else if (reuse) {
          copy_row(dst, g * N, off_bwd.states[uk], off_pos);
          for (long i = 0; i < N - 1; ++i)
            copy_row(dst, g * N + 1 + i, off_fwd.states[uk], off_pos * (N - 1) + i);
        } else {
          for (long i = 0; i < N; ++i)
            copy_row(dst, g * N + i, off_fwd.states[uk], off_pos * N + i);
        }
      }
      if (off)
        ++off_pos;
      else
        ++on_pos;
    }
    return out;
  }

  /// Mirror image for the energy-to-energy backward phase: groups share x1,
  /// anchored at an x0 draw from the x0 buffer pushed through the frozen
  /// forward policy.
  dyn::TrajectoryBatch build_backward_groups(long G, long N) {
    const long d = st.theta.dim();
    const Tensor x0 = st.buffer_x0->sample(G, train);
    dyn::TrajectoryBatch fwd = dyn::rollout(st.theta, x0, train);
    const bool reuse = C.offpolicy.plan.reuse_backward;
    const long bwd_per_group = reuse ? N - 1 : N;
    dyn::TrajectoryBatch bwd =
        dyn::rollout(st.phi, repeat_rows(fwd.x1(), bwd_per_group), train);

    dyn::TrajectoryBatch out;
    out.grid = st.theta.grid();
    out.generated_by = dyn::Direction::kBackward;
    out.n = G * N;
    out.dim = d;
    const long K = out.grid.n_steps;
    out.states.assign(static_cast<std::size_t>(K + 1), Tensor({G * N, d}));
    for (long g = 0; g < G; ++g)
      for (long k = 0; k <= K; ++k) {
        Tensor& dst = out.states[static_cast<std::size_t>(k)];
        const std::size_t uk = static_cast<std::size_t>(k);
        if (reuse) {
          copy_row(dst, g * N, fwd.states[uk], g);
          for (long i = 0; i < N - 1; ++i)
            copy_row(dst, g * N + 1 + i, bwd.states[uk], g * (N - 1) + i);
        } else {
          for (long i = 0; i < N; ++i)
            copy_row(dst, g * N + i, bwd.states[uk], g * N + i);
        }
      }
    return out;
  }

  // ---- buffer maintenance --------------------------------------------------

  void maybe_langevin(long step, offpolicy::ReplayBuffer& buffer, const targets::Target& energy,
                      const std::function<Tensor(long)>& reinit_sampler) {
    const offpolicy::LangevinPlan& plan = C.offpolicy.plan.langevin;
    if (!plan.enabled || buffer.empty()) return;
    if (step == 0 || step % plan.every != 0) return;
    offpolicy::langevin_refresh(buffer, energy, plan, train, reinit_sampler);
  }

  void reinit_buffers() {
    const double f = C.offpolicy.reinit_fraction;
    if (f <= 0.0) return;
    if (st.buffer_x1 && !st.buffer_x1->empty()) {
      const long want = st.buffer_x1->reinit_count(f);
      if (want > 0) {
        // Energy-to-energy training never touches p0 samples even when the
        // analytic family could provide them; the x0 buffer stands in.
        Tensor x0 = st.buffer_x0 ? st.buffer_x0->sample(want, train) : src->sample(want, train);
        st.buffer_x1->reinit_slots(dyn::rollout(st.theta, x0, train).x1(), train);
      }
    }
    if (st.buffer_x0 && !st.buffer_x0->empty()) {
      const long want = st.buffer_x0->reinit_count(f);
      if (want > 0) {
        Tensor x1 = st.buffer_x1->sample(want, train);
        st.buffer_x0->reinit_slots(dyn::rollout(st.phi, x1, train).x0(), train);
      }
    }
  }

  // ---- phase bodies ----------------------------------------------------

  double backward_phase() {
    if (C.optimizer.reset_moments_each_phase) opt_phi.reset_moments();
    const long S = C.schedule.steps_per_backward_phase;
    const long B = C.schedule.batch_size;
    double loss_sum = 0.0;

    if (C.regime == cfg::Regime::kEnergyToEnergy) {
      const long N = C.schedule.n_traj_per_x0;
      auto reinit = [&](long n) {
        return dyn::rollout(st.phi, st.buffer_x1->sample(n, train), train).x0();
      };
      for (long step = 0; step < S; ++step) {
        maybe_langevin(step, *st.buffer_x0, *src, reinit);
        dyn::TrajectoryBatch groups = build_backward_groups(B, N);
        ag::Var loss = ipf::lv_backward_loss(st.phi, st.theta, *src, groups, B, N);
        loss_sum += loss->val[0];
        optimizer_step(opt_phi, st.phi, loss);
        st.buffer_x1->push(anchor_rows(groups.x1(), B, N));
      }
      return loss_sum / static_cast<double>(S);
    }

    for (long step = 0; step < S; ++step) {
      const Tensor x0 = src->sample(B, train);
      dyn::TrajectoryBatch traj = dyn::rollout(st.theta, x0, train);
      ag::Var loss = ipf::backward_ml_loss(st.phi, traj);
      loss_sum += loss->val[0];
      optimizer_step(opt_phi, st.phi, loss);
      if (st.buffer_x1) st.buffer_x1->push(traj.x1());
    }
    return loss_sum / static_cast<double>(S);
  }

  double forward_phase() {
    if (C.optimizer.reset_moments_each_phase) opt_theta.reset_moments();
    const long S = C.schedule.steps_per_forward_phase;
    const long B = C.schedule.batch_size;
    double loss_sum = 0.0;

    if (C.regime == cfg::Regime::kDataToData) {
      for (long step = 0; step < S; ++step) {
        const Tensor x1 = tgt->sample(B, train);
        dyn::TrajectoryBatch traj = dyn::rollout(st.phi, x1, train);
        ag::Var loss = ipf::forward_ml_loss(st.theta, traj);
        loss_sum += loss->val[0];
        optimizer_step(opt_theta, st.theta, loss);
      }
      return loss_sum / static_cast<double>(S);
    }

    const long N = C.schedule.n_traj_per_x0;
    auto reinit = [&](long n) {
      Tensor x0 = st.buffer_x0 ? st.buffer_x0->sample(n, train) : src->sample(n, train);
      return dyn::rollout(st.theta, x0, train).x1();
    };
    for (long step = 0; step < S; ++step) {
      maybe_langevin(step, *st.buffer_x1, *tgt, reinit);
      const bool can_off = st.buffer_x1 && !st.buffer_x1->empty();
      std::vector<offpolicy::GroupSource> choice(static_cast<std::size_t>(B),
                                                 offpolicy::GroupSource::kOnPolicy);
      if (can_off)
        for (auto& c : choice) c = offpolicy::mix_policy_choice(C.offpolicy.plan, step, S, train);
      dyn::TrajectoryBatch groups = build_forward_groups(choice, N);
      ag::Var loss = ipf::lv_forward_loss(st.theta, st.phi, *tgt, groups, B, N);
      loss_sum += loss->val[0];
      optimizer_step(opt_theta, st.theta, loss);
      if (C.regime == cfg::Regime::kEnergyToEnergy)
        st.buffer_x0->push(anchor_rows(groups.x0(), B, N));
    }
    return loss_sum / static_cast<double>(S);
  }

  /// One representative row per group (the shared anchor is repeated N times).
  static Tensor anchor_rows(const Tensor& x, long G, long N) {
    Tensor out({G, x.cols()});
    for (long g = 0; g < G; ++g) copy_row(out, g, x, g * N);
    return out;
  }

  // ---- evaluation --------------------------------------------------------

  /// The distribution eval rollouts start from: the true p0 whenever it can
  /// be sampled, else the x0 replay buffer.
  targets::TargetPtr eval_x0_source() const {
    if (src->has(targets::kSample)) return src;
    if (st.buffer_x0 && !st.buffer_x0->empty())
      return std::make_shared<BufferSource>(*st.buffer_x0);
    return nullptr;
  }

  MetricRow phase_row(long iter, const char* phase, long steps, double mean_loss,
                      double wall_ms) {
    MetricRow r;
    r.ipf_iter = iter;
    r.phase = phase;
    r.step = steps;
    r.loss = mean_loss;
    r.wall_ms = wall_ms;
    const long n = C.eval.samples_per_phase;

    if (src->has(targets::kSample) && src->has(targets::kEnergy) &&
        tgt->has(targets::kEnergy))
      r.elbo = metrics::elbo(st.theta, st.phi, *src, *tgt, n, eval_rng).value;

    const targets::TargetPtr x0_src = eval_x0_source();
    if (x0_src) {
      r.path_kl = metrics::path_kl(st.theta, *x0_src, n, eval_rng).value;
      if (tgt->has(targets::kSample)) {
        const Tensor model_x1 = dyn::rollout(st.theta, x0_src->sample(n, eval_rng), eval_rng).x1();
        r.w2sq = metrics::w2sq(model_x1, tgt->sample(n, eval_rng)).value;
      }
    }
    return r;
  }
};

}  // namespace

RunResult run_ipf(const cfg::ExperimentConfig& config, std::uint64_t seed,
                  const RunHooks& hooks) {
  config.validate();
  ckpt::BridgeState state = ckpt::init_bridge_state(config, seed);
  Driver drv(config, state, seed);

  RunResult res;
  try {
    for (long iter = 1; iter <= config.schedule.n_ipf_iterations; ++iter) {
      drv.reinit_buffers();

      Clock::time_point t0 = Clock::now();
      const double bwd_loss = drv.backward_phase();
      MetricRow row = drv.phase_row(iter, "backward", config.schedule.steps_per_backward_phase,
                                    bwd_loss, ms_since(t0));
      res.rows.push_back(row);
      if (hooks.on_row) hooks.on_row(row);

      t0 = Clock::now();
      const double fwd_loss = drv.forward_phase();
      row = drv.phase_row(iter, "forward", config.schedule.steps_per_forward_phase, fwd_loss,
                          ms_since(t0));
      res.rows.push_back(row);
      if (hooks.on_row) hooks.on_row(row);

      state.iterations_done = iter;
      if (hooks.on_iteration) hooks.on_iteration(iter, state);
    }

    Rng final_rng = Rng::stream(seed, "final_eval");
    res.final_metrics = compute_metrics(config, state, config.eval.final_samples, final_rng);
  } catch (...) {
    if (hooks.on_abort) hooks.on_abort(state);
    throw;
  }

  res.state = std::move(state);
  return res;
}

dyn::TrajectoryBatch sample_bridge(const cfg::ExperimentConfig& config,
                                   const ckpt::BridgeState& state, long n, Rng& rng) {
  targets::TargetPtr src = config.source.build();
  Tensor x0;
  if (src->has(targets::kSample))
    x0 = src->sample(n, rng);
  else if (state.buffer_x0 && !state.buffer_x0->empty())
    x0 = state.buffer_x0->sample(n, rng);
  else
    throw std::runtime_error("sample_bridge: no x0 source (p0 lacks a sampler and the x0 buffer is empty)");
  return dyn::rollout(state.theta, x0, rng);
}

MetricMap compute_metrics(const cfg::ExperimentConfig& config, const ckpt::BridgeState& state,
                          long n, Rng& rng) {
  targets::TargetPtr src = config.source.build();
  targets::TargetPtr tgt = config.target.build();

  targets::TargetPtr x0_src;
  if (src->has(targets::kSample))
    x0_src = src;
  else if (state.buffer_x0 && !state.buffer_x0->empty())
    x0_src = std::make_shared<BufferSource>(*state.buffer_x0);

  MetricMap m;
  if (x0_src) {
    m["path_kl"] = metrics::path_kl(state.theta, *x0_src, n, rng);
    m["path_kl_naive"] = metrics::path_kl_naive(state.theta, *x0_src, n, rng);
    m["path_energy"] = metrics::path_energy(state.theta, *x0_src, n, rng);
    m["l2_cost"] = metrics::l2_cost(state.theta, *x0_src, n, rng);

    if (tgt->has(targets::kSample)) {
      const Tensor model_x1 = dyn::rollout(state.theta, x0_src->sample(n, rng), rng).x1();
      const Tensor true_x1 = tgt->sample(n, rng);
      m["w2sq"] = metrics::w2sq(model_x1, true_x1);
      if (config.target.is_mixture()) {
        const long covered = metrics::modes_covered(model_x1, config.target.mixture_means(),
                                                    config.target.mixture_sigma());
        metrics::MetricValue mv;
        mv.value = static_cast<double>(covered);
        mv.n = n;
        mv.method = "mode_count";
        m["modes_covered"] = mv;
      }
    }
  }
  if (src->has(targets::kSample) && src->has(targets::kEnergy) && tgt->has(targets::kEnergy))
    m["elbo"] = metrics::elbo(state.theta, state.phi, *src, *tgt, n, rng);
  return m;
}

}  // namespace sbridge::drv
