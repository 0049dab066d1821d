#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "fd_check.hpp"
#include "sbridge/dynamics.hpp"
#include "sbridge/graph.hpp"
#include "sbridge/rng.hpp"
#include "sbridge/tensor.hpp"

using namespace sbridge;
using dyn::Direction;
using dyn::Policy;
using dyn::ReferenceProcess;
using dyn::TimeGrid;
using dyn::VarianceMode;

namespace {

nn::MlpConfig small_net() {
  nn::MlpConfig cfg;
  cfg.hidden_dim = 16;
  cfg.n_hidden = 2;
  cfg.layernorm = true;
  return cfg;
}

Policy make_policy(Direction dir, VarianceMode vmode, long dim, long K, double dt,
                   double sigma = std::sqrt(2.0), double ou_alpha = 0.0,
                   unsigned long long seed = 11) {
  Rng rng = Rng::stream(seed, "policy_init");
  return Policy(dir, vmode, dim, TimeGrid{K, dt}, ReferenceProcess{sigma, ou_alpha}, small_net(),
                rng, dyn::to_string(dir));
}

// A fresh net's head is zero; give every parameter (head included) a value so
// the drift and log-variance outputs are in general position.
void randomize(Policy& p, unsigned long long seed) {
  Rng rng = Rng::stream(seed, "randomize");
  for (auto& v : p.params())
    for (long i = 0; i < v->val.size(); ++i) v->val[i] = 0.3 * rng.normal();
}

// Independent scalar Gaussian log-pdf, written against var rather than logvar
// so it exercises a different floating-point path than the library.
double logpdf1(double y, double m, double var) {
  const double d = y - m;
  return -0.5 * std::log(2.0 * M_PI * var) - d * d / (2.0 * var);
}

Tensor random_batch(long n, long d, unsigned long long seed) {
  Rng rng = Rng::stream(seed, "batch");
  Tensor x({n, d});
  rng.fill_normal(x);
  return x;
}

}  // namespace

TEST_CASE("zero-initialised policies reproduce the reference kernel exactly") {
  const double sigma = std::sqrt(2.0), alpha = 0.3, dt = 0.02;
  for (auto vmode : {VarianceMode::kFixed, VarianceMode::kLearnt}) {
    Policy p = make_policy(Direction::kForward, vmode, 2, 10, dt, sigma, alpha);
    Tensor x = random_batch(7, 2, 21);
    const dyn::Kernel ker = p.kernel(x, 3);
    const ReferenceProcess ref{sigma, alpha};
    const Tensor rmean = ref.mean(x, dt);
    const double rvar = ref.step_var(dt);
    for (long i = 0; i < x.size(); ++i) {
      CHECK(ker.mean[i] == rmean[i]);
      CHECK(ker.var[i] == rvar);
      CHECK(ker.logvar[i] == std::log(rvar));
    }
    const Tensor kl = dyn::transition_kl(p, ref, x, 3);
    for (long i = 0; i < kl.size(); ++i) CHECK(kl[i] == 0.0);
  }
}

TEST_CASE("kernel matches the hand formula with a randomised net") {
  const double sigma = 1.3, alpha = 0.25, dt = 0.05;
  const long d = 3, K = 8;
  Policy p = make_policy(Direction::kForward, VarianceMode::kLearnt, d, K, dt, sigma, alpha, 31);
  randomize(p, 32);

  Tensor x = random_batch(5, d, 33);
  const long k = 2;
  const dyn::Kernel ker = p.kernel(x, k);

  // Rebuild the net input by hand and query the raw head outputs.
  Tensor in({5, d + 1});
  for (long r = 0; r < 5; ++r) {
    for (long j = 0; j < d; ++j) in.at(r, j) = x.at(r, j);
    in.at(r, d) = (static_cast<double>(k) * dt) / (static_cast<double>(K) * dt);
  }
  const Tensor out = p.net().forward_eager(in);
  REQUIRE(out.cols() == 2 * d);

  const double base_var = sigma * sigma * dt;
  for (long r = 0; r < 5; ++r)
    for (long j = 0; j < d; ++j) {
      const double mean = x.at(r, j) * (1.0 - alpha * dt) + dt * out.at(r, j);
      const double cc = std::clamp(out.at(r, d + j), -5.0, 5.0);
      CHECK(ker.mean.at(r, j) == doctest::Approx(mean).epsilon(1e-14));
      CHECK(ker.var.at(r, j) == doctest::Approx(base_var * std::exp(cc)).epsilon(1e-14));
      CHECK(ker.logvar.at(r, j) ==
            doctest::Approx(std::log(base_var) + cc).epsilon(1e-14));
    }
}

TEST_CASE("log-variance head saturates at the clamp bounds") {
  const long d = 1;
  Policy p = make_policy(Direction::kForward, VarianceMode::kLearnt, d, 4, 0.01, 1.0, 0.0, 41);
  // Head weights are zero on a fresh net, so the head bias IS the output.
  auto& head_b = p.params().back();
  REQUIRE(head_b->val.size() == 2 * d);
  head_b->val[d] = 12.0;  // log-variance channel, far above the clamp
  Tensor x = random_batch(3, d, 42);
  dyn::Kernel hi = p.kernel(x, 0);
  CHECK(hi.var[0] == doctest::Approx(0.01 * std::exp(5.0)).epsilon(1e-14));
  head_b->val[d] = -12.0;
  dyn::Kernel lo = p.kernel(x, 0);
  CHECK(lo.var[0] == doctest::Approx(0.01 * std::exp(-5.0)).epsilon(1e-14));
}

TEST_CASE("taped kernel agrees with the eager kernel") {
  Policy p = make_policy(Direction::kBackward, VarianceMode::kLearnt, 2, 6, 0.04, 1.1, 0.2, 51);
  randomize(p, 52);
  Tensor x = random_batch(9, 2, 53);
  const dyn::Kernel eager = p.kernel(x, 4);
  const dyn::KernelGraph taped = p.kernel_graph(x, 4);
  for (long i = 0; i < x.size(); ++i) {
    CHECK(taped.mean->val[i] == doctest::Approx(eager.mean[i]).epsilon(1e-13));
    CHECK(taped.logvar->val[i] == doctest::Approx(eager.logvar[i]).epsilon(1e-13));
  }

  // Zero head: both paths reduce to the reference kernel bitwise.
  Policy z = make_policy(Direction::kForward, VarianceMode::kFixed, 2, 6, 0.04, 1.1, 0.2, 54);
  const dyn::Kernel ze = z.kernel(x, 0);
  const dyn::KernelGraph zt = z.kernel_graph(x, 0);
  for (long i = 0; i < x.size(); ++i) {
    CHECK(zt.mean->val[i] == ze.mean[i]);
    CHECK(zt.logvar->val[i] == ze.logvar[i]);
  }
}

TEST_CASE("rollout fills states in the policy's own direction, deterministically") {
  const long K = 5, n = 6, d = 2;
  Tensor start = random_batch(n, d, 61);

  Policy fwd = make_policy(Direction::kForward, VarianceMode::kFixed, d, K, 0.02);
  randomize(fwd, 62);
  Rng r1 = Rng::stream(63, "roll");
  const dyn::TrajectoryBatch tf = rollout(fwd, start, r1);
  CHECK(tf.n == n);
  CHECK(tf.dim == d);
  CHECK(tf.states.size() == static_cast<std::size_t>(K + 1));
  CHECK(tf.generated_by == Direction::kForward);
  for (long i = 0; i < start.size(); ++i) CHECK(tf.states[0][i] == start[i]);
  for (const Tensor& s : tf.states) CHECK(s.all_finite());

  Rng r2 = Rng::stream(63, "roll");
  const dyn::TrajectoryBatch tg = rollout(fwd, start, r2);
  for (long k = 0; k <= K; ++k)
    for (long i = 0; i < start.size(); ++i)
      CHECK(tf.states[static_cast<std::size_t>(k)][i] ==
            tg.states[static_cast<std::size_t>(k)][i]);

  Policy bwd = make_policy(Direction::kBackward, VarianceMode::kFixed, d, K, 0.02);
  randomize(bwd, 64);
  Rng r3 = Rng::stream(65, "roll");
  const dyn::TrajectoryBatch tb = rollout(bwd, start, r3);
  CHECK(tb.generated_by == Direction::kBackward);
  for (long i = 0; i < start.size(); ++i)
    CHECK(tb.states[static_cast<std::size_t>(K)][i] == start[i]);
  CHECK(tb.x1()[0] == start[0]);
  CHECK(tb.x0().all_finite());
}

TEST_CASE("trajectory log-density matches a hand-summed oracle at K=2") {
  const long K = 2, n = 4, d = 2;
  Tensor start = random_batch(n, d, 71);

  for (auto dir : {Direction::kForward, Direction::kBackward}) {
    Policy p = make_policy(dir, VarianceMode::kLearnt, d, K, 0.03, 1.2, 0.1, 72);
    randomize(p, 73);
    Rng rr = Rng::stream(74, "roll");
    const dyn::TrajectoryBatch traj = rollout(p, start, rr);
    const Tensor lp = traj_log_density(p, traj);
    REQUIRE(lp.size() == n);

    const bool fwd = dir == Direction::kForward;
    for (long i = 0; i < n; ++i) {
      double acc = 0.0;
      for (long k = p.first_step(); k <= p.last_step(); ++k) {
        const Tensor& x = traj.states[static_cast<std::size_t>(k)];
        const Tensor& y = traj.states[static_cast<std::size_t>(fwd ? k + 1 : k - 1)];
        const dyn::Kernel ker = p.kernel(x, k);
        for (long j = 0; j < d; ++j)
          acc += logpdf1(y.at(i, j), ker.mean.at(i, j), ker.var.at(i, j));
      }
      CHECK(lp[i] == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("taped trajectory log-density equals the eager value and reaches the parameters") {
  const long K = 3, n = 5, d = 2;
  Policy p = make_policy(Direction::kForward, VarianceMode::kLearnt, d, K, 0.02, 1.0, 0.0, 81);
  randomize(p, 82);
  Rng rr = Rng::stream(83, "roll");
  const dyn::TrajectoryBatch traj = rollout(p, random_batch(n, d, 84), rr);

  const Tensor eager = traj_log_density(p, traj);
  const ag::Var taped = traj_log_density_graph(p, traj);
  REQUIRE(taped->val.size() == n);
  for (long i = 0; i < n; ++i)
    CHECK(taped->val[i] == doctest::Approx(eager[i]).epsilon(1e-13));

  ag::zero_grad(p.params());
  ag::backward(ag::mean_all(traj_log_density_graph(p, traj)));
  double gnorm = 0.0;
  for (const auto& v : p.params())
    if (v->grad.size() > 0) gnorm += v->grad.arr().abs().sum();
  CHECK(gnorm > 1e-6);
  ag::zero_grad(p.params());
}

TEST_CASE("transition KL matches the closed form and a Monte Carlo estimate") {
  const long d = 2;
  const double sigma = 1.4, dt = 0.05, alpha = 0.2;
  Policy p = make_policy(Direction::kForward, VarianceMode::kLearnt, d, 10, dt, sigma, alpha, 91);
  // Constant drift (0.6, -0.9) and log-variance offsets (0.5, -0.7) via the
  // head bias of a zero-weight head.
  auto& head_b = p.params().back();
  REQUIRE(head_b->val.size() == 2 * d);
  head_b->val[0] = 0.6;
  head_b->val[1] = -0.9;
  head_b->val[2] = 0.5;
  head_b->val[3] = -0.7;

  Tensor x = Tensor::row({0.7, -1.1});
  const ReferenceProcess ref{sigma, alpha};
  const Tensor kl = dyn::transition_kl(p, ref, x, 4);
  REQUIRE(kl.size() == 1);

  const double qv = sigma * sigma * dt;
  double expect = 0.0;
  const double drift[2] = {0.6, -0.9}, cvals[2] = {0.5, -0.7};
  for (long j = 0; j < d; ++j) {
    const double vp = qv * std::exp(cvals[j]);
    const double dm = dt * drift[j];
    expect += 0.5 * (std::log(qv / vp) + (vp + dm * dm) / qv - 1.0);
  }
  CHECK(kl[0] == doctest::Approx(expect).epsilon(1e-12));

  // Monte Carlo oracle: E_p[log p - log q] under the policy kernel.
  const dyn::Kernel ker = p.kernel(x, 4);
  const Tensor qm = ref.mean(x, dt);
  Rng rng = Rng::stream(92, "mc");
  const long n_mc = 400000;
  double s1 = 0.0, s2 = 0.0;
  for (long i = 0; i < n_mc; ++i) {
    double lr = 0.0;
    for (long j = 0; j < d; ++j) {
      const double z = ker.mean[j] + std::sqrt(ker.var[j]) * rng.normal();
      lr += logpdf1(z, ker.mean[j], ker.var[j]) - logpdf1(z, qm[j], qv);
    }
    s1 += lr;
    s2 += lr * lr;
  }
  s1 /= static_cast<double>(n_mc);
  s2 /= static_cast<double>(n_mc);
  const double se = std::sqrt((s2 - s1 * s1) / static_cast<double>(n_mc));
  CHECK(se < 0.01);
  CHECK(std::abs(s1 - expect) < 4.0 * se);
}

TEST_CASE("Brownian endpoint spread grows like sigma^2 t") {
  const long K = 20, n = 200000;
  const double dt = 0.01, sigma = std::sqrt(2.0);
  Policy p = make_policy(Direction::kForward, VarianceMode::kFixed, 1, K, dt, sigma, 0.0);
  Tensor start = Tensor::zeros({n, 1});
  Rng rr = Rng::stream(101, "roll");
  const dyn::TrajectoryBatch traj = rollout(p, start, rr);

  const Tensor& x1 = traj.x1();
  double m = 0.0;
  for (long i = 0; i < n; ++i) m += x1[i];
  m /= static_cast<double>(n);
  double v = 0.0;
  for (long i = 0; i < n; ++i) v += (x1[i] - m) * (x1[i] - m);
  v /= static_cast<double>(n - 1);

  const double expect = sigma * sigma * static_cast<double>(K) * dt;  // 0.4
  CHECK(std::abs(m) < 5.0 * std::sqrt(expect / static_cast<double>(n)));
  CHECK(std::abs(v - expect) < 5.0 * expect * std::sqrt(2.0 / static_cast<double>(n)));
}

TEST_CASE("OU reference started at stationarity stays stationary") {
  const long K = 40, n = 50000;
  const double dt = 0.05, sigma = std::sqrt(2.0), alpha = 0.5;
  Policy p = make_policy(Direction::kForward, VarianceMode::kFixed, 1, K, dt, sigma, alpha);

  const double a = 1.0 - alpha * dt;
  const double vstar = sigma * sigma * dt / (1.0 - a * a);
  Rng init = Rng::stream(111, "init");
  Tensor start({n, 1});
  for (long i = 0; i < n; ++i) start[i] = std::sqrt(vstar) * init.normal();

  Rng rr = Rng::stream(112, "roll");
  const dyn::TrajectoryBatch traj = rollout(p, start, rr);
  const Tensor& x1 = traj.x1();
  double m = 0.0;
  for (long i = 0; i < n; ++i) m += x1[i];
  m /= static_cast<double>(n);
  double v = 0.0;
  for (long i = 0; i < n; ++i) v += (x1[i] - m) * (x1[i] - m);
  v /= static_cast<double>(n - 1);
  CHECK(std::abs(v - vstar) < 5.0 * vstar * std::sqrt(2.0 / static_cast<double>(n)));
}

TEST_CASE("step-index bounds are enforced per direction") {
  const long K = 5;
  Policy fwd = make_policy(Direction::kForward, VarianceMode::kFixed, 2, K, 0.01);
  Policy bwd = make_policy(Direction::kBackward, VarianceMode::kFixed, 2, K, 0.01);
  CHECK(fwd.first_step() == 0);
  CHECK(fwd.last_step() == K - 1);
  CHECK(bwd.first_step() == 1);
  CHECK(bwd.last_step() == K);

  Tensor x = random_batch(2, 2, 121);
  CHECK_NOTHROW((void)fwd.kernel(x, 0));
  CHECK_NOTHROW((void)fwd.kernel(x, K - 1));
  CHECK_THROWS((void)fwd.kernel(x, K));
  CHECK_THROWS((void)fwd.kernel(x, -1));
  CHECK_NOTHROW((void)bwd.kernel(x, 1));
  CHECK_NOTHROW((void)bwd.kernel(x, K));
  CHECK_THROWS((void)bwd.kernel(x, 0));
  CHECK_THROWS((void)bwd.kernel(x, K + 1));
}

TEST_CASE("malformed inputs are rejected") {
  Policy p = make_policy(Direction::kForward, VarianceMode::kFixed, 2, 4, 0.01);
  Rng rng = Rng::stream(131, "roll");

  Tensor bad_dim = random_batch(3, 5, 132);
  CHECK_THROWS((void)rollout(p, bad_dim, rng));
  CHECK_THROWS((void)p.kernel(bad_dim, 0));

  Tensor nan_start = Tensor::zeros({2, 2});
  nan_start.at(0, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS((void)rollout(p, nan_start, rng));

  const dyn::TrajectoryBatch traj = rollout(p, random_batch(3, 2, 133), rng);
  Policy other_grid = make_policy(Direction::kForward, VarianceMode::kFixed, 2, 5, 0.01);
  CHECK_THROWS((void)traj_log_density(other_grid, traj));
  Policy other_dim = make_policy(Direction::kForward, VarianceMode::kFixed, 3, 4, 0.01);
  CHECK_THROWS((void)traj_log_density(other_dim, traj));
  dyn::TrajectoryBatch truncated = traj;
  truncated.states.pop_back();
  CHECK_THROWS((void)traj_log_density(p, truncated));
  CHECK_THROWS((void)traj_log_density_graph(p, truncated));

  Rng ctor_rng = Rng::stream(134, "init");
  CHECK_THROWS(Policy(Direction::kForward, VarianceMode::kFixed, 0, TimeGrid{4, 0.01},
                      ReferenceProcess{}, small_net(), ctor_rng, "p"));
  CHECK_THROWS(Policy(Direction::kForward, VarianceMode::kFixed, 2, TimeGrid{0, 0.01},
                      ReferenceProcess{}, small_net(), ctor_rng, "p"));
  CHECK_THROWS(Policy(Direction::kForward, VarianceMode::kFixed, 2, TimeGrid{4, 0.0},
                      ReferenceProcess{}, small_net(), ctor_rng, "p"));
  CHECK_THROWS(Policy(Direction::kForward, VarianceMode::kFixed, 2, TimeGrid{4, 0.01},
                      ReferenceProcess{0.0, 0.0}, small_net(), ctor_rng, "p"));
  CHECK_THROWS(Policy(Direction::kForward, VarianceMode::kFixed, 2, TimeGrid{4, 0.01},
                      ReferenceProcess{1.0, -0.5}, small_net(), ctor_rng, "p"));
}

TEST_CASE("reversing a trajectory flips provenance and keeps every state") {
  Policy p = make_policy(Direction::kForward, VarianceMode::kFixed, 2, 3, 0.02);
  randomize(p, 141);
  Rng rng = Rng::stream(142, "roll");
  const dyn::TrajectoryBatch traj = rollout(p, random_batch(4, 2, 143), rng);
  const dyn::TrajectoryBatch rev = traj.reversed();
  CHECK(rev.generated_by == Direction::kBackward);
  CHECK(rev.reversed().generated_by == Direction::kForward);
  REQUIRE(rev.states.size() == traj.states.size());
  for (std::size_t k = 0; k < traj.states.size(); ++k)
    for (long i = 0; i < traj.states[k].size(); ++i)
      CHECK(rev.states[k][i] == traj.states[k][i]);
  CHECK(rev.x0()[0] == traj.states.front()[0]);
  CHECK(rev.x1()[0] == traj.states.back()[0]);
}

TEST_CASE("policy gradients through the trajectory density match finite differences") {
  const long K = 3, n = 4, d = 2;
  for (auto vmode : {VarianceMode::kFixed, VarianceMode::kLearnt}) {
    Policy p = make_policy(Direction::kBackward, vmode, d, K, 0.05, 1.0, 0.1, 151);
    randomize(p, 152);
    Rng rng = Rng::stream(153, "roll");
    const dyn::TrajectoryBatch traj = rollout(p, random_batch(n, d, 154), rng);

    auto make_loss = [&]() { return ag::mean_all(traj_log_density_graph(p, traj)); };
    const fdcheck::Report rep = fdcheck::check(make_loss, p.params());
    INFO("worst: ", rep.worst);
    CHECK(rep.n_checked > 50);
    CHECK(rep.max_rel < 1e-4);
  }
}
