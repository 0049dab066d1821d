#include "sbridge/targets.hpp"

#include "sbridge/graph.hpp"  // kLog2Pi

#include <cmath>

namespace sbridge::targets {

namespace {

class GaussTarget final : public Target {
 public:
  GaussTarget(Tensor mean, Tensor sigmas, double shift)
      : Target(mean.size(), kSample | kEnergy | kScore | kExactLogZ, shift),
        mean_(std::move(mean)),
        sigmas_(std::move(sigmas)) {
    if (sigmas_.size() != dim_)
      throw std::invalid_argument("gauss: mean/sigma size mismatch");
    log_norm_ = 0.0;
    for (long j = 0; j < dim_; ++j) {
      if (sigmas_[j] <= 0.0) throw std::invalid_argument("gauss: sigma must be positive");
      log_norm_ += 0.5 * (ag::kLog2Pi + 2.0 * std::log(sigmas_[j]));
    }
  }

  std::string kind() const override { return "gauss"; }

 protected:
  Tensor sample_impl(long n, Rng& rng) const override {
    Tensor x({n, dim_});
    double* p = x.data();
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < dim_; ++j) *p++ = mean_[j] + sigmas_[j] * rng.normal();
    return x;
  }

  Tensor energy_impl(const Tensor& x) const override {
    const long n = x.rows();
    Tensor e({n});
    for (long i = 0; i < n; ++i) {
      double q = 0.0;
      for (long j = 0; j < dim_; ++j) {
        const double z = (x.at(i, j) - mean_[j]) / sigmas_[j];
        q += z * z;
      }
      e[i] = 0.5 * q + log_norm_;
    }
    return e;
  }

  Tensor score_impl(const Tensor& x) const override {
    Tensor s(x.shape());
    for (long i = 0; i < x.rows(); ++i)
      for (long j = 0; j < dim_; ++j)
        s.at(i, j) = -(x.at(i, j) - mean_[j]) / (sigmas_[j] * sigmas_[j]);
    return s;
  }

 private:
  Tensor mean_, sigmas_;
  double log_norm_;
};

class GmmTarget final : public Target {
 public:
  GmmTarget(Tensor means, Tensor sigmas, Tensor weights, double shift)
      : Target(means.cols(), kSample | kEnergy | kScore | kExactLogZ, shift),
        means_(std::move(means)),
        sigmas_(std::move(sigmas)),
        weights_(std::move(weights)) {
    n_comp_ = means_.rows();
    if (n_comp_ < 1) throw std::invalid_argument("gmm: need at least one component");
    if (sigmas_.size() != n_comp_ || weights_.size() != n_comp_)
      throw std::invalid_argument("gmm: component count mismatch across means/sigmas/weights");
    double total = 0.0;
    for (long c = 0; c < n_comp_; ++c) {
      if (sigmas_[c] <= 0.0) throw std::invalid_argument("gmm: sigma must be positive");
      if (weights_[c] <= 0.0) throw std::invalid_argument("gmm: weights must be positive");
      total += weights_[c];
    }
    log_w_.resize(static_cast<std::size_t>(n_comp_));
    comp_log_norm_.resize(static_cast<std::size_t>(n_comp_));
    for (long c = 0; c < n_comp_; ++c) {
      weights_[c] /= total;
      log_w_[static_cast<std::size_t>(c)] = std::log(weights_[c]);
      comp_log_norm_[static_cast<std::size_t>(c)] =
          0.5 * static_cast<double>(dim_) * (ag::kLog2Pi + 2.0 * std::log(sigmas_[c]));
    }
  }

  std::string kind() const override { return "gmm"; }

 protected:
  Tensor sample_impl(long n, Rng& rng) const override {
    Tensor x({n, dim_});
    for (long i = 0; i < n; ++i) {
      const long c = rng.categorical(std::span<const double>(weights_.vec()));
      for (long j = 0; j < dim_; ++j) x.at(i, j) = means_.at(c, j) + sigmas_[c] * rng.normal();
    }
    return x;
  }

  Tensor energy_impl(const Tensor& x) const override {
    const long n = x.rows();
    Tensor e({n});
    std::vector<double> lp(static_cast<std::size_t>(n_comp_));
    for (long i = 0; i < n; ++i) {
      e[i] = -log_mixture(x, i, lp);
    }
    return e;
  }

  Tensor score_impl(const Tensor& x) const override {
    Tensor s(x.shape());
    std::vector<double> lp(static_cast<std::size_t>(n_comp_));
    for (long i = 0; i < x.rows(); ++i) {
      const double lm = log_mixture(x, i, lp);
      for (long j = 0; j < dim_; ++j) s.at(i, j) = 0.0;
      for (long c = 0; c < n_comp_; ++c) {
        const double resp = std::exp(lp[static_cast<std::size_t>(c)] - lm);
        const double inv_var = 1.0 / (sigmas_[c] * sigmas_[c]);
        for (long j = 0; j < dim_; ++j)
          s.at(i, j) -= resp * (x.at(i, j) - means_.at(c, j)) * inv_var;
      }
    }
    return s;
  }

 private:
  // log sum_c w_c N(x_i; mu_c, sigma_c^2 I); lp receives the per-component
  // log joint terms for reuse by the score.
  double log_mixture(const Tensor& x, long i, std::vector<double>& lp) const {
    double best = -std::numeric_limits<double>::infinity();
    for (long c = 0; c < n_comp_; ++c) {
      double q = 0.0;
      const double inv_var = 1.0 / (sigmas_[c] * sigmas_[c]);
      for (long j = 0; j < dim_; ++j) {
        const double d = x.at(i, j) - means_.at(c, j);
        q += d * d * inv_var;
      }
      const double v = log_w_[static_cast<std::size_t>(c)] - 0.5 * q -
                       comp_log_norm_[static_cast<std::size_t>(c)];
      lp[static_cast<std::size_t>(c)] = v;
      if (v > best) best = v;
    }
    double acc = 0.0;
    for (long c = 0; c < n_comp_; ++c) acc += std::exp(lp[static_cast<std::size_t>(c)] - best);
    return best + std::log(acc);
  }

  Tensor means_, sigmas_, weights_;
  long n_comp_ = 0;
  std::vector<double> log_w_, comp_log_norm_;
};

class TwoMoonsTarget final : public Target {
 public:
  explicit TwoMoonsTarget(double noise) : Target(2, kSample, 0.0), noise_(noise) {
    if (noise < 0.0) throw std::invalid_argument("two_moons: noise must be >= 0");
  }

  std::string kind() const override { return "two_moons"; }

 protected:
  Tensor sample_impl(long n, Rng& rng) const override {
    Tensor x({n, 2});
    for (long i = 0; i < n; ++i) {
      const double t = rng.uniform() * M_PI;
      double px = 2.0 * std::cos(t) - 1.0;
      double py = 2.0 * std::sin(t) - 0.5;
      if (rng.bernoulli(0.5)) {
        px = -px;
        py = -py;
      }
      x.at(i, 0) = px + noise_ * rng.normal();
      x.at(i, 1) = py + noise_ * rng.normal();
    }
    return x;
  }

 private:
  double noise_;
};

}  // namespace

TargetPtr make_gauss(Tensor mean, double sigma, double energy_shift) {
  Tensor sigmas = Tensor::full({mean.size()}, sigma);
  return std::make_shared<GaussTarget>(std::move(mean), std::move(sigmas), energy_shift);
}

TargetPtr make_diag_gauss(Tensor mean, Tensor sigmas, double energy_shift) {
  return std::make_shared<GaussTarget>(std::move(mean), std::move(sigmas), energy_shift);
}

TargetPtr make_gmm(Tensor means, Tensor sigmas, Tensor weights, double energy_shift) {
  return std::make_shared<GmmTarget>(std::move(means), std::move(sigmas), std::move(weights),
                                     energy_shift);
}

TargetPtr make_gmm_ring(long n_comp, double radius, double sigma, double energy_shift) {
  if (n_comp < 1) throw std::invalid_argument("gmm_ring: need at least one component");
  Tensor means({n_comp, 2});
  for (long c = 0; c < n_comp; ++c) {
    const double a = 2.0 * M_PI * static_cast<double>(c) / static_cast<double>(n_comp);
    means.at(c, 0) = radius * std::cos(a);
    means.at(c, 1) = radius * std::sin(a);
  }
  return make_gmm(std::move(means), Tensor::full({n_comp}, sigma),
                  Tensor::full({n_comp}, 1.0), energy_shift);
}

TargetPtr make_two_moons(double noise) { return std::make_shared<TwoMoonsTarget>(noise); }

}  // namespace sbridge::targets
