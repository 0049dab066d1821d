#pragma once

#include "sbridge/rng.hpp"
#include "sbridge/tensor.hpp"

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace sbridge::targets {

/// A requested operation is not supported by the endpoint (e.g. score of a
/// sample-only dataset distribution).
struct CapabilityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum Cap : unsigned {
  kSample = 1u,
  kEnergy = 2u,
  kScore = 4u,
  kExactLogZ = 8u,
};

/// Endpoint distribution. Analytic families expose energy (negative
/// log-density up to the declared shift), score, and exact log Z; dataset
/// style families expose sampling only.
///
/// energy(x) = energy_base(x) + energy_shift, where energy_base is normalised
/// (its exp integrates to 1), so log Z = -energy_shift whenever the base is
/// analytic. Training losses that are defined only up to additive constants
/// consume energy_base; bound-style metrics consume the full shifted energy.
class Target {
 public:
  virtual ~Target() = default;

  long dim() const { return dim_; }
  unsigned caps() const { return caps_; }
  bool has(Cap c) const { return (caps_ & c) != 0; }
  double energy_shift() const { return shift_; }

  double log_z() const {
    require(kExactLogZ, "log_z");
    return -shift_;
  }

  virtual std::string kind() const = 0;

  Tensor sample(long n, Rng& rng) const {
    require(kSample, "sample");
    if (n < 0) throw std::invalid_argument("Target::sample: negative count");
    return sample_impl(n, rng);
  }

  Tensor energy(const Tensor& x) const {
    Tensor e = energy_base(x);
    if (shift_ != 0.0) e.arr() += shift_;
    return e;
  }

  Tensor energy_base(const Tensor& x) const {
    require(kEnergy, "energy");
    check_points(x, "energy");
    return energy_impl(x);
  }

  Tensor score(const Tensor& x) const {
    require(kScore, "score");
    check_points(x, "score");
    return score_impl(x);
  }

 protected:
  Target(long dim, unsigned caps, double shift) : dim_(dim), caps_(caps), shift_(shift) {
    if (dim <= 0) throw std::invalid_argument("Target: dim must be positive");
  }

  virtual Tensor sample_impl(long /*n*/, Rng& /*rng*/) const {
    throw CapabilityError(kind() + ": sample not implemented");
  }
  virtual Tensor energy_impl(const Tensor& /*x*/) const {
    throw CapabilityError(kind() + ": energy not implemented");
  }
  virtual Tensor score_impl(const Tensor& /*x*/) const {
    throw CapabilityError(kind() + ": score not implemented");
  }

  void require(Cap c, const char* what) const {
    if (!has(c))
      throw CapabilityError(kind() + ": capability '" + what + "' not available");
  }

  void check_points(const Tensor& x, const char* what) const {
    if (x.cols() != dim_)
      throw std::invalid_argument(kind() + "::" + what + ": expected dim " +
                                  std::to_string(dim_) + ", got " + std::to_string(x.cols()));
    if (!x.all_finite())
      throw std::runtime_error(kind() + "::" + what + ": non-finite input point");
  }

  long dim_;
  unsigned caps_;
  double shift_;
};

using TargetPtr = std::shared_ptr<const Target>;

/// Isotropic Gaussian N(mean, sigma^2 I).
TargetPtr make_gauss(Tensor mean, double sigma, double energy_shift = 0.0);

/// Axis-aligned Gaussian N(mean, diag(sigmas^2)).
TargetPtr make_diag_gauss(Tensor mean, Tensor sigmas, double energy_shift = 0.0);

/// Mixture of isotropic Gaussians; means: [n_comp, d], sigmas/weights: [n_comp].
/// Weights are normalised at construction.
TargetPtr make_gmm(Tensor means, Tensor sigmas, Tensor weights, double energy_shift = 0.0);

/// n_comp equally weighted components of width sigma spaced evenly on a circle
/// of the given radius (the 2-D mixture benchmark layout).
TargetPtr make_gmm_ring(long n_comp, double radius, double sigma, double energy_shift = 0.0);

/// Sample-only two-moons dataset, scaled by 2 and centred at the origin, with
/// isotropic Gaussian jitter of the given width.
TargetPtr make_two_moons(double noise);

}  // namespace sbridge::targets
