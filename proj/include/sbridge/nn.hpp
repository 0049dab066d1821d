#pragma once

#include "sbridge/graph.hpp"
#include "sbridge/rng.hpp"
#include "sbridge/tensor.hpp"

#include <span>
#include <string>
#include <vector>

namespace sbridge::nn {

struct MlpConfig {
  long input_dim = 0;
  long output_dim = 0;
  long hidden_dim = 64;
  long n_hidden = 3;
  bool layernorm = true;  // LayerNorm after every hidden linear, before SiLU

  void validate() const;
};

/// Fully connected net: n_hidden blocks of (linear -> LayerNorm -> SiLU)
/// followed by a linear head. The head is zero-initialised so a fresh net is
/// exactly the zero function; hidden layers draw uniform(+-1/sqrt(fan_in)).
class Mlp {
 public:
  Mlp() = default;
  Mlp(MlpConfig cfg, Rng& rng, const std::string& scope = "net");

  /// Taped forward pass, x: [B, input_dim] -> [B, output_dim].
  ag::Var forward(const ag::Var& x) const;

  /// Tape-free forward pass; matches forward() bitwise.
  Tensor forward_eager(const Tensor& x) const;

  std::span<const ag::Var> params() const { return params_; }
  std::span<ag::Var> params() { return params_; }
  const MlpConfig& config() const { return cfg_; }

  /// Overwrite parameter values from a flat (name, tensor) list in parameter
  /// order. Shapes must match the architecture exactly.
  void load_values(const std::vector<std::pair<std::string, Tensor>>& values);

 private:
  MlpConfig cfg_;
  std::vector<ag::Var> params_;  // per block: W, b[, ln_gain, ln_bias]; then head W, b
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// Decoupled weight decay Adam. step() consumes the .grad fields of the
/// supplied parameters; call ag::zero_grad afterwards.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  void step(std::span<ag::Var> params);

  /// Drop first/second moments and the step counter (fresh optimiser state
  /// at half-bridge boundaries).
  void reset_moments();

  long step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

/// Scale all gradients so their joint L2 norm is at most max_norm.
/// Returns the pre-clip norm.
double clip_grad_norm(std::span<ag::Var> params, double max_norm);

}  // namespace sbridge::nn
