#pragma once

#include "sbridge/tensor.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sbridge::ag {

/// Reverse-mode tape over Tensor values. Graphs are built eagerly by the op
/// helpers below and freed when the last Var handle drops; backward() walks
/// the tape once in reverse topological order.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor val;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backfn;
  std::string name;  // set for parameters, used in diagnostics

  Tensor& grad_ref() {
    if (grad.size() == 0) grad = Tensor::zeros(val.shape());
    return grad;
  }
};

/// Wrap a value that never needs a gradient (inputs, rolled-out states).
Var constant(Tensor v);

/// Wrap a trainable value.
Var param(Tensor v, std::string name = {});

// ---- ops ------------------------------------------------------------------

/// y = x W^T + b with x:[B,I], W:[O,I], b:[O] -> y:[B,O].
Var linear(const Var& x, const Var& W, const Var& b);

/// Per-row standardisation followed by elementwise affine. gain/bias: [D].
Var layer_norm(const Var& x, const Var& gain, const Var& bias);

/// x * sigmoid(x), elementwise.
Var silu(const Var& x);

/// [B,Ca],[B,Cb] -> [B,Ca+Cb].
Var concat_cols(const Var& a, const Var& b);

/// Columns [c0, c1) of a 2-D input.
Var slice_cols(const Var& x, long c0, long c1);

Var add(const Var& a, const Var& b);  // same shape
Var sub(const Var& a, const Var& b);  // same shape
Var mul(const Var& a, const Var& b);  // same shape, elementwise
Var scale(const Var& x, double s);
Var add_scalar(const Var& x, double s);
Var exp_(const Var& x);

/// Elementwise clamp; gradient is passed only strictly inside (lo, hi).
Var clamp(const Var& x, double lo, double hi);

Var sum_all(const Var& x);   // -> scalar
Var mean_all(const Var& x);  // -> scalar

/// Row sums of the diagonal-Gaussian log-density of fixed data y under
/// (mean, logvar): out[b] = sum_d log N(y[b,d]; mean[b,d], exp(logvar[b,d])).
/// Fused so the K-step trajectory losses stay cheap.
Var gauss_logpdf_rowsum(const Tensor& y, const Var& mean, const Var& logvar);

/// Mean over groups of the unbiased sample variance within each group.
/// s is flat [n_groups * group_size], laid out group-major. group_size >= 2.
Var group_variance(const Var& s, long n_groups, long group_size);

// ---- engine ---------------------------------------------------------------

/// Backpropagate from a scalar loss; accumulates into .grad of every
/// requires_grad node reachable through the tape.
void backward(const Var& loss);

void zero_grad(std::span<const Var> params);

inline constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)
inline constexpr double kLayerNormEps = 1e-8;

}  // namespace sbridge::ag
