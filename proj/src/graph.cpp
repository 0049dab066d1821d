#include "sbridge/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace sbridge::ag {

namespace {

Var make_node(Tensor val, std::vector<Var> parents, std::function<void(Node&)> backfn) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->parents = std::move(parents);
  for (const Var& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backfn = std::move(backfn);
  return n;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->val.same_shape(b->val))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                Tensor::shape_str(a->val.shape()) + " vs " +
                                Tensor::shape_str(b->val.shape()));
}

}  // namespace

Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  return n;
}

Var param(Tensor v, std::string name) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->requires_grad = true;
  n->name = std::move(name);
  return n;
}

Var linear(const Var& x, const Var& W, const Var& b) {
  const long B = x->val.rows(), I = x->val.cols();
  const long O = W->val.rows();
  if (W->val.cols() != I)
    throw std::invalid_argument("linear: weight expects " + std::to_string(W->val.cols()) +
                                " inputs, got " + std::to_string(I));
  if (b->val.size() != O) throw std::invalid_argument("linear: bias size mismatch");

  Tensor out({B, O});
  out.mat().noalias() = x->val.mat() * W->val.mat().transpose();
  out.mat().rowwise() += ConstVecMap(b->val.data(), O).transpose();

  Var xx = x, Ww = W, bb = b;
  return make_node(std::move(out), {x, W, b}, [xx, Ww, bb, B, I, O](Node& self) {
    ConstMatMap g(self.grad.data(), B, O);
    if (xx->requires_grad) xx->grad_ref().mat().noalias() += g * Ww->val.mat();
    if (Ww->requires_grad) Ww->grad_ref().mat().noalias() += g.transpose() * xx->val.mat();
    if (bb->requires_grad) {
      // Scalar accumulation in index order: reductions must not depend on the
      // alignment of tape buffers, or rebuilding the same graph could shift
      // gradients by an ulp. (Matrix products pack their operands and are
      // already alignment-independent.)
      Tensor& gb = bb->grad_ref();
      for (long r = 0; r < B; ++r) {
        const double* grow = self.grad.row_ptr(r);
        for (long j = 0; j < O; ++j) gb[j] += grow[j];
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias) {
  const long B = x->val.rows(), D = x->val.cols();
  if (gain->val.size() != D || bias->val.size() != D)
    throw std::invalid_argument("layer_norm: affine size mismatch");

  Tensor xhat({B, D});
  Tensor inv_std({B});
  Tensor out({B, D});
  {
    ConstMatMap xm = x->val.cmat();
    MatMap xh = xhat.mat();
    for (long r = 0; r < B; ++r) {
      // Scalar accumulation in index order: keeps the statistics independent
      // of buffer alignment so the eager twin reproduces them bitwise.
      const double* row = x->val.row_ptr(r);
      double mu = 0.0;
      for (long c = 0; c < D; ++c) mu += row[c];
      mu /= static_cast<double>(D);
      double var = 0.0;
      for (long c = 0; c < D; ++c) {
        const double d = row[c] - mu;
        var += d * d;
      }
      var /= static_cast<double>(D);
      const double is = 1.0 / std::sqrt(var + kLayerNormEps);
      inv_std[r] = is;
      xh.row(r) = (xm.row(r).array() - mu) * is;
    }
    out.mat() = xh.array().rowwise() * ConstArrMap(gain->val.data(), D).transpose();
    out.mat().rowwise() += ConstVecMap(bias->val.data(), D).transpose();
  }

  Var xx = x, gg = gain, bb = bias;
  Tensor xh_keep = xhat, is_keep = inv_std;
  return make_node(std::move(out), {x, gain, bias},
                   [xx, gg, bb, xh_keep, is_keep, B, D](Node& self) {
                     // All reductions as scalar loops in index order, for the
                     // same alignment-independence reason as the forward pass.
                     if (gg->requires_grad) {
                       Tensor& gG = gg->grad_ref();
                       for (long r = 0; r < B; ++r) {
                         const double* grow = self.grad.row_ptr(r);
                         const double* xrow = xh_keep.row_ptr(r);
                         for (long c = 0; c < D; ++c) gG[c] += grow[c] * xrow[c];
                       }
                     }
                     if (bb->requires_grad) {
                       Tensor& gB = bb->grad_ref();
                       for (long r = 0; r < B; ++r) {
                         const double* grow = self.grad.row_ptr(r);
                         for (long c = 0; c < D; ++c) gB[c] += grow[c];
                       }
                     }
                     if (xx->requires_grad) {
                       Tensor& gX = xx->grad_ref();
                       const double* gv = gg->val.data();
                       for (long r = 0; r < B; ++r) {
                         const double* grow = self.grad.row_ptr(r);
                         const double* xrow = xh_keep.row_ptr(r);
                         double m1 = 0.0, m2 = 0.0;
                         for (long c = 0; c < D; ++c) {
                           const double gh = grow[c] * gv[c];
                           m1 += gh;
                           m2 += gh * xrow[c];
                         }
                         m1 /= static_cast<double>(D);
                         m2 /= static_cast<double>(D);
                         double* orow = gX.row_ptr(r);
                         for (long c = 0; c < D; ++c)
                           orow[c] += is_keep[r] * (grow[c] * gv[c] - m1 - xrow[c] * m2);
                       }
                     }
                   });
}

Var silu(const Var& x) {
  Tensor sig(x->val.shape());
  sig.arr() = 1.0 / (1.0 + (-x->val.arr()).exp());
  Tensor out(x->val.shape());
  out.arr() = x->val.arr() * sig.arr();

  Var xx = x;
  Tensor sig_keep = sig;
  return make_node(std::move(out), {x}, [xx, sig_keep](Node& self) {
    if (!xx->requires_grad) return;
    ConstArrMap s(sig_keep.data(), sig_keep.size());
    xx->grad_ref().arr() += self.grad.arr() * s * (1.0 + xx->val.arr() * (1.0 - s));
  });
}

Var concat_cols(const Var& a, const Var& b) {
  const long B = a->val.rows();
  if (b->val.rows() != B) throw std::invalid_argument("concat_cols: row count mismatch");
  const long Ca = a->val.cols(), Cb = b->val.cols();
  Tensor out({B, Ca + Cb});
  out.mat().leftCols(Ca) = a->val.mat();
  out.mat().rightCols(Cb) = b->val.mat();

  Var aa = a, bb = b;
  return make_node(std::move(out), {a, b}, [aa, bb, B, Ca, Cb](Node& self) {
    ConstMatMap g(self.grad.data(), B, Ca + Cb);
    if (aa->requires_grad) aa->grad_ref().mat() += g.leftCols(Ca);
    if (bb->requires_grad) bb->grad_ref().mat() += g.rightCols(Cb);
  });
}

Var slice_cols(const Var& x, long c0, long c1) {
  const long B = x->val.rows(), C = x->val.cols();
  if (c0 < 0 || c1 > C || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") for width " + std::to_string(C));
  Tensor out({B, c1 - c0});
  out.mat() = x->val.mat().middleCols(c0, c1 - c0);

  Var xx = x;
  return make_node(std::move(out), {x}, [xx, B, C, c0, c1](Node& self) {
    if (!xx->requires_grad) return;
    xx->grad_ref().mat().middleCols(c0, c1 - c0) += ConstMatMap(self.grad.data(), B, c1 - c0);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a->val.shape());
  out.arr() = a->val.arr() + b->val.arr();
  Var aa = a, bb = b;
  return make_node(std::move(out), {a, b}, [aa, bb](Node& self) {
    if (aa->requires_grad) aa->grad_ref().arr() += self.grad.arr();
    if (bb->requires_grad) bb->grad_ref().arr() += self.grad.arr();
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a->val.shape());
  out.arr() = a->val.arr() - b->val.arr();
  Var aa = a, bb = b;
  return make_node(std::move(out), {a, b}, [aa, bb](Node& self) {
    if (aa->requires_grad) aa->grad_ref().arr() += self.grad.arr();
    if (bb->requires_grad) bb->grad_ref().arr() -= self.grad.arr();
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a->val.shape());
  out.arr() = a->val.arr() * b->val.arr();
  Var aa = a, bb = b;
  return make_node(std::move(out), {a, b}, [aa, bb](Node& self) {
    if (aa->requires_grad) aa->grad_ref().arr() += self.grad.arr() * bb->val.arr();
    if (bb->requires_grad) bb->grad_ref().arr() += self.grad.arr() * aa->val.arr();
  });
}

Var scale(const Var& x, double s) {
  Tensor out(x->val.shape());
  out.arr() = x->val.arr() * s;
  Var xx = x;
  return make_node(std::move(out), {x}, [xx, s](Node& self) {
    if (xx->requires_grad) xx->grad_ref().arr() += self.grad.arr() * s;
  });
}

Var add_scalar(const Var& x, double s) {
  Tensor out(x->val.shape());
  out.arr() = x->val.arr() + s;
  Var xx = x;
  return make_node(std::move(out), {x}, [xx](Node& self) {
    if (xx->requires_grad) xx->grad_ref().arr() += self.grad.arr();
  });
}

Var exp_(const Var& x) {
  Tensor out(x->val.shape());
  out.arr() = x->val.arr().exp();
  Var xx = x;
  Tensor out_keep = out;
  return make_node(std::move(out), {x}, [xx, out_keep](Node& self) {
    if (xx->requires_grad)
      xx->grad_ref().arr() += self.grad.arr() * ConstArrMap(out_keep.data(), out_keep.size());
  });
}

Var clamp(const Var& x, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be < hi");
  Tensor out(x->val.shape());
  out.arr() = x->val.arr().max(lo).min(hi);
  Var xx = x;
  return make_node(std::move(out), {x}, [xx, lo, hi](Node& self) {
    if (!xx->requires_grad) return;
    ArrMap g = xx->grad_ref().arr();
    ConstArrMap v(xx->val.data(), xx->val.size());
    g += self.grad.arr() * ((v > lo) && (v < hi)).cast<double>();
  });
}

namespace {

// Index-order sum, independent of buffer alignment (see layer_norm).
double scalar_sum(const Tensor& t) {
  double acc = 0.0;
  const double* p = t.data();
  for (long i = 0; i < t.size(); ++i) acc += p[i];
  return acc;
}

}  // namespace

Var sum_all(const Var& x) {
  Tensor out = Tensor::scalar(scalar_sum(x->val));
  Var xx = x;
  return make_node(std::move(out), {x}, [xx](Node& self) {
    if (xx->requires_grad) xx->grad_ref().arr() += self.grad[0];
  });
}

Var mean_all(const Var& x) {
  const long n = x->val.size();
  if (n == 0) throw std::invalid_argument("mean_all: empty input");
  Tensor out = Tensor::scalar(scalar_sum(x->val) / static_cast<double>(n));
  Var xx = x;
  return make_node(std::move(out), {x}, [xx, n](Node& self) {
    if (xx->requires_grad) xx->grad_ref().arr() += self.grad[0] / static_cast<double>(n);
  });
}

Var gauss_logpdf_rowsum(const Tensor& y, const Var& mean, const Var& logvar) {
  if (!y.same_shape(mean->val) || !y.same_shape(logvar->val))
    throw std::invalid_argument("gauss_logpdf_rowsum: shape mismatch");
  const long B = y.rows(), D = y.cols();

  Tensor diff(y.shape());
  diff.arr() = ConstArrMap(y.data(), y.size()) - mean->val.arr();
  Tensor inv_var(y.shape());
  inv_var.arr() = (-logvar->val.arr()).exp();

  Tensor out({B});
  for (long r = 0; r < B; ++r) {
    const double* dr = diff.row_ptr(r);
    const double* ir = inv_var.row_ptr(r);
    const double* lr = logvar->val.row_ptr(r);
    // Index-order accumulation keeps the row statistic alignment-independent.
    double acc = 0.0;
    for (long c = 0; c < D; ++c) acc += lr[c] + dr[c] * dr[c] * ir[c];
    out[r] = -0.5 * (static_cast<double>(D) * kLog2Pi + acc);
  }

  Var mm = mean, vv = logvar;
  Tensor diff_keep = diff, iv_keep = inv_var;
  return make_node(std::move(out), {mean, logvar},
                   [mm, vv, diff_keep, iv_keep, B, D](Node& self) {
                     ConstMatMap dm(diff_keep.data(), B, D);
                     ConstMatMap iv(iv_keep.data(), B, D);
                     ConstVecMap g(self.grad.data(), B);
                     if (mm->requires_grad) {
                       MatMap gm = mm->grad_ref().mat();
                       gm.array() += (dm.array() * iv.array()).colwise() * g.array();
                     }
                     if (vv->requires_grad) {
                       MatMap gv = vv->grad_ref().mat();
                       gv.array() += (0.5 * (dm.array().square() * iv.array() - 1.0)).colwise() *
                                     g.array();
                     }
                   });
}

Var group_variance(const Var& s, long n_groups, long group_size) {
  if (group_size < 2) throw std::invalid_argument("group_variance: group_size must be >= 2");
  if (s->val.size() != n_groups * group_size)
    throw std::invalid_argument("group_variance: expected " +
                                std::to_string(n_groups * group_size) + " stats, got " +
                                std::to_string(s->val.size()));

  Tensor centered(s->val.shape());
  double total = 0.0;
  {
    const double* sv = s->val.data();
    double* cv = centered.data();
    for (long g = 0; g < n_groups; ++g) {
      const double* row = sv + g * group_size;
      double mu = 0.0;
      for (long i = 0; i < group_size; ++i) mu += row[i];
      mu /= static_cast<double>(group_size);
      double ss = 0.0;
      for (long i = 0; i < group_size; ++i) {
        const double d = row[i] - mu;
        cv[g * group_size + i] = d;
        ss += d * d;
      }
      total += ss / static_cast<double>(group_size - 1);
    }
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n_groups));

  Var ss = s;
  Tensor c_keep = centered;
  return make_node(std::move(out), {s}, [ss, c_keep, n_groups, group_size](Node& self) {
    if (!ss->requires_grad) return;
    const double w =
        2.0 / (static_cast<double>(n_groups) * static_cast<double>(group_size - 1));
    ss->grad_ref().arr() +=
        (self.grad[0] * w) * ConstArrMap(c_keep.data(), c_keep.size());
  });
}

void backward(const Var& loss) {
  if (!loss) throw std::invalid_argument("backward: null loss");
  if (!loss->val.is_scalar())
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                Tensor::shape_str(loss->val.shape()));
  if (!loss->requires_grad) return;

  // Iterative post-order DFS; order is fully determined by the graph
  // structure, so repeated runs accumulate identically.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss->grad_ref()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backfn && n->grad.size() != 0) n->backfn(*n);
  }
}

void zero_grad(std::span<const Var> params) {
  for (const Var& p : params)
    if (p->grad.size() != 0) p->grad.fill(0.0);
}

}  // namespace sbridge::ag
