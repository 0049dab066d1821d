#include "sbridge/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace sbridge::nn {

void MlpConfig::validate() const {
  if (input_dim <= 0 || output_dim <= 0)
    throw std::invalid_argument("MlpConfig: input_dim and output_dim must be positive");
  if (hidden_dim <= 0) throw std::invalid_argument("MlpConfig: hidden_dim must be positive");
  if (n_hidden < 0) throw std::invalid_argument("MlpConfig: n_hidden must be >= 0");
}

Mlp::Mlp(MlpConfig cfg, Rng& rng, const std::string& scope) : cfg_(cfg) {
  cfg_.validate();
  long fan_in = cfg_.input_dim;
  for (long l = 0; l < cfg_.n_hidden; ++l) {
    const std::string prefix = scope + ".h" + std::to_string(l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor W({cfg_.hidden_dim, fan_in});
    Tensor b({cfg_.hidden_dim});
    rng.fill_uniform(W.vec(), -bound, bound);
    rng.fill_uniform(b.vec(), -bound, bound);
    params_.push_back(ag::param(std::move(W), prefix + ".W"));
    params_.push_back(ag::param(std::move(b), prefix + ".b"));
    if (cfg_.layernorm) {
      params_.push_back(ag::param(Tensor::full({cfg_.hidden_dim}, 1.0), prefix + ".ln_gain"));
      params_.push_back(ag::param(Tensor::zeros({cfg_.hidden_dim}), prefix + ".ln_bias"));
    }
    fan_in = cfg_.hidden_dim;
  }
  // Zero head: a freshly built net is the zero function, so an untrained
  // policy falls back exactly onto its reference process.
  params_.push_back(ag::param(Tensor::zeros({cfg_.output_dim, fan_in}), scope + ".out.W"));
  params_.push_back(ag::param(Tensor::zeros({cfg_.output_dim}), scope + ".out.b"));
}

ag::Var Mlp::forward(const ag::Var& x) const {
  if (params_.empty()) throw std::logic_error("Mlp::forward: uninitialised net");
  if (x->val.cols() != cfg_.input_dim)
    throw std::invalid_argument("Mlp::forward: expected " + std::to_string(cfg_.input_dim) +
                                " input columns, got " + std::to_string(x->val.cols()));
  const long stride = cfg_.layernorm ? 4 : 2;
  ag::Var h = x;
  for (long l = 0; l < cfg_.n_hidden; ++l) {
    const ag::Var* p = &params_[static_cast<std::size_t>(l * stride)];
    h = ag::linear(h, p[0], p[1]);
    if (cfg_.layernorm) h = ag::layer_norm(h, p[2], p[3]);
    h = ag::silu(h);
  }
  const std::size_t head = params_.size() - 2;
  return ag::linear(h, params_[head], params_[head + 1]);
}

Tensor Mlp::forward_eager(const Tensor& x) const {
  if (params_.empty()) throw std::logic_error("Mlp::forward_eager: uninitialised net");
  if (x.cols() != cfg_.input_dim)
    throw std::invalid_argument("Mlp::forward_eager: expected " +
                                std::to_string(cfg_.input_dim) + " input columns, got " +
                                std::to_string(x.cols()));
  const long B = x.rows();
  const long stride = cfg_.layernorm ? 4 : 2;
  Tensor h = x;
  for (long l = 0; l < cfg_.n_hidden; ++l) {
    const ag::Var* p = &params_[static_cast<std::size_t>(l * stride)];
    const Tensor& W = p[0]->val;
    const Tensor& b = p[1]->val;
    Tensor z({B, W.rows()});
    z.mat().noalias() = h.mat() * W.mat().transpose();
    z.mat().rowwise() += ConstVecMap(b.data(), b.size()).transpose();
    if (cfg_.layernorm) {
      const Tensor& gain = p[2]->val;
      const Tensor& bias = p[3]->val;
      const long D = z.cols();
      Tensor zn({B, D});
      MatMap znm = zn.mat();
      ConstMatMap zm = z.cmat();
      for (long r = 0; r < B; ++r) {
        // Mirrors the taped layer_norm's scalar accumulation exactly so the
        // two paths stay bitwise interchangeable.
        const double* row = z.row_ptr(r);
        double mu = 0.0;
        for (long c = 0; c < D; ++c) mu += row[c];
        mu /= static_cast<double>(D);
        double var = 0.0;
        for (long c = 0; c < D; ++c) {
          const double d = row[c] - mu;
          var += d * d;
        }
        var /= static_cast<double>(D);
        const double is = 1.0 / std::sqrt(var + ag::kLayerNormEps);
        znm.row(r) = (zm.row(r).array() - mu) * is;
      }
      zn.mat().array().rowwise() *= ConstArrMap(gain.data(), D).transpose();
      zn.mat().rowwise() += ConstVecMap(bias.data(), D).transpose();
      z = std::move(zn);
    }
    Tensor sig(z.shape());
    sig.arr() = 1.0 / (1.0 + (-z.arr()).exp());
    Tensor act(z.shape());
    act.arr() = z.arr() * sig.arr();
    h = std::move(act);
  }
  const std::size_t head = params_.size() - 2;
  const Tensor& W = params_[head]->val;
  const Tensor& b = params_[head + 1]->val;
  Tensor out({B, W.rows()});
  out.mat().noalias() = h.mat() * W.mat().transpose();
  out.mat().rowwise() += ConstVecMap(b.data(), b.size()).transpose();
  return out;
}

void Mlp::load_values(const std::vector<std::pair<std::string, Tensor>>& values) {
  if (values.size() != params_.size())
    throw std::invalid_argument("Mlp::load_values: expected " + std::to_string(params_.size()) +
                                " tensors, got " + std::to_string(values.size()));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (values[i].second.shape() != params_[i]->val.shape())
      throw std::invalid_argument("Mlp::load_values: shape mismatch for " + params_[i]->name +
                                  ": have " + Tensor::shape_str(params_[i]->val.shape()) +
                                  ", loading " + Tensor::shape_str(values[i].second.shape()));
    params_[i]->val = values[i].second;
  }
}

void AdamW::step(std::span<ag::Var> params) {
  if (m_.empty()) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const ag::Var& p : params) {
      m_.push_back(Tensor::zeros(p->val.shape()));
      v_.push_back(Tensor::zeros(p->val.shape()));
    }
  }
  if (m_.size() != params.size())
    throw std::invalid_argument("AdamW::step: parameter count changed under the optimiser");

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

  for (std::size_t i = 0; i < params.size(); ++i) {
    ag::Var& p = params[i];
    if (p->grad.size() == 0) p->grad = Tensor::zeros(p->val.shape());
    if (!p->grad.all_finite())
      throw std::runtime_error("AdamW::step: non-finite gradient in parameter '" + p->name +
                               "'");
    ArrMap m = m_[i].arr();
    ArrMap v = v_[i].arr();
    ConstArrMap g(p->grad.data(), p->grad.size());
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.square();
    ArrMap w = p->val.arr();
    w *= (1.0 - cfg_.lr * cfg_.weight_decay);
    w -= cfg_.lr * (m / bc1) / ((v / bc2).sqrt() + cfg_.eps);
  }
}

void AdamW::reset_moments() {
  m_.clear();
  v_.clear();
  t_ = 0;
}

double clip_grad_norm(std::span<ag::Var> params, double max_norm) {
  if (max_norm <= 0.0) throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (const ag::Var& p : params) {
    if (p->grad.size() == 0) continue;
    sq += p->grad.arr().square().sum();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (const ag::Var& p : params) {
      if (p->grad.size() == 0) continue;
      p->grad.arr() *= s;
    }
  }
  return norm;
}

}  // namespace sbridge::nn
