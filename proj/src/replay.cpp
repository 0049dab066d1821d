#include "sbridge/replay.hpp"

#include <cmath>
#include <numeric>

namespace sbridge::offpolicy {

ReplayBuffer::ReplayBuffer(long capacity, long dim)
    : capacity_(capacity), dim_(dim), store_({capacity, dim}) {
  if (capacity <= 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
  if (dim <= 0) throw std::invalid_argument("ReplayBuffer: dim must be positive");
}

void ReplayBuffer::push(const Tensor& batch) {
  if (batch.size() == 0) return;
  if (batch.cols() != dim_)
    throw std::invalid_argument("ReplayBuffer::push: dimension mismatch");
  for (long r = 0; r < batch.rows(); ++r) {
    bool finite = true;
    for (long j = 0; j < dim_; ++j)
      if (!std::isfinite(batch.at(r, j))) {
        finite = false;
        break;
      }
    if (!finite) {
      ++skipped_;
      continue;
    }
    double* dst = row(cursor_);
    for (long j = 0; j < dim_; ++j) dst[j] = batch.at(r, j);
    cursor_ = (cursor_ + 1) % capacity_;
    if (size_ < capacity_) ++size_;
  }
}

Tensor ReplayBuffer::sample(long n, Rng& rng) const {
  if (size_ == 0) throw std::logic_error("ReplayBuffer::sample: buffer is empty");
  if (n < 0) throw std::invalid_argument("ReplayBuffer::sample: negative count");
  Tensor out({n, dim_});
  for (long i = 0; i < n; ++i) {
    const double* src = row(rng.uniform_int(size_));
    for (long j = 0; j < dim_; ++j) out.at(i, j) = src[j];
  }
  return out;
}

ReplayBuffer ReplayBuffer::restore(long capacity, long dim, long size, long cursor, long skipped,
                                   const Tensor& store) {
  ReplayBuffer b(capacity, dim);
  if (size < 0 || size > capacity || cursor < 0 || cursor >= capacity)
    throw std::invalid_argument("ReplayBuffer::restore: inconsistent size/cursor");
  if (store.rows() < size || store.cols() != dim)
    throw std::invalid_argument("ReplayBuffer::restore: snapshot shape mismatch");
  for (long i = 0; i < size; ++i)
    for (long j = 0; j < dim; ++j) b.store_.at(i, j) = store.at(i, j);
  b.size_ = size;
  b.cursor_ = cursor;
  b.skipped_ = skipped;
  return b;
}

long ReplayBuffer::reinit_count(double fraction) const {
  if (fraction <= 0.0) return 0;
  const long want = static_cast<long>(std::llround(fraction * static_cast<double>(size_)));
  return std::min(want, size_);
}

void ReplayBuffer::reinit_slots(const Tensor& fresh, Rng& rng) {
  const long m = std::min(fresh.rows(), size_);
  if (m == 0) return;
  if (fresh.cols() != dim_)
    throw std::invalid_argument("ReplayBuffer::reinit_slots: dimension mismatch");
  // Partial Fisher-Yates over stored slots: m distinct positions.
  std::vector<long> idx(static_cast<std::size_t>(size_));
  std::iota(idx.begin(), idx.end(), 0L);
  for (long i = 0; i < m; ++i) {
    const long j = i + rng.uniform_int(size_ - i);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    double* dst = row(idx[static_cast<std::size_t>(i)]);
    bool finite = true;
    for (long c = 0; c < dim_; ++c)
      if (!std::isfinite(fresh.at(i, c))) {
        finite = false;
        break;
      }
    if (!finite) {
      ++skipped_;
      continue;
    }
    for (long c = 0; c < dim_; ++c) dst[c] = fresh.at(i, c);
  }
}

long langevin_refresh(ReplayBuffer& buffer, const targets::Target& target,
                      const LangevinPlan& plan, Rng& rng,
                      const std::function<Tensor(long)>& reinit_sampler) {
  if (!plan.enabled || plan.n_steps == 0 || buffer.empty()) return 0;
  constexpr double kDivergenceRadius = 1e6;

  const long n = buffer.size();
  const long d = buffer.dim();
  Tensor x({n, d});
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < d; ++j) x.at(i, j) = buffer.row(i)[j];

  long reinits = 0;
  for (long s = 0; s < plan.n_steps; ++s) {
    double eta = plan.step_size;
    if (plan.anneal_to && plan.n_steps > 1)
      eta += (*plan.anneal_to - plan.step_size) * static_cast<double>(s) /
             static_cast<double>(plan.n_steps - 1);
    const Tensor sc = target.score(x);
    const double noise_scale = std::sqrt(2.0 * eta);
    for (long i = 0; i < n; ++i) {
      double sq = 0.0;
      for (long j = 0; j < d; ++j) {
        double v = x.at(i, j) + eta * sc.at(i, j) + noise_scale * rng.normal();
        x.at(i, j) = v;
        sq += v * v;
      }
      if (!(sq <= kDivergenceRadius * kDivergenceRadius) || !std::isfinite(sq)) {
        const Tensor fresh = reinit_sampler(1);
        if (fresh.rows() != 1 || fresh.cols() != d)
          throw std::logic_error("langevin_refresh: reinit sampler returned wrong shape");
        for (long j = 0; j < d; ++j) x.at(i, j) = fresh.at(0, j);
        ++reinits;
      }
    }
  }

  for (long i = 0; i < n; ++i)
    for (long j = 0; j < d; ++j) buffer.row(i)[j] = x.at(i, j);
  return reinits;
}

GroupSource mix_policy_choice(const OffPolicyPlan& plan, long step, long total_steps, Rng& rng) {
  const double r = plan.current_ratio(step, total_steps);
  if (r <= 0.0) return GroupSource::kOnPolicy;
  if (r >= 1.0) return GroupSource::kOffPolicy;
  return rng.bernoulli(r) ? GroupSource::kOffPolicy : GroupSource::kOnPolicy;
}

namespace {

Tensor repeat_row(const Tensor& x, long row, long times) {
  Tensor out({times, x.cols()});
  for (long i = 0; i < times; ++i)
    for (long j = 0; j < x.cols(); ++j) out.at(i, j) = x.at(row, j);
  return out;
}

}  // namespace

dyn::TrajectoryBatch sample_group_offpolicy(const ReplayBuffer& buffer, const dyn::Policy& phi,
                                            const dyn::Policy& theta, long n_traj,
                                            bool reuse_backward, Rng& rng) {
  if (n_traj < 2) throw std::invalid_argument("sample_group_offpolicy: need N >= 2");
  if (buffer.empty())
    throw std::logic_error("sample_group_offpolicy: buffer is empty; caller must fall back");
  if (phi.direction() != dyn::Direction::kBackward ||
      theta.direction() != dyn::Direction::kForward)
    throw std::invalid_argument("sample_group_offpolicy: policy directions are swapped");

  const Tensor x1 = buffer.sample(1, rng);
  const dyn::TrajectoryBatch seed = rollout(phi, x1, rng);
  const long n_fwd = reuse_backward ? n_traj - 1 : n_traj;
  const Tensor starts = repeat_row(seed.x0(), 0, n_fwd);
  const dyn::TrajectoryBatch fwd = rollout(theta, starts, rng);

  std::vector<dyn::TrajectoryBatch> parts;
  if (reuse_backward) parts.push_back(seed.reversed());
  parts.push_back(fwd);
  return concat_groups(parts);
}

dyn::TrajectoryBatch sample_group_offpolicy_backward(const ReplayBuffer& buffer,
                                                     const dyn::Policy& theta,
                                                     const dyn::Policy& phi, long n_traj,
                                                     bool reuse_forward, Rng& rng) {
  if (n_traj < 2) throw std::invalid_argument("sample_group_offpolicy_backward: need N >= 2");
  if (buffer.empty())
    throw std::logic_error(
        "sample_group_offpolicy_backward: buffer is empty; caller must fall back");

  const Tensor x0 = buffer.sample(1, rng);
  const dyn::TrajectoryBatch seed = rollout(theta, x0, rng);
  const long n_bwd = reuse_forward ? n_traj - 1 : n_traj;
  const Tensor starts = repeat_row(seed.x1(), 0, n_bwd);
  const dyn::TrajectoryBatch bwd = rollout(phi, starts, rng);

  std::vector<dyn::TrajectoryBatch> parts;
  if (reuse_forward) parts.push_back(seed.reversed());
  parts.push_back(bwd);
  return concat_groups(parts);
}

dyn::TrajectoryBatch concat_groups(const std::vector<dyn::TrajectoryBatch>& groups) {
  if (groups.empty()) throw std::invalid_argument("concat_groups: nothing to concatenate");
  dyn::TrajectoryBatch out;
  out.grid = groups.front().grid;
  out.generated_by = groups.front().generated_by;
  out.dim = groups.front().dim;
  out.n = 0;
  for (const auto& g : groups) {
    if (!(g.grid == out.grid) || g.dim != out.dim)
      throw std::invalid_argument("concat_groups: mismatched grids");
    out.n += g.n;
  }
  const long K = out.grid.n_steps;
  out.states.resize(static_cast<std::size_t>(K + 1));
  for (long k = 0; k <= K; ++k) {
    Tensor s({out.n, out.dim});
    long r0 = 0;
    for (const auto& g : groups) {
      s.mat().middleRows(r0, g.n) = g.states[static_cast<std::size_t>(k)].mat();
      r0 += g.n;
    }
    out.states[static_cast<std::size_t>(k)] = std::move(s);
  }
  return out;
}

}  // namespace sbridge::offpolicy
