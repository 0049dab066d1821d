#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace sbridge {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using ArrMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrMap = Eigen::Map<const Eigen::ArrayXd>;

/// Dense row-major float64 tensor. Rank 0 (scalar), 1, or 2 is all the
/// networks and losses need; shape is kept as a general list for
/// serialisation.
///
/// Storage is aligned to Eigen's preferred boundary so every buffer is
/// equally aligned: Eigen's vectorised kernels then split work at the same
/// element indices no matter where an allocation landed, which keeps results
/// bitwise reproducible across reallocations and runs.
class Tensor {
 public:
  using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

  Tensor() = default;

  explicit Tensor(std::vector<long> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(count(shape_)), 0.0);
  }

  Tensor(std::vector<long> shape, const std::vector<double>& data) : shape_(std::move(shape)) {
    if (count(shape_) != static_cast<long>(data.size()))
      throw std::invalid_argument("Tensor: shape/data size mismatch");
    data_.assign(data.begin(), data.end());
  }

  static Tensor zeros(std::vector<long> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<long> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }

  static Tensor row(std::initializer_list<double> vals) {
    Tensor t({1, static_cast<long>(vals.size())});
    std::copy(vals.begin(), vals.end(), t.data_.begin());
    return t;
  }

  const std::vector<long>& shape() const { return shape_; }
  long ndim() const { return static_cast<long>(shape_.size()); }
  long size() const { return static_cast<long>(data_.size()); }

  long rows() const { return ndim() == 2 ? shape_[0] : (ndim() == 1 ? shape_[0] : 1); }
  long cols() const { return ndim() == 2 ? shape_[1] : 1; }

  bool is_scalar() const { return data_.size() == 1; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  Storage& vec() { return data_; }
  const Storage& vec() const { return data_; }

  double& operator[](long i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](long i) const { return data_[static_cast<std::size_t>(i)]; }

  double& at(long r, long c) { return data_[static_cast<std::size_t>(r * cols() + c)]; }
  double at(long r, long c) const { return data_[static_cast<std::size_t>(r * cols() + c)]; }

  double* row_ptr(long r) { return data() + r * cols(); }
  const double* row_ptr(long r) const { return data() + r * cols(); }

  double value() const {
    if (!is_scalar()) throw std::invalid_argument("Tensor::value: not a scalar");
    return data_[0];
  }

  // 2D Eigen views (1D tensors map as a single row).
  MatMap mat() { return MatMap(data(), rows(), cols()); }
  ConstMatMap mat() const { return ConstMatMap(data(), rows(), cols()); }
  ArrMap arr() { return ArrMap(data(), size()); }
  ConstArrMap arr() const { return ConstArrMap(data(), size()); }

  // Read-only views that do not depend on the tensor's own constness (Eigen
  // maps of different constness are distinct, non-converting types).
  ConstMatMap cmat() const { return ConstMatMap(data(), rows(), cols()); }
  ConstArrMap carr() const { return ConstArrMap(data(), size()); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  static long count(const std::vector<long>& shape) {
    long n = 1;
    for (long s : shape) {
      if (s < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= s;
    }
    return n;
  }

  static std::string shape_str(const std::vector<long>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }

 private:
  std::vector<long> shape_;
  Storage data_;
};

}  // namespace sbridge
