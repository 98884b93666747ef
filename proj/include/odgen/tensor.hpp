#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <numeric>
#include <vector>

#include "odgen/common.hpp"

namespace odgen::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Every buffer gets Eigen's maximum SIMD alignment.  Vectorized reductions
// split their scalar prologue at an address-dependent boundary, so mixed
// alignments would make sums depend on where malloc happened to place the
// data; fixing the alignment makes every computation bit-reproducible.
using AlignedStore = std::vector<double, Eigen::aligned_allocator<double>>;

// Dense row-major double tensor with shared storage.  Copies are shallow
// (views); use clone() for a deep copy.  Kept deliberately small: the
// autodiff layer above it only ever needs contiguous storage, reshape and
// flat/matrix views.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> dims) : dims_(std::move(dims)) {
    size_ = 1;
    for (int d : dims_) {
      if (d <= 0) throw OdError::dimension("tensor dims must be positive");
      size_ *= d;
    }
    store_ = std::make_shared<AlignedStore>(static_cast<size_t>(size_), 0.0);
  }

  static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }
  static Tensor full(std::vector<int> dims, double v) {
    Tensor t(std::move(dims));
    std::fill(t.data(), t.data() + t.size(), v);
    return t;
  }
  static Tensor scalar(double v) { return full({1}, v); }
  static Tensor randn(std::vector<int> dims, RandomStream& rs) {
    Tensor t(std::move(dims));
    for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = rs.normal();
    return t;
  }
  static Tensor from_matrix(const Eigen::MatrixXd& m) {
    Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
    t.matrix() = m;
    return t;
  }

  bool empty() const { return size_ == 0; }
  int64_t size() const { return size_; }
  const std::vector<int>& dims() const { return dims_; }
  int ndim() const { return static_cast<int>(dims_.size()); }
  int dim(int i) const { return dims_.at(static_cast<size_t>(i)); }

  double* data() { return store_->data(); }
  const double* data() const { return store_->data(); }

  bool same_dims(const Tensor& o) const { return dims_ == o.dims_; }

  Tensor clone() const {
    Tensor t(dims_);
    std::copy(data(), data() + size_, t.data());
    return t;
  }

  // view with identical storage, new shape (element count must match)
  Tensor reshaped(std::vector<int> dims) const {
    Tensor t;
    t.dims_ = std::move(dims);
    t.size_ = 1;
    for (int d : t.dims_) t.size_ *= d;
    if (t.size_ != size_) throw OdError::dimension("reshape: element count mismatch");
    t.store_ = store_;
    return t;
  }

  Eigen::Map<Eigen::ArrayXd> flat() { return {data(), size_}; }
  Eigen::Map<const Eigen::ArrayXd> flat() const { return {data(), size_}; }

  // 2-D matrix view; requires ndim()==2
  Eigen::Map<RowMat> matrix() {
    require_2d();
    return {data(), dim(0), dim(1)};
  }
  Eigen::Map<const RowMat> matrix() const {
    require_2d();
    return {data(), dim(0), dim(1)};
  }
  Eigen::MatrixXd to_matrix() const { return matrix(); }

  // flat index helpers for 3-D [C,H,W] access
  double& at3(int c, int h, int w) {
    return data()[(static_cast<int64_t>(c) * dim(1) + h) * dim(2) + w];
  }
  double at3(int c, int h, int w) const {
    return data()[(static_cast<int64_t>(c) * dim(1) + h) * dim(2) + w];
  }

 private:
  void require_2d() const {
    if (dims_.size() != 2) throw OdError::dimension("matrix view needs a 2-D tensor");
  }

  std::vector<int> dims_;
  std::shared_ptr<AlignedStore> store_;
  int64_t size_ = 0;
};

}  // namespace odgen::nn
