#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace wrim {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

enum class Mode { kTrain, kEval };

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// Dense row-major n-dimensional array. Image batches use NCHW, token
/// sequences use [batch, length, channels].
template <typename Scalar>
class Tensor {
 public:
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(Vector<Scalar>::Constant(shape_size(shape_), fill)) {}
  Tensor(std::initializer_list<Index> shape, Scalar fill = Scalar(0))
      : Tensor(Shape(shape), fill) {}

  static Tensor from_matrix(const RowMatrix<Scalar>& m) {
    Tensor t({m.rows(), m.cols()});
    t.matrix() = m;
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<size_t>(i)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Vector<Scalar>& values() { return data_; }
  const Vector<Scalar>& values() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& at(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar at(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Whole tensor viewed as [dim0, rest].
  MatrixMap matrix() { return MatrixMap(data(), shape_[0], size() / shape_[0]); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data(), shape_[0], size() / shape_[0]); }

  /// Sample n of a batch viewed as [dim1, rest] (e.g. [C, H*W] for NCHW).
  MatrixMap sample(Index n) {
    const Index per = size() / shape_[0];
    return MatrixMap(data() + n * per, shape_[1], per / shape_[1]);
  }
  ConstMatrixMap sample(Index n) const {
    const Index per = size() / shape_[0];
    return ConstMatrixMap(data() + n * per, shape_[1], per / shape_[1]);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw std::invalid_argument("reshape " + shape_string(shape_) + " -> " + shape_string(shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  void set_zero() { data_.setZero(); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.values() = data_.template cast<Other>();
    return out;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_;
  Vector<Scalar> data_;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

/// Gathers samples (leading axis) by index.
template <typename Scalar>
Tensor<Scalar> gather_batch(const Tensor<Scalar>& x, const std::vector<Index>& idx) {
  Shape shape = x.shape();
  const Index per = x.size() / shape[0];
  shape[0] = static_cast<Index>(idx.size());
  Tensor<Scalar> out(shape);
  for (size_t i = 0; i < idx.size(); ++i) {
    out.values().segment(static_cast<Index>(i) * per, per) = x.values().segment(idx[i] * per, per);
  }
  return out;
}

/// Writes the samples of `part` into `dst` at the given leading-axis positions.
template <typename Scalar>
void scatter_batch(const Tensor<Scalar>& part, const std::vector<Index>& idx, Tensor<Scalar>& dst) {
  const Index per = dst.size() / dst.dim(0);
  for (size_t i = 0; i < idx.size(); ++i) {
    dst.values().segment(idx[i] * per, per) = part.values().segment(static_cast<Index>(i) * per, per);
  }
}

}  // namespace wrim
