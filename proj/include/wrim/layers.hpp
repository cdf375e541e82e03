#pragma once

#include "wrim/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace wrim {

/// A learnable tensor with its gradient accumulator. Buffers (batch-norm
/// running statistics) and frozen tensors share the type but are skipped by
/// the optimizer and by trainable-parameter accounting.
template <typename Scalar>
struct Parameter {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool trainable = true;
  bool buffer = false;

  Parameter() = default;
  explicit Parameter(Shape shape, bool train = true, bool is_buffer = false)
      : value(shape), grad(shape), trainable(train), buffer(is_buffer) {}
};

template <typename Scalar>
struct NamedParameter {
  std::string name;
  Parameter<Scalar>* param;
};

template <typename Scalar>
using ParameterList = std::vector<NamedParameter<Scalar>>;

/// One row of a complexity report. Shapes are per single image.
struct LayerCost {
  std::string name;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t elementwise = 0;
};
using CostTable = std::vector<LayerCost>;

using Rng = std::mt19937_64;

template <typename Scalar>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(Index in_channels, Index out_channels, Index kernel, Index stride, Index pad, bool with_bias, Rng& rng);

  Tensor<Scalar> forward(const Tensor<Scalar>& x);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);

  void collect(const std::string& prefix, ParameterList<Scalar>& out);
  /// Appends a cost row; `chw` is updated to the output shape.
  void cost(const std::string& name, Shape& chw, CostTable& rows) const;

  Index out_size(Index in) const { return (in + 2 * pad_ - kernel_) / stride_ + 1; }
  Index in_channels() const { return in_; }
  Index out_channels() const { return out_; }

  Parameter<Scalar> weight;  // [out, in * k * k]
  Parameter<Scalar> bias;    // [out], empty when bias-free

 private:
  void im2col(const Scalar* img, Index h, Index w, RowMatrix<Scalar>& col) const;
  void col2im(const RowMatrix<Scalar>& col, Index h, Index w, Scalar* img) const;

  Index in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, pad_ = 0;
  bool has_bias_ = false;
  Tensor<Scalar> input_;
};

/// Batch normalization over axis 1 of [N, C, ...] inputs.
template <typename Scalar>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(Index channels, bool shift_trainable = true, Scalar momentum = Scalar(0.1),
                     Scalar eps = Scalar(1e-5));

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);

  void collect(const std::string& prefix, ParameterList<Scalar>& out);
  void cost(const std::string& name, const Shape& chw, CostTable& rows) const;
  Index channels() const { return channels_; }

  Parameter<Scalar> weight;
  Parameter<Scalar> bias;
  Parameter<Scalar> running_mean;
  Parameter<Scalar> running_var;

 private:
  Index channels_ = 0;
  Scalar momentum_ = Scalar(0.1);
  Scalar eps_ = Scalar(1e-5);
  Mode mode_ = Mode::kEval;
  Tensor<Scalar> xhat_;
  Vector<Scalar> inv_std_;
};

/// Affine map over the last axis.
template <typename Scalar>
class Linear {
 public:
  Linear() = default;
  Linear(Index in_features, Index out_features, bool with_bias, Rng& rng);

  Tensor<Scalar> forward(const Tensor<Scalar>& x);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);

  void collect(const std::string& prefix, ParameterList<Scalar>& out);
  /// Cost of applying the map to `rows` vectors.
  void cost(const std::string& name, Index rows, CostTable& out) const;

  Index in_features() const { return in_; }
  Index out_features() const { return out_; }

  Parameter<Scalar> weight;  // [out, in]
  Parameter<Scalar> bias;    // [out]

 private:
  Index in_ = 0, out_ = 0;
  bool has_bias_ = false;
  Tensor<Scalar> input_;
};

template <typename Scalar>
class ReLU {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) const;

 private:
  Tensor<Scalar> output_;
};

/// 3x3 stride-2 pad-1 max pooling of the ResNet stem.
template <typename Scalar>
class MaxPool2d {
 public:
  MaxPool2d() = default;
  MaxPool2d(Index kernel, Index stride, Index pad) : kernel_(kernel), stride_(stride), pad_(pad) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) const;
  Index out_size(Index in) const { return (in + 2 * pad_ - kernel_) / stride_ + 1; }

 private:
  Index kernel_ = 3, stride_ = 2, pad_ = 1;
  Shape in_shape_;
  std::vector<Index> argmax_;
};

/// Non-overlapping window mean (kernel = stride); trailing rows/columns that
/// do not fill a window are dropped.
template <typename Scalar>
Tensor<Scalar> avg_pool_forward(const Tensor<Scalar>& x, Index window);
template <typename Scalar>
Tensor<Scalar> avg_pool_backward(const Tensor<Scalar>& grad_out, const Shape& in_shape, Index window);

/// Nearest-neighbour upsampling by an integer factor.
template <typename Scalar>
Tensor<Scalar> upsample_nearest(const Tensor<Scalar>& x, Index factor);
template <typename Scalar>
Tensor<Scalar> upsample_nearest_backward(const Tensor<Scalar>& grad_out, Index factor);

/// He-normal initialisation with fan_out, as used for ResNet convolutions.
template <typename Scalar>
void kaiming_normal(Tensor<Scalar>& t, Index fan, Rng& rng);

}  // namespace wrim
