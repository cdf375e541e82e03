#pragma once

#include "wrim/layers.hpp"

#include <array>

namespace wrim {

/// Bottleneck residual block (1x1 -> 3x3 -> 1x1, expansion 4), stride on the
/// 3x3 convolution.
template <typename Scalar>
class Bottleneck {
 public:
  static constexpr Index kExpansion = 4;

  Bottleneck() = default;
  Bottleneck(Index in_channels, Index width, Index stride, Rng& rng);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);

  void collect(const std::string& prefix, ParameterList<Scalar>& out);
  void cost(const std::string& prefix, Shape& chw, CostTable& rows) const;

  Index out_channels() const { return conv3.out_channels(); }

  Conv2d<Scalar> conv1, conv2, conv3, down_conv;
  BatchNorm<Scalar> bn1, bn2, bn3, down_bn;

 private:
  bool has_down_ = false;
  ReLU<Scalar> relu1_, relu2_, relu_out_;
};

/// ResNet-50 style trunk split into a stem and four stages so that modules
/// can be inserted between stages.
template <typename Scalar>
class ResNetTrunk {
 public:
  ResNetTrunk() = default;
  ResNetTrunk(const std::array<Index, 4>& blocks, Index base_width, Index last_stride, Rng& rng);

  Tensor<Scalar> stem_forward(const Tensor<Scalar>& images, Mode mode);
  Tensor<Scalar> stem_backward(const Tensor<Scalar>& grad_out);
  Tensor<Scalar> stage_forward(int stage, const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> stage_backward(int stage, const Tensor<Scalar>& grad_out);

  Index stage_channels(int stage) const { return stages_[static_cast<size_t>(stage)].back().out_channels(); }

  void collect(const std::string& prefix, ParameterList<Scalar>& out);
  void stem_cost(const std::string& prefix, Shape& chw, CostTable& rows) const;
  void stage_cost(int stage, const std::string& prefix, Shape& chw, CostTable& rows) const;

 private:
  Conv2d<Scalar> stem_conv_;
  BatchNorm<Scalar> stem_bn_;
  ReLU<Scalar> stem_relu_;
  MaxPool2d<Scalar> stem_pool_{3, 2, 1};
  std::array<std::vector<Bottleneck<Scalar>>, 4> stages_;
};

}  // namespace wrim
