#include "wrim/resnet.hpp"

namespace wrim {

template <typename Scalar>
Bottleneck<Scalar>::Bottleneck(Index in_channels, Index width, Index stride, Rng& rng)
    : conv1(in_channels, width, 1, 1, 0, false, rng),
      conv2(width, width, 3, stride, 1, false, rng),
      conv3(width, width * kExpansion, 1, 1, 0, false, rng),
      bn1(width),
      bn2(width),
      bn3(width * kExpansion),
      has_down_(stride != 1 || in_channels != width * kExpansion) {
  if (has_down_) {
    down_conv = Conv2d<Scalar>(in_channels, width * kExpansion, 1, stride, 0, false, rng);
    down_bn = BatchNorm<Scalar>(width * kExpansion);
  }
}

template <typename Scalar>
Tensor<Scalar> Bottleneck<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  Tensor<Scalar> y = relu1_.forward(bn1.forward(conv1.forward(x), mode));
  y = relu2_.forward(bn2.forward(conv2.forward(y), mode));
  y = bn3.forward(conv3.forward(y), mode);
  if (has_down_) {
    y.values() += down_bn.forward(down_conv.forward(x), mode).values();
  } else {
    y.values() += x.values();
  }
  return relu_out_.forward(y);
}

template <typename Scalar>
Tensor<Scalar> Bottleneck<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  const Tensor<Scalar> g = relu_out_.backward(grad_out);
  Tensor<Scalar> gx = conv1.backward(bn1.backward(
      relu1_.backward(conv2.backward(bn2.backward(relu2_.backward(conv3.backward(bn3.backward(g))))))));
  if (has_down_) {
    gx.values() += down_conv.backward(down_bn.backward(g)).values();
  } else {
    gx.values() += g.values();
  }
  return gx;
}

template <typename Scalar>
void Bottleneck<Scalar>::collect(const std::string& prefix, ParameterList<Scalar>& out) {
  conv1.collect(prefix + ".conv1", out);
  bn1.collect(prefix + ".bn1", out);
  conv2.collect(prefix + ".conv2", out);
  bn2.collect(prefix + ".bn2", out);
  conv3.collect(prefix + ".conv3", out);
  bn3.collect(prefix + ".bn3", out);
  if (has_down_) {
    down_conv.collect(prefix + ".downsample.0", out);
    down_bn.collect(prefix + ".downsample.1", out);
  }
}

template <typename Scalar>
void Bottleneck<Scalar>::cost(const std::string& prefix, Shape& chw, CostTable& rows) const {
  const Shape in = chw;
  conv1.cost(prefix + ".conv1", chw, rows);
  bn1.cost(prefix + ".bn1", chw, rows);
  rows.push_back({prefix + ".relu1", 0, 0, shape_size(chw)});
  conv2.cost(prefix + ".conv2", chw, rows);
  bn2.cost(prefix + ".bn2", chw, rows);
  rows.push_back({prefix + ".relu2", 0, 0, shape_size(chw)});
  conv3.cost(prefix + ".conv3", chw, rows);
  bn3.cost(prefix + ".bn3", chw, rows);
  if (has_down_) {
    Shape down = in;
    down_conv.cost(prefix + ".downsample.0", down, rows);
    down_bn.cost(prefix + ".downsample.1", down, rows);
  }
  rows.push_back({prefix + ".add_relu", 0, 0, 2 * shape_size(chw)});
}

template <typename Scalar>
ResNetTrunk<Scalar>::ResNetTrunk(const std::array<Index, 4>& blocks, Index base_width, Index last_stride, Rng& rng)
    : stem_conv_(3, base_width, 7, 2, 3, false, rng), stem_bn_(base_width) {
  require(last_stride == 1 || last_stride == 2, "last_stride must be 1 or 2");
  Index in = base_width;
  const Index strides[4] = {1, 2, 2, last_stride};
  for (size_t s = 0; s < 4; ++s) {
    require(blocks[s] >= 1, "every stage needs at least one block");
    const Index width = base_width << s;
    for (Index b = 0; b < blocks[s]; ++b) {
      stages_[s].emplace_back(in, width, b == 0 ? strides[s] : 1, rng);
      in = width * Bottleneck<Scalar>::kExpansion;
    }
  }
}

template <typename Scalar>
Tensor<Scalar> ResNetTrunk<Scalar>::stem_forward(const Tensor<Scalar>& images, Mode mode) {
  return stem_pool_.forward(stem_relu_.forward(stem_bn_.forward(stem_conv_.forward(images), mode)));
}

template <typename Scalar>
Tensor<Scalar> ResNetTrunk<Scalar>::stem_backward(const Tensor<Scalar>& grad_out) {
  return stem_conv_.backward(stem_bn_.backward(stem_relu_.backward(stem_pool_.backward(grad_out))));
}

template <typename Scalar>
Tensor<Scalar> ResNetTrunk<Scalar>::stage_forward(int stage, const Tensor<Scalar>& x, Mode mode) {
  Tensor<Scalar> y = x;
  for (auto& block : stages_[static_cast<size_t>(stage)]) y = block.forward(y, mode);
  return y;
}

template <typename Scalar>
Tensor<Scalar> ResNetTrunk<Scalar>::stage_backward(int stage, const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> g = grad_out;
  auto& blocks = stages_[static_cast<size_t>(stage)];
  for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) g = it->backward(g);
  return g;
}

template <typename Scalar>
void ResNetTrunk<Scalar>::collect(const std::string& prefix, ParameterList<Scalar>& out) {
  stem_conv_.collect(prefix + ".conv1", out);
  stem_bn_.collect(prefix + ".bn1", out);
  for (size_t s = 0; s < 4; ++s) {
    for (size_t b = 0; b < stages_[s].size(); ++b) {
      stages_[s][b].collect(prefix + ".layer" + std::to_string(s + 1) + "." + std::to_string(b), out);
    }
  }
}

template <typename Scalar>
void ResNetTrunk<Scalar>::stem_cost(const std::string& prefix, Shape& chw, CostTable& rows) const {
  stem_conv_.cost(prefix + ".conv1", chw, rows);
  stem_bn_.cost(prefix + ".bn1", chw, rows);
  rows.push_back({prefix + ".relu", 0, 0, shape_size(chw)});
  chw = {chw[0], stem_pool_.out_size(chw[1]), stem_pool_.out_size(chw[2])};
  rows.push_back({prefix + ".maxpool", 0, 0, shape_size(chw) * 9});
}

template <typename Scalar>
void ResNetTrunk<Scalar>::stage_cost(int stage, const std::string& prefix, Shape& chw, CostTable& rows) const {
  const auto& blocks = stages_[static_cast<size_t>(stage)];
  for (size_t b = 0; b < blocks.size(); ++b) {
    blocks[b].cost(prefix + ".layer" + std::to_string(stage + 1) + "." + std::to_string(b), chw, rows);
  }
}

template class Bottleneck<float>;
template class Bottleneck<double>;
template class ResNetTrunk<float>;
template class ResNetTrunk<double>;

}  // namespace wrim
