#pragma once

#include "wrim/attention.hpp"

namespace wrim {

/// Geometry and compression settings for one MIIM placement.
struct MiimConfig {
  Index in_channels = 256;
  Index in_height = 96;
  Index in_width = 36;
  Index spatial_ratio = 4;  // conv kernel and stride
  Index channel_ratio = 2;  // C2 = C1 / channel_ratio
  Index pool_window = 3;    // average-pool kernel and stride
  Index heads = 8;
  bool positional_embedding = true;

  Index compressed_channels() const { return in_channels / channel_ratio; }
  Index compressed_height() const { return in_height / spatial_ratio; }
  Index compressed_width() const { return in_width / spatial_ratio; }
  Index pooled_height() const { return compressed_height() / pool_window; }
  Index pooled_width() const { return compressed_width() / pool_window; }

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;
};

/// Multi-dimension interactive information mining block:
///
///   BN -> compress (conv r_s/r_s, C1 -> C2) = F2 -> avg-pool k_s = F3
///      -> attention(Q = F2 + pos, K = F3 + pos, V = F3) = F4
///      -> gate = sigmoid(restore(F4)), nearest-upsampled to H1 x W1
///      -> BN(ReLU(input * gate))
///
/// Tensors are batched NCHW. The stage functions can be called individually
/// in order (scc, gri, scr); backward() requires a preceding forward.
template <typename Scalar>
class Miim {
 public:
  struct Compressed {
    Tensor<Scalar> f2;  // [B, C2, H2, W2]
    Tensor<Scalar> f3;  // [B, C2, H3, W3]
  };

  Miim() = default;
  Miim(const MiimConfig& cfg, Rng& rng);

  const MiimConfig& config() const { return cfg_; }

  Compressed scc_forward(const Tensor<Scalar>& f1, Mode mode);
  /// Returns F4 as tokens [B, H2*W2, C2].
  Tensor<Scalar> gri_forward(const Tensor<Scalar>& f2, const Tensor<Scalar>& f3);
  Tensor<Scalar> scr_forward(const Tensor<Scalar>& f1, const Tensor<Scalar>& f4, Mode mode);

  Tensor<Scalar> forward(const Tensor<Scalar>& f1, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);

  /// Gate M1 [B, C1, H2, W2] and upsampled gate M2 [B, C1, H1, W1] of the last pass.
  const Tensor<Scalar>& gate() const { return gate_; }
  const Tensor<Scalar>& upsampled_gate() const { return gate_up_; }
  /// Value entering the output batch norm, i.e. ReLU(input * M2).
  const Tensor<Scalar>& gated_activation() const { return activated_; }
  const Tensor<Scalar>& attention_weights() const { return attn.attention_weights(); }

  void collect(const std::string& prefix, ParameterList<Scalar>& out);
  void cost(const std::string& prefix, CostTable& rows) const;

  BatchNorm<Scalar> pre_bn;
  Conv2d<Scalar> compress;
  MultiHeadAttention<Scalar> attn;
  Linear<Scalar> restore;
  BatchNorm<Scalar> post_bn;

 private:
  void check_input(const Tensor<Scalar>& f1) const;

  MiimConfig cfg_;
  RowMatrix<Scalar> pos_query_, pos_key_;
  Shape f2_shape_;
  Tensor<Scalar> input_, gate_, gate_up_, activated_;
};

}  // namespace wrim
