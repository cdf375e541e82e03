#pragma once

#include "wrim/layers.hpp"

namespace wrim {

/// Fixed 2-D sine-cosine table of shape [height * width, dim]. Tokens are
/// row-major over (y, x); the first dim/2 columns encode y and the last dim/2
/// encode x, each as interleaved (sin, cos) pairs over geometric frequencies
/// 1 / 10000^(2i / (dim/2)).
template <typename Scalar>
RowMatrix<Scalar> sincos_positional_embedding(Index height, Index width, Index dim);

/// [B, C, H, W] -> [B, H*W, C] and back.
template <typename Scalar>
Tensor<Scalar> to_tokens(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> from_tokens(const Tensor<Scalar>& tokens, Index height, Index width);

/// Multi-head scaled dot-product attention with learned query/key/value and
/// output projections. No dropout.
template <typename Scalar>
class MultiHeadAttention {
 public:
  struct Gradients {
    Tensor<Scalar> query;
    Tensor<Scalar> key;
    Tensor<Scalar> value;
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(Index dim, Index heads, Rng& rng);

  /// query [B, Lq, C], key/value [B, Lk, C] -> [B, Lq, C].
  Tensor<Scalar> forward(const Tensor<Scalar>& query, const Tensor<Scalar>& key, const Tensor<Scalar>& value);
  Gradients backward(const Tensor<Scalar>& grad_out);

  /// Softmax weights of the last forward pass, [B, heads, Lq, Lk].
  const Tensor<Scalar>& attention_weights() const { return weights_; }

  void collect(const std::string& prefix, ParameterList<Scalar>& out);
  void cost(const std::string& prefix, Index query_len, Index key_len, CostTable& rows) const;

  Index dim() const { return dim_; }
  Index heads() const { return heads_; }

  Linear<Scalar> q_proj, k_proj, v_proj, out_proj;

 private:
  Index dim_ = 0, heads_ = 1;
  Tensor<Scalar> q_, k_, v_, weights_;
};

}  // namespace wrim
