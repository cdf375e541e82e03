#include "wrim/attention.hpp"

#include <cmath>

namespace wrim {

template <typename Scalar>
RowMatrix<Scalar> sincos_positional_embedding(Index height, Index width, Index dim) {
  require(height > 0 && width > 0, "positional embedding: empty grid");
  require(dim > 0 && dim % 4 == 0, "positional embedding: dim must be a positive multiple of 4, got " +
                                       std::to_string(dim));
  const Index half = dim / 2;
  RowMatrix<Scalar> table(height * width, dim);
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      auto row = table.row(y * width + x);
      for (Index i = 0; i < half / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(half));
        row(2 * i) = static_cast<Scalar>(std::sin(static_cast<double>(y) * freq));
        row(2 * i + 1) = static_cast<Scalar>(std::cos(static_cast<double>(y) * freq));
        row(half + 2 * i) = static_cast<Scalar>(std::sin(static_cast<double>(x) * freq));
        row(half + 2 * i + 1) = static_cast<Scalar>(std::cos(static_cast<double>(x) * freq));
      }
    }
  }
  return table;
}

template <typename Scalar>
Tensor<Scalar> to_tokens(const Tensor<Scalar>& x) {
  const Index b = x.dim(0), c = x.dim(1), l = x.dim(2) * x.dim(3);
  Tensor<Scalar> t({b, l, c});
  for (Index n = 0; n < b; ++n) {
    Eigen::Map<RowMatrix<Scalar>>(t.data() + n * l * c, l, c) = x.sample(n).transpose();
  }
  return t;
}

template <typename Scalar>
Tensor<Scalar> from_tokens(const Tensor<Scalar>& tokens, Index height, Index width) {
  const Index b = tokens.dim(0), l = tokens.dim(1), c = tokens.dim(2);
  require(l == height * width, "from_tokens: token count " + std::to_string(l) + " does not match " +
                                   std::to_string(height) + "x" + std::to_string(width));
  Tensor<Scalar> x({b, c, height, width});
  for (Index n = 0; n < b; ++n) {
    x.sample(n) = Eigen::Map<const RowMatrix<Scalar>>(tokens.data() + n * l * c, l, c).transpose();
  }
  return x;
}

template <typename Scalar>
MultiHeadAttention<Scalar>::MultiHeadAttention(Index dim, Index heads, Rng& rng)
    : q_proj(dim, dim, true, rng),
      k_proj(dim, dim, true, rng),
      v_proj(dim, dim, true, rng),
      out_proj(dim, dim, true, rng),
      dim_(dim),
      heads_(heads) {
  require(heads > 0 && dim % heads == 0, "attention: dim " + std::to_string(dim) +
                                             " not divisible by heads " + std::to_string(heads));
}

template <typename Scalar>
Tensor<Scalar> MultiHeadAttention<Scalar>::forward(const Tensor<Scalar>& query, const Tensor<Scalar>& key,
                                                   const Tensor<Scalar>& value) {
  require(query.rank() == 3 && key.rank() == 3 && value.shape() == key.shape() &&
              query.dim(0) == key.dim(0) && query.dim(2) == dim_ && key.dim(2) == dim_,
          "attention: incompatible inputs " + shape_string(query.shape()) + " / " + shape_string(key.shape()));
  const Index b = query.dim(0), lq = query.dim(1), lk = key.dim(1), d = dim_ / heads_;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  q_ = q_proj.forward(query);
  k_ = k_proj.forward(key);
  v_ = v_proj.forward(value);
  weights_ = Tensor<Scalar>({b, heads_, lq, lk});
  Tensor<Scalar> mixed({b, lq, dim_});
  for (Index n = 0; n < b; ++n) {
    Eigen::Map<const RowMatrix<Scalar>> q(q_.data() + n * lq * dim_, lq, dim_);
    Eigen::Map<const RowMatrix<Scalar>> k(k_.data() + n * lk * dim_, lk, dim_);
    Eigen::Map<const RowMatrix<Scalar>> v(v_.data() + n * lk * dim_, lk, dim_);
    Eigen::Map<RowMatrix<Scalar>> o(mixed.data() + n * lq * dim_, lq, dim_);
    for (Index h = 0; h < heads_; ++h) {
      Eigen::Map<RowMatrix<Scalar>> a(weights_.data() + (n * heads_ + h) * lq * lk, lq, lk);
      a.noalias() = (q.middleCols(h * d, d) * k.middleCols(h * d, d).transpose()) * scale;
      for (Index r = 0; r < lq; ++r) {
        const Scalar top = a.row(r).maxCoeff();
        a.row(r) = (a.row(r).array() - top).exp();
        a.row(r) /= a.row(r).sum();
      }
      o.middleCols(h * d, d).noalias() = a * v.middleCols(h * d, d);
    }
  }
  return out_proj.forward(mixed);
}

template <typename Scalar>
typename MultiHeadAttention<Scalar>::Gradients MultiHeadAttention<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  const Index b = q_.dim(0), lq = q_.dim(1), lk = k_.dim(1), d = dim_ / heads_;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  const Tensor<Scalar> d_mixed = out_proj.backward(grad_out);
  Tensor<Scalar> dq(q_.shape()), dk(k_.shape()), dv(v_.shape());
  RowMatrix<Scalar> da, ds;
  for (Index n = 0; n < b; ++n) {
    Eigen::Map<const RowMatrix<Scalar>> q(q_.data() + n * lq * dim_, lq, dim_);
    Eigen::Map<const RowMatrix<Scalar>> k(k_.data() + n * lk * dim_, lk, dim_);
    Eigen::Map<const RowMatrix<Scalar>> v(v_.data() + n * lk * dim_, lk, dim_);
    Eigen::Map<const RowMatrix<Scalar>> go(d_mixed.data() + n * lq * dim_, lq, dim_);
    Eigen::Map<RowMatrix<Scalar>> gq(dq.data() + n * lq * dim_, lq, dim_);
    Eigen::Map<RowMatrix<Scalar>> gk(dk.data() + n * lk * dim_, lk, dim_);
    Eigen::Map<RowMatrix<Scalar>> gv(dv.data() + n * lk * dim_, lk, dim_);
    for (Index h = 0; h < heads_; ++h) {
      Eigen::Map<const RowMatrix<Scalar>> a(weights_.data() + (n * heads_ + h) * lq * lk, lq, lk);
      const auto goh = go.middleCols(h * d, d);
      da.noalias() = goh * v.middleCols(h * d, d).transpose();
      gv.middleCols(h * d, d).noalias() = a.transpose() * goh;
      const Vector<Scalar> row_dot = (da.array() * a.array()).rowwise().sum();
      ds = a.array() * (da.colwise() - row_dot).array();
      gq.middleCols(h * d, d).noalias() = (ds * k.middleCols(h * d, d)) * scale;
      gk.middleCols(h * d, d).noalias() = (ds.transpose() * q.middleCols(h * d, d)) * scale;
    }
  }
  return {q_proj.backward(dq), k_proj.backward(dk), v_proj.backward(dv)};
}

template <typename Scalar>
void MultiHeadAttention<Scalar>::collect(const std::string& prefix, ParameterList<Scalar>& out) {
  q_proj.collect(prefix + ".q_proj", out);
  k_proj.collect(prefix + ".k_proj", out);
  v_proj.collect(prefix + ".v_proj", out);
  out_proj.collect(prefix + ".out_proj", out);
}

template <typename Scalar>
void MultiHeadAttention<Scalar>::cost(const std::string& prefix, Index query_len, Index key_len,
                                      CostTable& rows) const {
  q_proj.cost(prefix + ".q_proj", query_len, rows);
  k_proj.cost(prefix + ".k_proj", key_len, rows);
  v_proj.cost(prefix + ".v_proj", key_len, rows);
  LayerCost scores{prefix + ".scores"};
  scores.macs = query_len * key_len * dim_;
  scores.elementwise = heads_ * query_len * key_len;  // softmax
  rows.push_back(scores);
  LayerCost mix{prefix + ".mix"};
  mix.macs = query_len * key_len * dim_;
  rows.push_back(mix);
  out_proj.cost(prefix + ".out_proj", query_len, rows);
}

#define WRIM_INSTANTIATE(T)                                                                \
  template RowMatrix<T> sincos_positional_embedding<T>(Index, Index, Index);               \
  template Tensor<T> to_tokens<T>(const Tensor<T>&);                                       \
  template Tensor<T> from_tokens<T>(const Tensor<T>&, Index, Index);                       \
  template class MultiHeadAttention<T>;

WRIM_INSTANTIATE(float)
WRIM_INSTANTIATE(double)

}  // namespace wrim
