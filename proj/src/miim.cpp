#include "wrim/miim.hpp"

#include <cmath>

namespace wrim {

void MiimConfig::validate() const {
  const auto fail = [](const std::string& what) { throw std::invalid_argument("MiimConfig: " + what); };
  if (in_channels <= 0 || in_height <= 0 || in_width <= 0) fail("input geometry must be positive");
  if (spatial_ratio <= 0 || channel_ratio <= 0 || pool_window <= 0 || heads <= 0) fail("ratios must be positive");
  if (in_channels % channel_ratio != 0) {
    fail("in_channels " + std::to_string(in_channels) + " not divisible by channel_ratio " +
         std::to_string(channel_ratio));
  }
  if (compressed_channels() % heads != 0) {
    fail("compressed channels " + std::to_string(compressed_channels()) + " not divisible by heads " +
         std::to_string(heads));
  }
  if (in_height % spatial_ratio != 0 || in_width % spatial_ratio != 0) {
    fail("input " + std::to_string(in_height) + "x" + std::to_string(in_width) + " not divisible by spatial_ratio " +
         std::to_string(spatial_ratio));
  }
  if (pooled_height() < 1 || pooled_width() < 1) {
    fail("pool_window " + std::to_string(pool_window) + " larger than compressed map " +
         std::to_string(compressed_height()) + "x" + std::to_string(compressed_width()));
  }
  if (positional_embedding && compressed_channels() % 4 != 0) {
    fail("compressed channels must be a multiple of 4 for the 2-D positional embedding");
  }
}

template <typename Scalar>
Miim<Scalar>::Miim(const MiimConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const Index c1 = cfg.in_channels, c2 = cfg.compressed_channels();
  pre_bn = BatchNorm<Scalar>(c1);
  compress = Conv2d<Scalar>(c1, c2, cfg.spatial_ratio, cfg.spatial_ratio, 0, true, rng);
  attn = MultiHeadAttention<Scalar>(c2, cfg.heads, rng);
  restore = Linear<Scalar>(c2, c1, true, rng);
  post_bn = BatchNorm<Scalar>(c1);
  if (cfg.positional_embedding) {
    pos_query_ = sincos_positional_embedding<Scalar>(cfg.compressed_height(), cfg.compressed_width(), c2);
    pos_key_ = sincos_positional_embedding<Scalar>(cfg.pooled_height(), cfg.pooled_width(), c2);
  }
}

template <typename Scalar>
void Miim<Scalar>::check_input(const Tensor<Scalar>& f1) const {
  require(f1.rank() == 4 && f1.dim(1) == cfg_.in_channels && f1.dim(2) == cfg_.in_height &&
              f1.dim(3) == cfg_.in_width,
          "MIIM: input " + shape_string(f1.shape()) + " does not match configured [B," +
              std::to_string(cfg_.in_channels) + "," + std::to_string(cfg_.in_height) + "," +
              std::to_string(cfg_.in_width) + "]");
}

template <typename Scalar>
typename Miim<Scalar>::Compressed Miim<Scalar>::scc_forward(const Tensor<Scalar>& f1, Mode mode) {
  check_input(f1);
  Compressed out;
  out.f2 = compress.forward(pre_bn.forward(f1, mode));
  out.f3 = avg_pool_forward(out.f2, cfg_.pool_window);
  f2_shape_ = out.f2.shape();
  return out;
}

namespace {

template <typename Scalar>
void add_per_sample(Tensor<Scalar>& tokens, const RowMatrix<Scalar>& table) {
  const Index l = tokens.dim(1), c = tokens.dim(2);
  for (Index n = 0; n < tokens.dim(0); ++n) Eigen::Map<RowMatrix<Scalar>>(tokens.data() + n * l * c, l, c) += table;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> Miim<Scalar>::gri_forward(const Tensor<Scalar>& f2, const Tensor<Scalar>& f3) {
  require(f2.rank() == 4 && f3.rank() == 4 && f2.dim(1) == attn.dim() && f3.dim(1) == attn.dim(),
          "GRI: expected compressed maps with " + std::to_string(attn.dim()) + " channels");
  Tensor<Scalar> query = to_tokens(f2);
  Tensor<Scalar> key = to_tokens(f3);
  const Tensor<Scalar> value = key;
  if (cfg_.positional_embedding) {
    add_per_sample(query, pos_query_);
    add_per_sample(key, pos_key_);
  }
  return attn.forward(query, key, value);
}

template <typename Scalar>
Tensor<Scalar> Miim<Scalar>::scr_forward(const Tensor<Scalar>& f1, const Tensor<Scalar>& f4, Mode mode) {
  check_input(f1);
  const Index h2 = cfg_.compressed_height(), w2 = cfg_.compressed_width();
  require(f4.rank() == 3 && f4.dim(0) == f1.dim(0) && f4.dim(1) == h2 * w2,
          "SCR: F4 " + shape_string(f4.shape()) + " does not carry " + std::to_string(h2 * w2) + " tokens");
  Tensor<Scalar> logits = restore.forward(f4);
  logits.values() = (Scalar(1) + (-logits.values().array()).exp()).inverse().matrix();
  gate_ = from_tokens(logits, h2, w2);
  gate_up_ = upsample_nearest(gate_, cfg_.spatial_ratio);
  input_ = f1;
  activated_ = Tensor<Scalar>(f1.shape());
  activated_.values() = (f1.values().array() * gate_up_.values().array()).cwiseMax(Scalar(0)).matrix();
  return post_bn.forward(activated_, mode);
}

template <typename Scalar>
Tensor<Scalar> Miim<Scalar>::forward(const Tensor<Scalar>& f1, Mode mode) {
  const Compressed c = scc_forward(f1, mode);
  return scr_forward(f1, gri_forward(c.f2, c.f3), mode);
}

template <typename Scalar>
Tensor<Scalar> Miim<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  const Tensor<Scalar> g_act = post_bn.backward(grad_out);
  Tensor<Scalar> g_pre(g_act.shape());
  g_pre.values() = (activated_.values().array() > Scalar(0)).select(g_act.values(), Scalar(0));

  Tensor<Scalar> g_input(input_.shape());
  g_input.values() = g_pre.values().cwiseProduct(gate_up_.values());
  Tensor<Scalar> g_gate_up(input_.shape());
  g_gate_up.values() = g_pre.values().cwiseProduct(input_.values());

  Tensor<Scalar> g_gate = upsample_nearest_backward(g_gate_up, cfg_.spatial_ratio);
  g_gate.values() =
      (g_gate.values().array() * gate_.values().array() * (Scalar(1) - gate_.values().array())).matrix();
  const Tensor<Scalar> g_f4 = restore.backward(to_tokens(g_gate));

  auto g_tokens = attn.backward(g_f4);
  g_tokens.key.values() += g_tokens.value.values();
  Tensor<Scalar> g_f2 = from_tokens(g_tokens.query, cfg_.compressed_height(), cfg_.compressed_width());
  const Tensor<Scalar> g_f3 = from_tokens(g_tokens.key, cfg_.pooled_height(), cfg_.pooled_width());
  g_f2.values() += avg_pool_backward(g_f3, f2_shape_, cfg_.pool_window).values();

  const Tensor<Scalar> g_bn = compress.backward(g_f2);
  g_input.values() += pre_bn.backward(g_bn).values();
  return g_input;
}

template <typename Scalar>
void Miim<Scalar>::collect(const std::string& prefix, ParameterList<Scalar>& out) {
  pre_bn.collect(prefix + ".pre_bn", out);
  compress.collect(prefix + ".compress", out);
  attn.collect(prefix + ".attn", out);
  restore.collect(prefix + ".restore", out);
  post_bn.collect(prefix + ".post_bn", out);
}

template <typename Scalar>
void Miim<Scalar>::cost(const std::string& prefix, CostTable& rows) const {
  const Index c1 = cfg_.in_channels, c2 = cfg_.compressed_channels();
  const Index l1 = cfg_.in_height * cfg_.in_width;
  const Index l2 = cfg_.compressed_height() * cfg_.compressed_width();
  const Index l3 = cfg_.pooled_height() * cfg_.pooled_width();
  const Shape in_chw{c1, cfg_.in_height, cfg_.in_width};
  pre_bn.cost(prefix + ".pre_bn", in_chw, rows);
  Shape chw = in_chw;
  compress.cost(prefix + ".compress", chw, rows);
  LayerCost pool{prefix + ".pool"};
  pool.elementwise = l3 * c2 * cfg_.pool_window * cfg_.pool_window;
  rows.push_back(pool);
  if (cfg_.positional_embedding) {
    LayerCost pos{prefix + ".pos_embed"};
    pos.elementwise = (l2 + l3) * c2;
    rows.push_back(pos);
  }
  attn.cost(prefix + ".attn", l2, l3, rows);
  restore.cost(prefix + ".restore", l2, rows);
  LayerCost gate{prefix + ".gate"};
  gate.elementwise = l2 * c1 + 2 * l1 * c1;  // sigmoid, multiply, relu
  rows.push_back(gate);
  post_bn.cost(prefix + ".post_bn", in_chw, rows);
}

template class Miim<float>;
template class Miim<double>;

}  // namespace wrim
