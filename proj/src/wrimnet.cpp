#include "wrim/wrimnet.hpp"

#include "wrim/checkpoint.hpp"

#include <cmath>
#include <stdexcept>

namespace wrim {

std::string_view to_string(Modality m) { return m == Modality::kVis ? "VIS" : "IR"; }

Modality parse_modality(std::string_view s) {
  if (s == "VIS") return Modality::kVis;
  if (s == "IR") return Modality::kIr;
  throw std::invalid_argument("unknown modality '" + std::string(s) + "' (expected VIS or IR)");
}

// ---------------------------------------------------------------- NetworkConfig

Shape NetworkConfig::stage_shape(int stage) const {
  auto conv_out = [](Index in, Index k, Index s, Index p) { return (in + 2 * p - k) / s + 1; };
  Index h = conv_out(conv_out(input_height, 7, 2, 3), 3, 2, 1);
  Index w = conv_out(conv_out(input_width, 7, 2, 3), 3, 2, 1);
  const Index strides[4] = {1, 2, 2, last_stride};
  for (int s = 0; s <= stage; ++s) {
    h = conv_out(h, 3, strides[s], 1);
    w = conv_out(w, 3, strides[s], 1);
  }
  return {base_width * 4 * (Index{1} << stage), h, w};
}

MiimConfig NetworkConfig::miim_config(int placement) const {
  const Shape chw = stage_shape(placement);
  MiimConfig m;
  m.in_channels = chw[0];
  m.in_height = chw[1];
  m.in_width = chw[2];
  m.spatial_ratio = spatial_ratio[static_cast<size_t>(placement)];
  m.channel_ratio = channel_ratio[static_cast<size_t>(placement)];
  m.pool_window = pool_window;
  m.heads = heads;
  m.positional_embedding = positional_embedding;
  return m;
}

void NetworkConfig::validate() const {
  const auto fail = [](const std::string& what) { throw std::invalid_argument("NetworkConfig: " + what); };
  if (input_height < 32 || input_width < 32) fail("input must be at least 32x32");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (last_stride != 1 && last_stride != 2) fail("last_stride must be 1 or 2");
  if (base_width < 1) fail("base_width must be positive");
  for (Index b : stage_blocks) {
    if (b < 1) fail("every stage needs at least one block");
  }
  if (local_parts_p5 < 0 || local_parts_p4 < 0) fail("part counts must be non-negative");
  if (local_parts_p5 > 0 && stage_shape(3)[1] % local_parts_p5 != 0) {
    fail("Block-4 height " + std::to_string(stage_shape(3)[1]) + " not divisible by N = " +
         std::to_string(local_parts_p5));
  }
  if (local_parts_p4 > 0 && stage_shape(2)[1] % local_parts_p4 != 0) {
    fail("Block-3 height " + std::to_string(stage_shape(2)[1]) + " not divisible by M = " +
         std::to_string(local_parts_p4));
  }
  if (mlp_hidden < 1 || mlp_out < 1) fail("projection widths must be positive");
  if (use_miim) {
    for (int p = 0; p < 4; ++p) {
      try {
        miim_config(p).validate();
      } catch (const std::invalid_argument& e) {
        fail("placement " + std::to_string(p + 1) + ": " + e.what());
      }
    }
  }
}

// ---------------------------------------------------------------- heads

template <typename Scalar>
BnneckHead<Scalar>::BnneckHead(Index features, Index classes, Rng& rng)
    : bn(features, false), classifier(features, classes, false, rng) {
  std::normal_distribution<double> dist(0.0, 0.001);
  for (Index i = 0; i < classifier.weight.value.size(); ++i) classifier.weight.value[i] = static_cast<Scalar>(dist(rng));
}

template <typename Scalar>
std::pair<RowMatrix<Scalar>, RowMatrix<Scalar>> BnneckHead<Scalar>::forward(const RowMatrix<Scalar>& feature,
                                                                              Mode mode) {
  const Tensor<Scalar> normed = bn.forward(Tensor<Scalar>::from_matrix(feature), mode);
  const Tensor<Scalar> logits = classifier.forward(normed);
  return {normed.matrix(), logits.matrix()};
}

template <typename Scalar>
RowMatrix<Scalar> BnneckHead<Scalar>::backward(const RowMatrix<Scalar>& grad_bn_feature,
                                               const RowMatrix<Scalar>& grad_logits) {
  Tensor<Scalar> g;
  if (grad_logits.size() > 0) g = classifier.backward(Tensor<Scalar>::from_matrix(grad_logits));
  if (grad_bn_feature.size() > 0) {
    if (g.empty()) {
      g = Tensor<Scalar>::from_matrix(grad_bn_feature);
    } else {
      g.matrix() += grad_bn_feature;
    }
  }
  return bn.backward(g).matrix();
}

template <typename Scalar>
void BnneckHead<Scalar>::collect(const std::string& prefix, ParameterList<Scalar>& out) {
  bn.collect(prefix + ".bn", out);
  classifier.collect(prefix + ".classifier", out);
}

template <typename Scalar>
ProjectionHead<Scalar>::ProjectionHead(Index in, Index hidden, Index out, Rng& rng)
    : fc1(in, hidden, true, rng), bn(hidden), fc2(hidden, out, true, rng) {}

template <typename Scalar>
std::pair<RowMatrix<Scalar>, RowMatrix<Scalar>> ProjectionHead<Scalar>::forward(const RowMatrix<Scalar>& global,
                                                                                  Mode mode) {
  const Tensor<Scalar> z5 =
      fc2.forward(relu_.forward(bn.forward(fc1.forward(Tensor<Scalar>::from_matrix(global)), mode)));
  norms_ = z5.matrix().rowwise().norm();
  for (Index i = 0; i < norms_.size(); ++i) {
    if (!(norms_[i] > Scalar(0))) throw std::domain_error("projection: cannot normalise a zero z5");
  }
  z_ = norms_.asDiagonal().inverse() * z5.matrix();
  return {z5.matrix(), z_};
}

template <typename Scalar>
RowMatrix<Scalar> ProjectionHead<Scalar>::backward(const RowMatrix<Scalar>& grad_z) {
  const Vector<Scalar> radial = (grad_z.array() * z_.array()).rowwise().sum();
  RowMatrix<Scalar> g = grad_z - radial.asDiagonal() * z_;
  g = norms_.asDiagonal().inverse() * g;
  return fc1.backward(bn.backward(relu_.backward(fc2.backward(Tensor<Scalar>::from_matrix(g))))).matrix();
}

template <typename Scalar>
void ProjectionHead<Scalar>::collect(const std::string& prefix, ParameterList<Scalar>& out) {
  fc1.collect(prefix + ".fc1", out);
  bn.collect(prefix + ".bn", out);
  fc2.collect(prefix + ".fc2", out);
}

// ---------------------------------------------------------------- pooling

template <typename Scalar>
Pooled<Scalar> partition_and_pool(const Tensor<Scalar>& map, Index n_parts) {
  require(map.rank() == 4, "partition_and_pool: expected [B, C, H, W]");
  const Index b = map.dim(0), c = map.dim(1), h = map.dim(2), w = map.dim(3);
  require(n_parts >= 0, "partition_and_pool: negative part count");
  require(n_parts == 0 || h % n_parts == 0,
          "partition_and_pool: height " + std::to_string(h) + " not divisible into " + std::to_string(n_parts) +
              " stripes");
  Pooled<Scalar> out;
  out.global.resize(b, c);
  out.locals.assign(static_cast<size_t>(n_parts), RowMatrix<Scalar>(b, c));
  const Index stripe = n_parts > 0 ? h / n_parts : 0;
  for (Index n = 0; n < b; ++n) {
    for (Index ch = 0; ch < c; ++ch) {
      const Scalar* plane = map.data() + (n * c + ch) * h * w;
      Scalar total = 0;
      for (Index part = 0; part < n_parts; ++part) {
        Scalar s = 0;
        for (Index k = part * stripe * w; k < (part + 1) * stripe * w; ++k) s += plane[k];
        out.locals[static_cast<size_t>(part)](n, ch) = s / static_cast<Scalar>(stripe * w);
        total += s;
      }
      if (n_parts == 0) {
        for (Index k = 0; k < h * w; ++k) total += plane[k];
      }
      out.global(n, ch) = total / static_cast<Scalar>(h * w);
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> partition_and_pool_backward(const Pooled<Scalar>& grad, const Shape& map_shape) {
  const Index b = map_shape[0], c = map_shape[1], h = map_shape[2], w = map_shape[3];
  const Index n_parts = static_cast<Index>(grad.locals.size());
  const Index stripe = n_parts > 0 ? h / n_parts : 0;
  Tensor<Scalar> dx(map_shape);
  for (Index n = 0; n < b; ++n) {
    for (Index ch = 0; ch < c; ++ch) {
      Scalar* plane = dx.data() + (n * c + ch) * h * w;
      const Scalar g = grad.global.size() > 0 ? grad.global(n, ch) / static_cast<Scalar>(h * w) : Scalar(0);
      for (Index k = 0; k < h * w; ++k) plane[k] = g;
      for (Index part = 0; part < n_parts; ++part) {
        const auto& gl = grad.locals[static_cast<size_t>(part)];
        if (gl.size() == 0) continue;
        const Scalar v = gl(n, ch) / static_cast<Scalar>(stripe * w);
        for (Index k = part * stripe * w; k < (part + 1) * stripe * w; ++k) plane[k] += v;
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- bundles

template <typename Scalar>
FeatureBundle<Scalar> BatchFeatures<Scalar>::bundle(Index i) const {
  FeatureBundle<Scalar> f;
  auto slice = [i](const Tensor<Scalar>& t) {
    Tensor<Scalar> s({t.dim(1), t.dim(2), t.dim(3)});
    s.values() = t.values().segment(i * s.size(), s.size());
    return s;
  };
  f.p4 = slice(p4);
  f.p5 = slice(p5);
  f.rg = pooled_p5.global.row(i).transpose();
  for (const auto& m : pooled_p5.locals) f.r.push_back(m.row(i).transpose());
  if (pooled_p4.global.size() > 0) f.qg = pooled_p4.global.row(i).transpose();
  for (const auto& m : pooled_p4.locals) f.q.push_back(m.row(i).transpose());
  f.z5 = z5.row(i).transpose();
  f.z = z.row(i).transpose();
  for (const auto& m : neck_p5) f.neck.push_back(m.row(i).transpose());
  for (const auto& m : neck_p4) f.neck.push_back(m.row(i).transpose());
  return f;
}

template <typename Scalar>
std::vector<FeatureBundle<Scalar>> BatchFeatures<Scalar>::bundles() const {
  std::vector<FeatureBundle<Scalar>> out;
  for (Index i = 0; i < batch(); ++i) out.push_back(bundle(i));
  return out;
}

// ---------------------------------------------------------------- WrimNet

template <typename Scalar>
WrimNet<Scalar>::WrimNet(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  trunk_ = ResNetTrunk<Scalar>(cfg_.stage_blocks, cfg_.base_width, cfg_.last_stride, rng);
  if (cfg_.use_miim) {
    for (int p = 0; p < 2; ++p) {
      for (auto& m : separate_[static_cast<size_t>(p)]) m = Miim<Scalar>(cfg_.miim_config(p), rng);
    }
    for (int p = 2; p < 4; ++p) shared_[static_cast<size_t>(p - 2)] = Miim<Scalar>(cfg_.miim_config(p), rng);
  }
  const Index c5 = cfg_.stage_shape(3)[0], c4 = cfg_.stage_shape(2)[0];
  projection_ = ProjectionHead<Scalar>(c5, cfg_.mlp_hidden, cfg_.mlp_out, rng);
  for (Index i = 0; i <= cfg_.local_parts_p5; ++i) heads_p5_.emplace_back(c5, cfg_.num_classes, rng);
  if (cfg_.use_aux_p4) {
    for (Index i = 0; i <= cfg_.local_parts_p4; ++i) heads_p4_.emplace_back(c4, cfg_.num_classes, rng);
  }
  if (cfg_.pretrained_weights) load_pretrained_trunk(*cfg_.pretrained_weights);
}

template <typename Scalar>
Tensor<Scalar> WrimNet<Scalar>::separate_forward(int placement, const Tensor<Scalar>& x, Mode mode) {
  Tensor<Scalar> out(x.shape());
  for (size_t m = 0; m < 2; ++m) {
    if (routes_[m].empty()) continue;
    const Tensor<Scalar> part = separate_[static_cast<size_t>(placement)][m].forward(gather_batch(x, routes_[m]), mode);
    scatter_batch(part, routes_[m], out);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> WrimNet<Scalar>::separate_backward(int placement, const Tensor<Scalar>& grad) {
  Tensor<Scalar> out(grad.shape());
  for (size_t m = 0; m < 2; ++m) {
    if (routes_[m].empty()) continue;
    const Tensor<Scalar> part =
        separate_[static_cast<size_t>(placement)][m].backward(gather_batch(grad, routes_[m]));
    scatter_batch(part, routes_[m], out);
  }
  return out;
}

template <typename Scalar>
BatchFeatures<Scalar> WrimNet<Scalar>::forward(const Tensor<Scalar>& images, const std::vector<Modality>& modality,
                                               Mode mode) {
  require(images.rank() == 4 && images.dim(1) == 3 && images.dim(2) == cfg_.input_height &&
              images.dim(3) == cfg_.input_width,
          "WrimNet: expected images [B,3," + std::to_string(cfg_.input_height) + "," +
              std::to_string(cfg_.input_width) + "], got " + shape_string(images.shape()));
  require(static_cast<Index>(modality.size()) == images.dim(0), "WrimNet: one modality tag per image required");
  for (auto& r : routes_) r.clear();
  for (size_t i = 0; i < modality.size(); ++i) {
    const auto m = static_cast<size_t>(modality[i]);
    require(m < 2, "WrimNet: unknown modality tag");
    routes_[m].push_back(static_cast<Index>(i));
  }

  BatchFeatures<Scalar> f;
  Tensor<Scalar> x = trunk_.stem_forward(images, mode);
  for (int s = 0; s < 2; ++s) {
    x = trunk_.stage_forward(s, x, mode);
    if (cfg_.use_miim) x = separate_forward(s, x, mode);
  }
  x = trunk_.stage_forward(2, x, mode);
  if (cfg_.use_miim) x = shared_[0].forward(x, mode);
  f.p4 = x;
  x = trunk_.stage_forward(3, x, mode);
  if (cfg_.use_miim) x = shared_[1].forward(x, mode);
  f.p5 = x;
  p4_shape_ = f.p4.shape();
  p5_shape_ = f.p5.shape();

  f.pooled_p5 = partition_and_pool(f.p5, cfg_.local_parts_p5);
  std::tie(f.z5, f.z) = projection_.forward(f.pooled_p5.global, mode);
  for (size_t i = 0; i < heads_p5_.size(); ++i) {
    const auto& feat = i == 0 ? f.pooled_p5.global : f.pooled_p5.locals[i - 1];
    auto [neck, logits] = heads_p5_[i].forward(feat, mode);
    f.neck_p5.push_back(std::move(neck));
    f.logits_p5.push_back(std::move(logits));
  }
  if (cfg_.use_aux_p4) {
    f.pooled_p4 = partition_and_pool(f.p4, cfg_.local_parts_p4);
    for (size_t i = 0; i < heads_p4_.size(); ++i) {
      const auto& feat = i == 0 ? f.pooled_p4.global : f.pooled_p4.locals[i - 1];
      auto [neck, logits] = heads_p4_[i].forward(feat, mode);
      f.neck_p4.push_back(std::move(neck));
      f.logits_p4.push_back(std::move(logits));
    }
  }
  return f;
}

template <typename Scalar>
void WrimNet<Scalar>::backward(const FeatureGradients<Scalar>& grads) {
  const Index b = p5_shape_[0];
  const RowMatrix<Scalar> none;

  auto head_grads = [&](std::vector<BnneckHead<Scalar>>& heads, const std::vector<RowMatrix<Scalar>>& logits,
                        Index channels) {
    Pooled<Scalar> g;
    g.global = RowMatrix<Scalar>::Zero(b, channels);
    g.locals.assign(heads.size() > 0 ? heads.size() - 1 : 0, RowMatrix<Scalar>::Zero(b, channels));
    for (size_t i = 0; i < heads.size() && i < logits.size(); ++i) {
      if (logits[i].size() == 0) continue;
      const RowMatrix<Scalar> d = heads[i].backward(none, logits[i]);
      if (i == 0) {
        g.global += d;
      } else {
        g.locals[i - 1] += d;
      }
    }
    return g;
  };

  Pooled<Scalar> g5 = head_grads(heads_p5_, grads.logits_p5, p5_shape_[1]);
  if (grads.z.size() > 0) g5.global += projection_.backward(grads.z);
  Tensor<Scalar> g = partition_and_pool_backward(g5, p5_shape_);
  if (cfg_.use_miim) g = shared_[1].backward(g);
  g = trunk_.stage_backward(3, g);

  if (cfg_.use_aux_p4) {
    Pooled<Scalar> g4 = head_grads(heads_p4_, grads.logits_p4, p4_shape_[1]);
    if (grads.global_p4.size() > 0) g4.global += grads.global_p4;
    g.values() += partition_and_pool_backward(g4, p4_shape_).values();
  }
  if (cfg_.use_miim) g = shared_[0].backward(g);
  g = trunk_.stage_backward(2, g);
  for (int s = 1; s >= 0; --s) {
    if (cfg_.use_miim) g = separate_backward(s, g);
    g = trunk_.stage_backward(s, g);
  }
  trunk_.stem_backward(g);
}

template <typename Scalar>
ParameterList<Scalar> WrimNet<Scalar>::parameters() {
  ParameterList<Scalar> out;
  trunk_.collect("trunk", out);
  if (cfg_.use_miim) {
    for (int p = 0; p < 2; ++p) {
      for (Modality m : {Modality::kVis, Modality::kIr}) {
        std::string tag(to_string(m));
        for (auto& ch : tag) ch = static_cast<char>(std::tolower(ch));
        separate_miim(p, m).collect("miim" + std::to_string(p + 1) + "." + tag, out);
      }
    }
    shared_[0].collect("miim3", out);
    shared_[1].collect("miim4", out);
  }
  projection_.collect("projection", out);
  for (size_t i = 0; i < heads_p5_.size(); ++i) heads_p5_[i].collect("neck.p5." + std::to_string(i), out);
  for (size_t i = 0; i < heads_p4_.size(); ++i) heads_p4_[i].collect("neck.p4." + std::to_string(i), out);
  return out;
}

template <typename Scalar>
std::int64_t WrimNet<Scalar>::trainable_parameter_count() {
  std::int64_t n = 0;
  for (const auto& p : parameters()) {
    if (p.param->trainable) n += p.param->value.size();
  }
  return n;
}

template <typename Scalar>
void WrimNet<Scalar>::zero_grad() {
  for (auto& p : parameters()) p.param->grad.set_zero();
}

template <typename Scalar>
void WrimNet<Scalar>::load_pretrained_trunk(const std::string& path) {
  const Archive archive = read_archive(path);
  ParameterList<Scalar> trunk_params;
  trunk_.collect("trunk", trunk_params);
  try {
    restore_parameters(trunk_params, archive);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error("pretrained weights " + path + " incompatible: " + e.what());
  }
}

template <typename Scalar>
Index WrimNet<Scalar>::miim_instance_count() const {
  return cfg_.use_miim ? 6 : 0;
}

namespace {

void total_up(ComplexityReport& r) {
  r.params = r.macs = r.elementwise = 0;
  for (const auto& row : r.rows) {
    r.params += row.params;
    r.macs += row.macs;
    r.elementwise += row.elementwise;
  }
}

}  // namespace

template <typename Scalar>
ComplexityReport WrimNet<Scalar>::complexity(Modality path) const {
  ComplexityReport r;
  Shape chw{3, cfg_.input_height, cfg_.input_width};
  trunk_.stem_cost("trunk", chw, r.rows);
  std::string tag(to_string(path));
  for (auto& ch : tag) ch = static_cast<char>(std::tolower(ch));
  Shape p4_chw;
  for (int s = 0; s < 4; ++s) {
    trunk_.stage_cost(s, "trunk", chw, r.rows);
    if (cfg_.use_miim) {
      if (s < 2) {
        separate_[static_cast<size_t>(s)][static_cast<size_t>(path)].cost(
            "miim" + std::to_string(s + 1) + "." + tag, r.rows);
      } else {
        shared_[static_cast<size_t>(s - 2)].cost("miim" + std::to_string(s + 1), r.rows);
      }
    }
    if (s == 2) p4_chw = chw;
  }
  auto pool_rows = [&r](const std::string& name, const Shape& map, Index parts,
                        const std::vector<BnneckHead<Scalar>>& heads) {
    r.rows.push_back({name + ".pool", 0, 0, shape_size(map) * (parts > 0 ? 2 : 1)});
    for (size_t i = 0; i < heads.size(); ++i) {
      heads[i].bn.cost(name + "." + std::to_string(i) + ".bn", {map[0]}, r.rows);
    }
  };
  pool_rows("neck.p5", chw, cfg_.local_parts_p5, heads_p5_);
  if (cfg_.use_aux_p4) pool_rows("neck.p4", p4_chw, cfg_.local_parts_p4, heads_p4_);
  total_up(r);
  return r;
}

template <typename Scalar>
ComplexityReport WrimNet<Scalar>::training_head_cost() const {
  ComplexityReport r;
  projection_.fc1.cost("projection.fc1", 1, r.rows);
  projection_.bn.cost("projection.bn", {cfg_.mlp_hidden}, r.rows);
  projection_.fc2.cost("projection.fc2", 1, r.rows);
  for (size_t i = 0; i < heads_p5_.size(); ++i) {
    heads_p5_[i].classifier.cost("neck.p5." + std::to_string(i) + ".classifier", 1, r.rows);
  }
  for (size_t i = 0; i < heads_p4_.size(); ++i) {
    heads_p4_[i].classifier.cost("neck.p4." + std::to_string(i) + ".classifier", 1, r.rows);
  }
  total_up(r);
  return r;
}

#define WRIM_INSTANTIATE(T)                                                                      \
  template class BnneckHead<T>;                                                                  \
  template class ProjectionHead<T>;                                                              \
  template Pooled<T> partition_and_pool<T>(const Tensor<T>&, Index);                            \
  template Tensor<T> partition_and_pool_backward<T>(const Pooled<T>&, const Shape&);             \
  template struct BatchFeatures<T>;                                                              \
  template class WrimNet<T>;

WRIM_INSTANTIATE(float)
WRIM_INSTANTIATE(double)

}  // namespace wrim
