#pragma once

#include "wrim/miim.hpp"
#include "wrim/resnet.hpp"

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace wrim {

enum class Modality : std::uint8_t { kVis = 0, kIr = 1 };

std::string_view to_string(Modality m);
/// Accepts "VIS" or "IR"; throws std::invalid_argument otherwise.
Modality parse_modality(std::string_view s);
inline Modality opposite(Modality m) { return m == Modality::kVis ? Modality::kIr : Modality::kVis; }

struct NetworkConfig {
  Index input_height = 384;
  Index input_width = 144;
  Index local_parts_p5 = 2;  // N
  Index local_parts_p4 = 0;  // M
  Index num_classes = 395;
  Index last_stride = 1;
  std::array<Index, 4> stage_blocks{3, 4, 6, 3};
  Index base_width = 64;
  std::optional<std::string> pretrained_weights;

  bool use_miim = true;
  std::array<Index, 4> spatial_ratio{4, 2, 1, 1};
  std::array<Index, 4> channel_ratio{2, 2, 4, 4};
  Index pool_window = 3;
  Index heads = 8;
  bool positional_embedding = true;

  /// When false the Block-3 branch (Qg, Q_j, their heads) is dropped.
  bool use_aux_p4 = true;
  Index mlp_hidden = 2048;
  Index mlp_out = 512;

  /// [C, H, W] produced by stage 0..3 for one input image.
  Shape stage_shape(int stage) const;
  MiimConfig miim_config(int placement) const;
  void validate() const;
};

/// Batch-norm neck followed by a bias-free identity classifier. The BN shift
/// is frozen at zero.
template <typename Scalar>
class BnneckHead {
 public:
  BnneckHead() = default;
  BnneckHead(Index features, Index classes, Rng& rng);

  /// Returns {bn_feature, logits}.
  std::pair<RowMatrix<Scalar>, RowMatrix<Scalar>> forward(const RowMatrix<Scalar>& feature, Mode mode);
  /// Gradient w.r.t. the pre-neck feature; either input may be empty.
  RowMatrix<Scalar> backward(const RowMatrix<Scalar>& grad_bn_feature, const RowMatrix<Scalar>& grad_logits);

  void collect(const std::string& prefix, ParameterList<Scalar>& out);

  BatchNorm<Scalar> bn;
  Linear<Scalar> classifier;
};

/// z5 = fc2(ReLU(BN(fc1(Rg)))), z = z5 / |z5|.
template <typename Scalar>
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(Index in, Index hidden, Index out, Rng& rng);

  /// Returns {z5, z}; throws std::domain_error when some |z5| = 0.
  std::pair<RowMatrix<Scalar>, RowMatrix<Scalar>> forward(const RowMatrix<Scalar>& global, Mode mode);
  RowMatrix<Scalar> backward(const RowMatrix<Scalar>& grad_z);

  void collect(const std::string& prefix, ParameterList<Scalar>& out);

  Linear<Scalar> fc1;
  BatchNorm<Scalar> bn;
  Linear<Scalar> fc2;

 private:
  ReLU<Scalar> relu_;
  RowMatrix<Scalar> z_;
  Vector<Scalar> norms_;
};

template <typename Scalar>
struct Pooled {
  RowMatrix<Scalar> global;               // [B, C]
  std::vector<RowMatrix<Scalar>> locals;  // n_parts x [B, C]
};

/// Global mean over all positions plus means over `n_parts` equal horizontal
/// stripes.
template <typename Scalar>
Pooled<Scalar> partition_and_pool(const Tensor<Scalar>& map, Index n_parts);
template <typename Scalar>
Tensor<Scalar> partition_and_pool_backward(const Pooled<Scalar>& grad, const Shape& map_shape);

/// All features of one sample.
template <typename Scalar>
struct FeatureBundle {
  Tensor<Scalar> p4, p5;  // [C, H, W]
  Vector<Scalar> rg;
  std::vector<Vector<Scalar>> r;
  Vector<Scalar> qg;
  std::vector<Vector<Scalar>> q;
  Vector<Scalar> z5, z;
  /// Post-BNNeck features, in order Rg, R_1..R_N, Qg, Q_1..Q_M.
  std::vector<Vector<Scalar>> neck;
};

/// Batched outputs of one forward pass. Head vectors are ordered global
/// first, then locals.
template <typename Scalar>
struct BatchFeatures {
  Tensor<Scalar> p4, p5;
  Pooled<Scalar> pooled_p5, pooled_p4;
  RowMatrix<Scalar> z5, z;
  std::vector<RowMatrix<Scalar>> neck_p5, logits_p5;
  std::vector<RowMatrix<Scalar>> neck_p4, logits_p4;

  Index batch() const { return p5.dim(0); }
  FeatureBundle<Scalar> bundle(Index i) const;
  std::vector<FeatureBundle<Scalar>> bundles() const;
};

/// Loss gradients fed back into the network. Empty members are skipped.
template <typename Scalar>
struct FeatureGradients {
  std::vector<RowMatrix<Scalar>> logits_p5, logits_p4;
  RowMatrix<Scalar> global_p4;  // on the raw Qg (triplet term)
  RowMatrix<Scalar> z;
};

struct ComplexityReport {
  CostTable rows;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t elementwise = 0;
  /// 2 * MACs + element-wise operations.
  std::int64_t flops() const { return 2 * macs + elementwise; }
};

template <typename Scalar>
class WrimNet {
 public:
  explicit WrimNet(const NetworkConfig& cfg, std::uint64_t seed = 0);

  const NetworkConfig& config() const { return cfg_; }

  BatchFeatures<Scalar> forward(const Tensor<Scalar>& images, const std::vector<Modality>& modality, Mode mode);
  void backward(const FeatureGradients<Scalar>& grads);

  /// Every tensor with a stable name (parameters and BN buffers).
  ParameterList<Scalar> parameters();
  std::int64_t trainable_parameter_count();
  void zero_grad();

  /// Copies `trunk.*` tensors from a named-tensor archive.
  void load_pretrained_trunk(const std::string& path);

  /// Single-image inference path: trunk, one modality's separate blocks, the
  /// shared blocks, pooling and BNNeck normalisation. The projection head and
  /// classifiers are training-only and reported by training_head_cost().
  ComplexityReport complexity(Modality path = Modality::kVis) const;
  ComplexityReport training_head_cost() const;

  Index miim_instance_count() const;
  Index head_count_p5() const { return static_cast<Index>(heads_p5_.size()); }
  Index head_count_p4() const { return static_cast<Index>(heads_p4_.size()); }

  ResNetTrunk<Scalar>& trunk() { return trunk_; }
  Miim<Scalar>& separate_miim(int placement, Modality m) {
    return separate_[static_cast<size_t>(placement)][static_cast<size_t>(m)];
  }
  Miim<Scalar>& shared_miim(int placement) { return shared_[static_cast<size_t>(placement - 2)]; }
  ProjectionHead<Scalar>& projection() { return projection_; }
  BnneckHead<Scalar>& head_p5(Index i) { return heads_p5_[static_cast<size_t>(i)]; }
  BnneckHead<Scalar>& head_p4(Index i) { return heads_p4_[static_cast<size_t>(i)]; }

 private:
  Tensor<Scalar> separate_forward(int placement, const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> separate_backward(int placement, const Tensor<Scalar>& grad);

  NetworkConfig cfg_;
  ResNetTrunk<Scalar> trunk_;
  std::array<std::array<Miim<Scalar>, 2>, 2> separate_;
  std::array<Miim<Scalar>, 2> shared_;
  ProjectionHead<Scalar> projection_;
  std::vector<BnneckHead<Scalar>> heads_p5_, heads_p4_;

  std::array<std::vector<Index>, 2> routes_;
  Shape p4_shape_, p5_shape_;
};

}  // namespace wrim
