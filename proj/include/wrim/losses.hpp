#pragma once

#include "wrim/wrimnet.hpp"

#include <vector>

namespace wrim {

struct LossConfig {
  double tau = 0.1;
  Index top_k = 4;
  double lambda1 = 0.5;
  double lambda2 = 0.1;
  double triplet_margin = 0.3;
  double label_smoothing = 0.0;
  /// Divide each directional CMKIC sum by its anchor count.
  bool cmkic_mean = false;

  void validate() const;
};

struct BatchLabels {
  std::vector<Index> person_id;
  std::vector<Modality> modality;

  Index size() const { return static_cast<Index>(person_id.size()); }
};

/// Throws std::invalid_argument describing the first identity that cannot
/// supply `top_k` opposite-modality positives, or a malformed label set.
void check_cmkic_batch(const BatchLabels& labels, Index top_k);

/// Rows of `candidates` sharing `anchor_id` with the smallest dot product to
/// `anchor`, ordered by (similarity, index).
template <typename Scalar>
std::vector<Index> select_key_instances(const Vector<Scalar>& anchor, const RowMatrix<Scalar>& candidates,
                                        const std::vector<Index>& candidate_ids, Index anchor_id, Index top_k);

template <typename Scalar>
struct LossValue {
  Scalar value = 0;
  RowMatrix<Scalar> grad;  // d value / d input, same shape as the input
};

/// One direction of the contrastive loss, summed over anchors of
/// `anchor_modality` (or averaged when cfg.cmkic_mean). `z` rows are unit
/// vectors; the gradient treats the key-instance selection as fixed.
template <typename Scalar>
LossValue<Scalar> cmkic_directional(const RowMatrix<Scalar>& z, const BatchLabels& labels, Modality anchor_modality,
                                    const LossConfig& cfg);

/// Mean of the VIS-anchored and IR-anchored directions.
template <typename Scalar>
LossValue<Scalar> cmkic_loss(const RowMatrix<Scalar>& z, const BatchLabels& labels, const LossConfig& cfg);

template <typename Scalar>
struct MultiLossValue {
  Scalar value = 0;
  std::vector<RowMatrix<Scalar>> grads;  // one per input matrix
};

/// Mean over feature heads of the batch-mean cross-entropy.
template <typename Scalar>
MultiLossValue<Scalar> cls_loss(const std::vector<RowMatrix<Scalar>>& logits, const std::vector<Index>& labels,
                                double label_smoothing = 0.0);

/// Batch-hard triplet loss with Euclidean distance, averaged over anchors.
template <typename Scalar>
LossValue<Scalar> triplet_batch_hard(const RowMatrix<Scalar>& features, const std::vector<Index>& ids,
                                     double margin);

template <typename Scalar>
struct IdLossP4 {
  Scalar value = 0;
  Scalar cls = 0;
  Scalar triplet = 0;
  std::vector<RowMatrix<Scalar>> logit_grads;
  RowMatrix<Scalar> global_grad;  // w.r.t. the raw Qg
};

/// Cross-entropy over the P4 heads plus batch-hard triplet on Qg.
template <typename Scalar>
IdLossP4<Scalar> id_loss_p4(const RowMatrix<Scalar>& qg, const std::vector<RowMatrix<Scalar>>& logits,
                            const std::vector<Index>& ids, const LossConfig& cfg);

/// cls5 + lambda1 * cmkic5 + lambda2 * id4; throws std::domain_error on a
/// non-finite term.
double total_loss(double cls5, double cmkic5, double id4, const LossConfig& cfg);

}  // namespace wrim
