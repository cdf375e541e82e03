#include "wrim/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace wrim {

void LossConfig::validate() const {
  const auto fail = [](const std::string& what) { throw std::invalid_argument("LossConfig: " + what); };
  if (!(tau > 0.0)) fail("tau must be positive");
  if (top_k < 1) fail("top_k must be >= 1");
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) fail("lambda1 and lambda2 must be non-negative");
  if (!(triplet_margin >= 0.0)) fail("triplet margin must be non-negative");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) fail("label smoothing must lie in [0, 1)");
}

namespace {

void check_labels(const BatchLabels& labels, Index rows) {
  require(labels.modality.size() == labels.person_id.size(), "BatchLabels: id and modality counts differ");
  require(labels.size() == rows, "BatchLabels: " + std::to_string(labels.size()) + " labels for " +
                                     std::to_string(rows) + " feature rows");
}

// Anchors of `anchor` need top_k same-id samples of the opposite modality.
void check_direction(const BatchLabels& labels, Modality anchor, Index top_k) {
  std::map<Index, Index> anchors, opposite_count;
  for (Index i = 0; i < labels.size(); ++i) {
    const auto s = static_cast<size_t>(i);
    if (labels.modality[s] == anchor) {
      ++anchors[labels.person_id[s]];
    } else {
      ++opposite_count[labels.person_id[s]];
    }
  }
  for (const auto& [id, n] : anchors) {
    const Index have = opposite_count.count(id) ? opposite_count[id] : 0;
    if (have < top_k) {
      throw std::invalid_argument("identity " + std::to_string(id) + " has " + std::to_string(have) + " " +
                                  std::string(to_string(opposite(anchor))) + " samples, top_k = " +
                                  std::to_string(top_k));
    }
  }
}

}  // namespace

void check_cmkic_batch(const BatchLabels& labels, Index top_k) {
  check_labels(labels, labels.size());
  check_direction(labels, Modality::kVis, top_k);
  check_direction(labels, Modality::kIr, top_k);
}

template <typename Scalar>
std::vector<Index> select_key_instances(const Vector<Scalar>& anchor, const RowMatrix<Scalar>& candidates,
                                        const std::vector<Index>& candidate_ids, Index anchor_id, Index top_k) {
  require(top_k >= 1, "select_key_instances: top_k must be >= 1");
  require(static_cast<Index>(candidate_ids.size()) == candidates.rows(),
          "select_key_instances: one id per candidate required");
  const Vector<Scalar> sims = candidates * anchor;
  std::vector<Index> same;
  for (Index j = 0; j < candidates.rows(); ++j) {
    if (candidate_ids[static_cast<size_t>(j)] == anchor_id) same.push_back(j);
  }
  if (static_cast<Index>(same.size()) < top_k) {
    throw std::invalid_argument("select_key_instances: identity " + std::to_string(anchor_id) + " has " +
                                std::to_string(same.size()) + " candidates, top_k = " + std::to_string(top_k));
  }
  std::stable_sort(same.begin(), same.end(), [&sims](Index a, Index b) { return sims[a] < sims[b]; });
  same.resize(static_cast<size_t>(top_k));
  return same;
}

template <typename Scalar>
LossValue<Scalar> cmkic_directional(const RowMatrix<Scalar>& z, const BatchLabels& labels, Modality anchor_modality,
                                    const LossConfig& cfg) {
  cfg.validate();
  check_labels(labels, z.rows());
  std::vector<Index> anchors, others, other_ids;
  for (Index i = 0; i < z.rows(); ++i) {
    const auto s = static_cast<size_t>(i);
    if (labels.modality[s] == anchor_modality) {
      anchors.push_back(i);
    } else {
      others.push_back(i);
      other_ids.push_back(labels.person_id[s]);
    }
  }
  if (anchors.empty()) {
    throw std::invalid_argument("CMKIC: no " + std::string(to_string(anchor_modality)) + " anchors in the batch");
  }
  check_direction(labels, anchor_modality, cfg.top_k);

  RowMatrix<Scalar> candidates(static_cast<Index>(others.size()), z.cols());
  for (size_t j = 0; j < others.size(); ++j) candidates.row(static_cast<Index>(j)) = z.row(others[j]);

  const Scalar inv_tau = Scalar(1) / static_cast<Scalar>(cfg.tau);
  const Scalar inv_k = Scalar(1) / static_cast<Scalar>(cfg.top_k);
  const Scalar anchor_weight = cfg.cmkic_mean ? Scalar(1) / static_cast<Scalar>(anchors.size()) : Scalar(1);
  LossValue<Scalar> out;
  out.grad = RowMatrix<Scalar>::Zero(z.rows(), z.cols());
  RowMatrix<Scalar> grad_candidates = RowMatrix<Scalar>::Zero(candidates.rows(), candidates.cols());

  for (Index i : anchors) {
    const Index id = labels.person_id[static_cast<size_t>(i)];
    const Vector<Scalar> zi = z.row(i).transpose();
    const std::vector<Index> keys = select_key_instances(zi, candidates, other_ids, id, cfg.top_k);

    // A(i): different-id candidates plus the key instances.
    std::vector<Index> denominator_set;
    std::vector<bool> is_key(others.size(), false);
    for (Index k : keys) is_key[static_cast<size_t>(k)] = true;
    for (size_t j = 0; j < others.size(); ++j) {
      if (other_ids[j] != id || is_key[j]) denominator_set.push_back(static_cast<Index>(j));
    }
    Vector<Scalar> logits(static_cast<Index>(denominator_set.size()));
    for (size_t a = 0; a < denominator_set.size(); ++a) {
      logits[static_cast<Index>(a)] = candidates.row(denominator_set[a]).dot(zi) * inv_tau;
    }
    const Scalar peak = logits.maxCoeff();
    const Vector<Scalar> weights = (logits.array() - peak).exp();
    const Scalar lse = peak + std::log(weights.sum());
    const Vector<Scalar> softmax = weights / weights.sum();

    Scalar positive_mean = 0;
    for (Index k : keys) positive_mean += candidates.row(k).dot(zi) * inv_tau;
    positive_mean *= inv_k;
    out.value += anchor_weight * (lse - positive_mean);

    // d/ds_a = softmax_a - [a is key] / K, with s_a = z_i . z_a / tau.
    Vector<Scalar> coeff = softmax;
    for (size_t a = 0; a < denominator_set.size(); ++a) {
      if (is_key[static_cast<size_t>(denominator_set[a])]) coeff[static_cast<Index>(a)] -= inv_k;
    }
    coeff *= anchor_weight * inv_tau;
    for (size_t a = 0; a < denominator_set.size(); ++a) {
      const Index j = denominator_set[a];
      out.grad.row(i) += coeff[static_cast<Index>(a)] * candidates.row(j);
      grad_candidates.row(j) += coeff[static_cast<Index>(a)] * zi.transpose();
    }
  }
  for (size_t j = 0; j < others.size(); ++j) out.grad.row(others[j]) += grad_candidates.row(static_cast<Index>(j));
  return out;
}

template <typename Scalar>
LossValue<Scalar> cmkic_loss(const RowMatrix<Scalar>& z, const BatchLabels& labels, const LossConfig& cfg) {
  const LossValue<Scalar> vi = cmkic_directional(z, labels, Modality::kVis, cfg);
  const LossValue<Scalar> iv = cmkic_directional(z, labels, Modality::kIr, cfg);
  return {(vi.value + iv.value) / 2, (vi.grad + iv.grad) / 2};
}

template <typename Scalar>
MultiLossValue<Scalar> cls_loss(const std::vector<RowMatrix<Scalar>>& logits, const std::vector<Index>& labels,
                                double label_smoothing) {
  require(!logits.empty(), "cls_loss: no logit sets");
  const Scalar eps = static_cast<Scalar>(label_smoothing);
  const Scalar heads = static_cast<Scalar>(logits.size());
  MultiLossValue<Scalar> out;
  for (const auto& l : logits) {
    require(l.rows() == static_cast<Index>(labels.size()),
            "cls_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(l.rows()) + " rows");
    const Index classes = l.cols();
    const Scalar batch = static_cast<Scalar>(l.rows());
    RowMatrix<Scalar> grad(l.rows(), classes);
    Scalar total = 0;
    for (Index i = 0; i < l.rows(); ++i) {
      const Index y = labels[static_cast<size_t>(i)];
      if (y < 0 || y >= classes) {
        throw std::invalid_argument("cls_loss: label " + std::to_string(y) + " outside [0, " +
                                    std::to_string(classes) + ")");
      }
      const Scalar peak = l.row(i).maxCoeff();
      const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> w = (l.row(i).array() - peak).exp();
      const Scalar lse = peak + std::log(w.sum());
      const Scalar nll_true = lse - l(i, y);
      const Scalar nll_uniform = lse - l.row(i).mean();
      total += (Scalar(1) - eps) * nll_true + eps * nll_uniform;
      grad.row(i) = w / w.sum();
      grad.row(i).array() -= eps / static_cast<Scalar>(classes);
      grad(i, y) -= Scalar(1) - eps;
    }
    out.value += total / batch / heads;
    out.grads.push_back(grad / (batch * heads));
  }
  return out;
}

template <typename Scalar>
LossValue<Scalar> triplet_batch_hard(const RowMatrix<Scalar>& features, const std::vector<Index>& ids,
                                     double margin) {
  const Index n = features.rows();
  require(static_cast<Index>(ids.size()) == n, "triplet: one id per feature row required");
  LossValue<Scalar> out;
  out.grad = RowMatrix<Scalar>::Zero(n, features.cols());
  RowMatrix<Scalar> dist = RowMatrix<Scalar>::Zero(n, n);
  for (Index a = 0; a < n; ++a) {
    for (Index b = a + 1; b < n; ++b) dist(a, b) = dist(b, a) = (features.row(a) - features.row(b)).norm();
  }
  for (Index a = 0; a < n; ++a) {
    Index pos = -1, neg = -1;
    for (Index b = 0; b < n; ++b) {
      if (b == a) continue;
      if (ids[static_cast<size_t>(b)] == ids[static_cast<size_t>(a)]) {
        if (pos < 0 || dist(a, b) > dist(a, pos)) pos = b;
      } else if (neg < 0 || dist(a, b) < dist(a, neg)) {
        neg = b;
      }
    }
    if (pos < 0 || neg < 0) {
      throw std::invalid_argument("triplet: identity " + std::to_string(ids[static_cast<size_t>(a)]) +
                                  (pos < 0 ? " has a single sample" : " has no negatives in the batch"));
    }
    const Scalar hinge = static_cast<Scalar>(margin) + dist(a, pos) - dist(a, neg);
    if (hinge <= Scalar(0)) continue;
    out.value += hinge;
    auto unit = [&](Index u, Index v) -> Eigen::Matrix<Scalar, 1, Eigen::Dynamic> {
      const Scalar d = dist(u, v);
      if (d == Scalar(0)) return Eigen::Matrix<Scalar, 1, Eigen::Dynamic>::Zero(features.cols());
      return (features.row(u) - features.row(v)) / d;
    };
    const auto up = unit(a, pos), un = unit(a, neg);
    out.grad.row(a) += up - un;
    out.grad.row(pos) -= up;
    out.grad.row(neg) += un;
  }
  out.value /= static_cast<Scalar>(n);
  out.grad /= static_cast<Scalar>(n);
  return out;
}

template <typename Scalar>
IdLossP4<Scalar> id_loss_p4(const RowMatrix<Scalar>& qg, const std::vector<RowMatrix<Scalar>>& logits,
                            const std::vector<Index>& ids, const LossConfig& cfg) {
  const MultiLossValue<Scalar> cls = cls_loss(logits, ids, cfg.label_smoothing);
  const LossValue<Scalar> tri = triplet_batch_hard(qg, ids, cfg.triplet_margin);
  IdLossP4<Scalar> out;
  out.cls = cls.value;
  out.triplet = tri.value;
  out.value = cls.value + tri.value;
  out.logit_grads = cls.grads;
  out.global_grad = tri.grad;
  return out;
}

double total_loss(double cls5, double cmkic5, double id4, const LossConfig& cfg) {
  if (!std::isfinite(cls5) || !std::isfinite(cmkic5) || !std::isfinite(id4)) {
    throw std::domain_error("non-finite loss term: cls_p5=" + std::to_string(cls5) +
                            " cmkic_p5=" + std::to_string(cmkic5) + " id_p4=" + std::to_string(id4));
  }
  return cls5 + cfg.lambda1 * cmkic5 + cfg.lambda2 * id4;
}

#define WRIM_INSTANTIATE(T)                                                                               \
  template std::vector<Index> select_key_instances<T>(const Vector<T>&, const RowMatrix<T>&,             \
                                                      const std::vector<Index>&, Index, Index);          \
  template LossValue<T> cmkic_directional<T>(const RowMatrix<T>&, const BatchLabels&, Modality,          \
                                             const LossConfig&);                                          \
  template LossValue<T> cmkic_loss<T>(const RowMatrix<T>&, const BatchLabels&, const LossConfig&);       \
  template MultiLossValue<T> cls_loss<T>(const std::vector<RowMatrix<T>>&, const std::vector<Index>&,    \
                                         double);                                                         \
  template LossValue<T> triplet_batch_hard<T>(const RowMatrix<T>&, const std::vector<Index>&, double);   \
  template IdLossP4<T> id_loss_p4<T>(const RowMatrix<T>&, const std::vector<RowMatrix<T>>&,              \
                                     const std::vector<Index>&, const LossConfig&);

WRIM_INSTANTIATE(float)
WRIM_INSTANTIATE(double)

}  // namespace wrim
