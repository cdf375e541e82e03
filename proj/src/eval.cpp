#include "wrim/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace wrim {

std::string_view to_string(SearchMode m) {
  switch (m) {
    case SearchMode::kAllSearch:
      return "all_search";
    case SearchMode::kIndoorSearch:
      return "indoor_search";
    case SearchMode::kSymmetric:
      return "symmetric";
  }
  return "?";
}

std::string_view to_string(Direction d) { return d == Direction::kVis2Ir ? "VIS2IR" : "IR2VIS"; }

SearchMode parse_search_mode(std::string_view s) {
  for (SearchMode m : {SearchMode::kAllSearch, SearchMode::kIndoorSearch, SearchMode::kSymmetric}) {
    if (s == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown search mode '" + std::string(s) +
                              "', expected all_search, indoor_search or symmetric");
}

Direction parse_direction(std::string_view s) {
  if (s == "VIS2IR") return Direction::kVis2Ir;
  if (s == "IR2VIS") return Direction::kIr2Vis;
  throw std::invalid_argument("unknown direction '" + std::string(s) + "', expected VIS2IR or IR2VIS");
}

void EvalProtocol::validate() const {
  require(shot == 1 || shot == 10, "EvalProtocol: shot must be 1 or 10, got " + std::to_string(shot));
  require(trials >= 1, "EvalProtocol: trials must be >= 1");
  require(mode != SearchMode::kIndoorSearch || !indoor_cameras.empty(), "EvalProtocol: indoor_cameras is empty");
}

// ---------------------------------------------------------------- features

template <typename Scalar>
Vector<Scalar> inference_feature(const FeatureBundle<Scalar>& bundle) {
  Index width = 0;
  for (const auto& v : bundle.neck) width += v.size();
  Vector<Scalar> out(width);
  Index at = 0;
  for (const auto& v : bundle.neck) {
    out.segment(at, v.size()) = v;
    at += v.size();
  }
  const Scalar norm = out.norm();
  if (norm > Scalar(0)) out /= norm;
  return out;
}

template <typename Scalar>
RowMatrix<Scalar> inference_features(const BatchFeatures<Scalar>& features) {
  Index width = 0;
  for (const auto* group : {&features.neck_p5, &features.neck_p4}) {
    for (const auto& m : *group) width += m.cols();
  }
  RowMatrix<Scalar> out(features.batch(), width);
  Index at = 0;
  for (const auto* group : {&features.neck_p5, &features.neck_p4}) {
    for (const auto& m : *group) {
      out.middleCols(at, m.cols()) = m;
      at += m.cols();
    }
  }
  for (Index i = 0; i < out.rows(); ++i) {
    const Scalar norm = out.row(i).norm();
    if (norm > Scalar(0)) out.row(i) /= norm;
  }
  return out;
}

// ---------------------------------------------------------------- metrics

template <typename Scalar>
TrialMetrics compute_cmc_map(const RowMatrix<Scalar>& query, const std::vector<Index>& query_ids,
                             const std::vector<Index>& query_cams, const RowMatrix<Scalar>& gallery,
                             const std::vector<Index>& gallery_ids, const std::vector<Index>& gallery_cams) {
  require(gallery.rows() > 0, "compute_cmc_map: empty gallery");
  require(query.cols() == gallery.cols(), "compute_cmc_map: query width " + std::to_string(query.cols()) +
                                              " != gallery width " + std::to_string(gallery.cols()));
  require(std::ssize(query_ids) == query.rows() && std::ssize(query_cams) == query.rows(),
          "compute_cmc_map: query labels do not match the query rows");
  require(std::ssize(gallery_ids) == gallery.rows() && std::ssize(gallery_cams) == gallery.rows(),
          "compute_cmc_map: gallery labels do not match the gallery rows");

  const Index g = gallery.rows();
  const RowMatrix<Scalar> scores = query * gallery.transpose();
  TrialMetrics out;
  out.cmc.assign(static_cast<size_t>(g), 0.0);
  std::vector<double> first_hits(static_cast<size_t>(g), 0.0);
  double ap_sum = 0.0;
  std::vector<Index> order(static_cast<size_t>(g));
  for (Index q = 0; q < query.rows(); ++q) {
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return scores(q, a) > scores(q, b); });
    Index matches = 0;
    double precision_sum = 0.0;
    for (Index r = 0; r < g; ++r) {
      if (gallery_ids[static_cast<size_t>(order[static_cast<size_t>(r)])] != query_ids[static_cast<size_t>(q)]) {
        continue;
      }
      if (matches == 0) first_hits[static_cast<size_t>(r)] += 1.0;
      ++matches;
      precision_sum += static_cast<double>(matches) / static_cast<double>(r + 1);
    }
    if (matches == 0) {
      ++out.skipped;
      continue;
    }
    ++out.queries;
    ap_sum += precision_sum / static_cast<double>(matches);
  }
  if (out.queries == 0) return out;
  const double n = static_cast<double>(out.queries);
  std::partial_sum(first_hits.begin(), first_hits.end(), out.cmc.begin());
  for (double& c : out.cmc) c /= n;
  out.map = ap_sum / n;
  return out;
}

// ---------------------------------------------------------------- protocols

std::vector<ProtocolSplit> protocol_splits(const Manifest& manifest, const EvalProtocol& protocol,
                                           std::uint64_t seed) {
  protocol.validate();
  const auto& records = manifest.records;
  Modality source = Modality::kIr, target = Modality::kVis;
  if (protocol.mode == SearchMode::kSymmetric && protocol.direction == Direction::kVis2Ir) {
    std::swap(source, target);
  }
  const bool indoor = protocol.mode == SearchMode::kIndoorSearch;

  std::vector<Index> query;
  // person id -> camera -> candidate gallery records, in manifest order
  std::map<Index, std::map<Index, std::vector<Index>>> pool;
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.modality == source) {
      query.push_back(static_cast<Index>(i));
    } else if (!indoor || protocol.indoor_cameras.count(r.camera_id)) {
      pool[r.person_id][r.camera_id].push_back(static_cast<Index>(i));
    }
  }
  for (Index q : query) {
    const Index id = records[static_cast<size_t>(q)].person_id;
    if (!pool.count(id)) {
      throw std::invalid_argument("identity " + std::to_string(id) + " has no " + std::string(to_string(target)) +
                                  " gallery images" + (indoor ? " on indoor cameras" : ""));
    }
  }

  if (protocol.mode == SearchMode::kSymmetric) {
    ProtocolSplit s{query, {}};
    for (size_t i = 0; i < records.size(); ++i) {
      if (records[i].modality == target) s.gallery.push_back(static_cast<Index>(i));
    }
    return {s};
  }

  std::vector<ProtocolSplit> splits;
  for (Index t = 0; t < protocol.trials; ++t) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(t)));
    ProtocolSplit s{query, {}};
    for (const auto& [id, cams] : pool) {
      for (const auto& [cam, candidates] : cams) {
        std::vector<Index> pick = candidates;
        std::shuffle(pick.begin(), pick.end(), rng);
        pick.resize(static_cast<size_t>(std::min<Index>(protocol.shot, std::ssize(pick))));
        s.gallery.insert(s.gallery.end(), pick.begin(), pick.end());
      }
    }
    std::sort(s.gallery.begin(), s.gallery.end());
    splits.push_back(std::move(s));
  }
  return splits;
}

template <typename Scalar>
EvalResult evaluate_features(const RowMatrix<Scalar>& features, const Manifest& manifest,
                             const EvalProtocol& protocol, std::uint64_t seed) {
  require(features.rows() == std::ssize(manifest.records), "evaluate_features: " + std::to_string(features.rows()) +
                                                               " feature rows for " +
                                                               std::to_string(manifest.records.size()) + " records");
  const auto select = [&](const std::vector<Index>& idx, RowMatrix<Scalar>& f, std::vector<Index>& ids,
                          std::vector<Index>& cams) {
    f.resize(std::ssize(idx), features.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
      const auto& r = manifest.records[static_cast<size_t>(idx[i])];
      f.row(static_cast<Index>(i)) = features.row(idx[i]);
      ids.push_back(r.person_id);
      cams.push_back(r.camera_id);
    }
  };
  EvalResult result;
  for (const auto& split : protocol_splits(manifest, protocol, seed)) {
    RowMatrix<Scalar> qf, gf;
    std::vector<Index> qid, qcam, gid, gcam;
    select(split.query, qf, qid, qcam);
    select(split.gallery, gf, gid, gcam);
    result.per_trial.push_back(compute_cmc_map(qf, qid, qcam, gf, gid, gcam));
  }
  size_t ranks = result.per_trial.front().cmc.size();
  for (const auto& t : result.per_trial) ranks = std::min(ranks, t.cmc.size());
  result.cmc.assign(ranks, 0.0);
  for (const auto& t : result.per_trial) {
    for (size_t k = 0; k < ranks; ++k) result.cmc[k] += t.cmc[k];
    result.map += t.map;
  }
  const double n = static_cast<double>(result.per_trial.size());
  for (double& c : result.cmc) c /= n;
  result.map /= n;
  return result;
}

template <typename Scalar>
RowMatrix<Scalar> extract_features(WrimNet<Scalar>& model, const Manifest& manifest, ImageCache& cache,
                                   Index batch_size, int workers) {
  require(batch_size >= 1, "extract_features: batch_size must be >= 1");
  const Index n = std::ssize(manifest.records);
  RowMatrix<Scalar> out;
  for (Index start = 0; start < n; start += batch_size) {
    std::vector<Index> idx(static_cast<size_t>(std::min(batch_size, n - start)));
    std::iota(idx.begin(), idx.end(), start);
    std::vector<Modality> modality;
    for (Index i : idx) modality.push_back(manifest.records[static_cast<size_t>(i)].modality);
    const auto images = load_batch<Scalar>(manifest, idx, cache, false, 0, AugmentConfig{}, workers);
    const auto feats = inference_features(model.forward(images, modality, Mode::kEval));
    if (out.size() == 0) out.resize(n, feats.cols());
    out.middleRows(start, feats.rows()) = feats;
  }
  return out;
}

template <typename Scalar>
EvalResult run_protocol(WrimNet<Scalar>& model, const Manifest& manifest, ImageCache& cache,
                        const EvalProtocol& protocol, std::uint64_t seed, Index batch_size, int workers) {
  protocol.validate();
  return evaluate_features(extract_features(model, manifest, cache, batch_size, workers), manifest, protocol, seed);
}

// ---------------------------------------------------------------- reports

nlohmann::json report_json(const EvalResult& result, const EvalProtocol& protocol) {
  nlohmann::json per_trial = nlohmann::json::array();
  for (const auto& t : result.per_trial) {
    per_trial.push_back({{"cmc", t.cmc}, {"map", t.map}, {"queries", t.queries}, {"skipped", t.skipped}});
  }
  nlohmann::json j{{"protocol", to_string(protocol.mode)},
                   {"shot", protocol.shot},
                   {"trials", result.per_trial.size()},
                   {"cmc", result.cmc},
                   {"map", result.map},
                   {"per_trial", per_trial}};
  if (protocol.mode == SearchMode::kSymmetric) j["direction"] = to_string(protocol.direction);
  return j;
}

std::string report_table(const EvalResult& result, const EvalProtocol& protocol) {
  std::string setting = std::string(to_string(protocol.mode));
  if (protocol.mode == SearchMode::kSymmetric) {
    setting += " " + std::string(to_string(protocol.direction));
  } else {
    setting += protocol.shot == 1 ? " single-shot" : " multi-shot";
  }
  char line[160];
  std::ostringstream out;
  std::snprintf(line, sizeof line, "%-28s %8s %8s %8s %8s\n", "Setting", "Rank-1", "Rank-10", "Rank-20", "mAP");
  out << line;
  std::snprintf(line, sizeof line, "%-28s %8.2f %8.2f %8.2f %8.2f\n", setting.c_str(), 100.0 * result.rank(1),
                100.0 * result.rank(10), 100.0 * result.rank(20), 100.0 * result.map);
  out << line;
  return out.str();
}

#define WRIM_INSTANTIATE(S)                                                                                        \
  template Vector<S> inference_feature(const FeatureBundle<S>&);                                                   \
  template RowMatrix<S> inference_features(const BatchFeatures<S>&);                                               \
  template TrialMetrics compute_cmc_map(const RowMatrix<S>&, const std::vector<Index>&, const std::vector<Index>&, \
                                        const RowMatrix<S>&, const std::vector<Index>&, const std::vector<Index>&); \
  template EvalResult evaluate_features(const RowMatrix<S>&, const Manifest&, const EvalProtocol&, std::uint64_t); \
  template RowMatrix<S> extract_features(WrimNet<S>&, const Manifest&, ImageCache&, Index, int);                   \
  template EvalResult run_protocol(WrimNet<S>&, const Manifest&, ImageCache&, const EvalProtocol&, std::uint64_t,  \
                                   Index, int);

WRIM_INSTANTIATE(float)
WRIM_INSTANTIATE(double)

}  // namespace wrim
