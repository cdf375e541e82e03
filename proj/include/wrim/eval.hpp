#pragma once

#include "wrim/data.hpp"
#include "wrim/wrimnet.hpp"

#include "json.hpp"

#include <set>
#include <string>
#include <vector>

namespace wrim {

enum class SearchMode { kAllSearch, kIndoorSearch, kSymmetric };
enum class Direction { kVis2Ir, kIr2Vis };

std::string_view to_string(SearchMode m);
std::string_view to_string(Direction d);
SearchMode parse_search_mode(std::string_view s);
Direction parse_direction(std::string_view s);

struct EvalProtocol {
  SearchMode mode = SearchMode::kAllSearch;
  Index shot = 1;  // gallery images per identity per camera: 1 or 10
  Index trials = 10;
  /// Used by SYMMETRIC only; the search modes always query IR against VIS.
  Direction direction = Direction::kIr2Vis;
  std::set<Index> indoor_cameras{1, 2};

  void validate() const;
};

struct TrialMetrics {
  std::vector<double> cmc;  // hit rate at ranks 1..gallery size
  double map = 0.0;
  Index queries = 0;  // queries with at least one gallery match
  Index skipped = 0;  // queries without any
};

struct EvalResult {
  std::vector<double> cmc;  // element-wise mean over trials, shortest length
  double map = 0.0;
  std::vector<TrialMetrics> per_trial;

  double rank(Index k) const { return cmc.at(static_cast<size_t>(std::min<Index>(k, std::ssize(cmc)) - 1)); }
};

/// Concatenation of the post-BNNeck features (Rg, R_1..R_N, Qg, Q_1..Q_M)
/// scaled to unit L2 norm. A zero vector stays zero.
template <typename Scalar>
Vector<Scalar> inference_feature(const FeatureBundle<Scalar>& bundle);

/// Batched form: one row per sample.
template <typename Scalar>
RowMatrix<Scalar> inference_features(const BatchFeatures<Scalar>& features);

/// Ranks the gallery for every query by descending dot product, breaking
/// ties by gallery index. Camera ids are validated but no entries are
/// excluded. Throws std::invalid_argument on size mismatches or an empty
/// gallery.
template <typename Scalar>
TrialMetrics compute_cmc_map(const RowMatrix<Scalar>& query, const std::vector<Index>& query_ids,
                             const std::vector<Index>& query_cams, const RowMatrix<Scalar>& gallery,
                             const std::vector<Index>& gallery_ids, const std::vector<Index>& gallery_cams);

/// Record indices forming one query/gallery trial.
struct ProtocolSplit {
  std::vector<Index> query, gallery;
};

/// Search modes: query = every IR record; gallery = for each identity and
/// each eligible VIS camera (ascending), `shot` records drawn without
/// replacement (all of them when fewer exist), from an mt19937_64 seeded with
/// mix_seed(seed, trial). Symmetric mode yields a single trial of all source
/// records against all target records. Throws std::invalid_argument when a
/// query identity has no eligible gallery record.
std::vector<ProtocolSplit> protocol_splits(const Manifest& manifest, const EvalProtocol& protocol, std::uint64_t seed);

/// Evaluates precomputed per-record features (one row per manifest record).
template <typename Scalar>
EvalResult evaluate_features(const RowMatrix<Scalar>& features, const Manifest& manifest,
                             const EvalProtocol& protocol, std::uint64_t seed);

/// Eval-mode inference features for every record of the manifest.
template <typename Scalar>
RowMatrix<Scalar> extract_features(WrimNet<Scalar>& model, const Manifest& manifest, ImageCache& cache,
                                   Index batch_size, int workers);

template <typename Scalar>
EvalResult run_protocol(WrimNet<Scalar>& model, const Manifest& manifest, ImageCache& cache,
                        const EvalProtocol& protocol, std::uint64_t seed, Index batch_size = 32, int workers = 1);

nlohmann::json report_json(const EvalResult& result, const EvalProtocol& protocol);
/// Rank-1 / Rank-10 / Rank-20 / mAP in percent.
std::string report_table(const EvalResult& result, const EvalProtocol& protocol);

}  // namespace wrim
