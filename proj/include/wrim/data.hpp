#pragma once

#include "wrim/losses.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace wrim {

struct ManifestRecord {
  std::string image_path;  // resolved against the manifest directory
  Index person_id = 0;     // as written in the file
  Index camera_id = 0;
  Modality modality = Modality::kVis;
};

struct Manifest {
  std::vector<ManifestRecord> records;
  /// Original person id -> dense label in [0, num_classes), assigned in
  /// ascending id order.
  std::map<Index, Index> id_map;

  Index num_classes() const { return static_cast<Index>(id_map.size()); }
  Index label(size_t record) const { return id_map.at(records.at(record).person_id); }
  std::vector<Index> labels() const;
  BatchLabels batch_labels(const std::vector<Index>& indices) const;
};

/// JSON-lines, one object per line with exactly the keys image_path,
/// person_id, camera_id, modality. Blank lines and a leading {"header": ...}
/// line are skipped. Relative paths resolve against the manifest directory.
/// Throws std::runtime_error naming the line on malformed input, and on
/// missing image files when `check_paths`.
Manifest load_manifest(const std::string& path, bool check_paths = true);

struct SamplerConfig {
  Index p_ids = 8;
  Index k_per_modality = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Identity-balanced batches of p_ids x (k VIS + k IR) record indices.
/// Identities are shuffled per (seed, epoch) and chunked; the last chunk is
/// topped up with other identities so every batch is full. Identities short
/// of k images in a modality are resampled with replacement. Throws
/// std::invalid_argument when an identity lacks a modality entirely or when
/// there are fewer than p_ids identities.
std::vector<std::vector<Index>> make_pk_batches(const Manifest& manifest, const SamplerConfig& cfg, Index epoch);

struct AugmentConfig {
  bool flip = true;
  bool pad_crop = true;
  Index pad = 10;
  bool erasing = true;
  double erasing_probability = 0.5;
};

/// Per-channel normalisation constants (RGB).
inline constexpr double kImageMean[3] = {0.485, 0.456, 0.406};
inline constexpr double kImageStd[3] = {0.229, 0.224, 0.225};

/// Decodes an image as RGB, resizes it to height x width (bilinear) and scales
/// it to [0, 1]. Grayscale files are replicated to three channels. Throws
/// std::runtime_error when the file cannot be decoded.
Tensor<float> load_unit_image(const std::string& path, Index height, Index width);

template <typename Scalar>
Tensor<Scalar> normalize_image(const Tensor<float>& unit);

/// Horizontal mirror of a [3, H, W] tensor.
template <typename Scalar>
Tensor<Scalar> flip_horizontal(const Tensor<Scalar>& image);

/// Training augmentation on a [0, 1] image followed by normalisation:
/// flip (p = 0.5), zero-pad + random crop, random erasing with value 0 in
/// normalised space. Deterministic given `seed`.
template <typename Scalar>
Tensor<Scalar> augment_and_normalize(const Tensor<float>& unit, const AugmentConfig& cfg, std::uint64_t seed);

/// Full preprocessing of one file to [3, height, width].
template <typename Scalar>
Tensor<Scalar> preprocess(const std::string& path, Index height, Index width, bool train, std::uint64_t seed,
                          const AugmentConfig& cfg = {});

/// Decoded [0, 1] images kept in memory, keyed by path.
class ImageCache {
 public:
  ImageCache(Index height, Index width) : height_(height), width_(width) {}
  const Tensor<float>& get(const std::string& path);
  /// Decodes all paths up front, in parallel over `workers` threads.
  void preload(const std::vector<std::string>& paths, int workers);

 private:
  Index height_, width_;
  std::map<std::string, Tensor<float>> images_;
};

/// Stacks preprocessed images of the given records into [B, 3, H, W].
/// Sample i uses seed mix(seed, i), so results do not depend on `workers`.
template <typename Scalar>
Tensor<Scalar> load_batch(const Manifest& manifest, const std::vector<Index>& indices, ImageCache& cache, bool train,
                          std::uint64_t seed, const AugmentConfig& cfg, int workers);

/// Number of preprocessing threads from WRIM_NUM_WORKERS (default 1).
int worker_count_from_env();

/// SplitMix64 step, used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

// ---------------------------------------------------------------- synthetic data

enum class Holdout { kImages, kIdentities };

struct SynthConfig {
  Index num_ids = 20;
  Index per_id = 10;  // images per identity per modality
  Index height = 128;
  Index width = 48;
  std::uint64_t seed = 0;
  /// What test.jsonl holds out: the last `test_per_id` images of every
  /// identity and modality, or the last `test_ids` identities.
  Holdout holdout = Holdout::kImages;
  Index test_per_id = 4;
  Index test_ids = 10;

  void validate() const;
};

/// Latent description of one synthetic identity.
struct SynthIdentity {
  static constexpr int kParts = 4;
  double part_height[kParts];   // fractions of the body height, sum to 1
  double part_width[kParts];    // fractions of the image width
  int pattern[kParts];          // 0 plain, 1 horizontal stripes, 2 vertical stripes, 3 checks
  double frequency[kParts];     // pattern period in pixels at unit scale
  double color[kParts][3];      // VIS base colour
  double emission[kParts];      // IR base intensity
  double contrast[kParts];      // pattern amplitude, shared by both modalities

  /// Vector of the shape and pattern parameters used for separation checks.
  std::vector<double> signature() const;
};

std::vector<SynthIdentity> draw_identities(Index count, std::uint64_t seed);

/// Renders one image (RGB, 8-bit, [H, W, 3] row-major).
std::vector<std::uint8_t> render_synthetic(const SynthIdentity& id, Modality modality, Index camera, Index height,
                                           Index width, std::uint64_t seed);

/// Writes PNGs plus manifest.jsonl (all images), train.jsonl and test.jsonl.
/// Each manifest starts with a header line echoing the configuration.
/// Returns the path of manifest.jsonl.
std::string generate_synthetic_dataset(const SynthConfig& cfg, const std::string& out_dir);

}  // namespace wrim
