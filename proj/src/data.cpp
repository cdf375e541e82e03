#include "wrim/data.hpp"

#include "json.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <thread>

namespace wrim {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

int worker_count_from_env() {
  const char* v = std::getenv("WRIM_NUM_WORKERS");
  if (v == nullptr || *v == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 256) {
    throw std::invalid_argument("WRIM_NUM_WORKERS must be an integer in [1, 256], got '" + std::string(v) + "'");
  }
  return static_cast<int>(n);
}

namespace {

// Runs fn(i) for i in [0, n) on up to `workers` threads.
template <typename Fn>
void parallel_for(Index n, int workers, Fn fn) {
  const int threads = static_cast<int>(std::min<Index>(std::max(workers, 1), std::max<Index>(n, 1)));
  if (threads <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (Index i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[static_cast<size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

// ---------------------------------------------------------------- manifest

std::vector<Index> Manifest::labels() const {
  std::vector<Index> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(id_map.at(r.person_id));
  return out;
}

BatchLabels Manifest::batch_labels(const std::vector<Index>& indices) const {
  BatchLabels out;
  for (Index i : indices) {
    const auto& r = records.at(static_cast<size_t>(i));
    out.person_id.push_back(id_map.at(r.person_id));
    out.modality.push_back(r.modality);
  }
  return out;
}

Manifest load_manifest(const std::string& path, bool check_paths) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path);
  const fs::path base = fs::path(path).parent_path();
  Manifest m;
  std::string line;
  Index line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fail = [&](const std::string& what) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + what);
    };
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) fail("expected a JSON object");
    if (first && j.size() == 1 && j.contains("header")) {
      first = false;
      continue;
    }
    first = false;
    for (const auto& [key, value] : j.items()) {
      if (key != "image_path" && key != "person_id" && key != "camera_id" && key != "modality") {
        fail("unexpected key '" + key + "'");
      }
    }
    for (const char* key : {"image_path", "person_id", "camera_id", "modality"}) {
      if (!j.contains(key)) fail(std::string("missing key '") + key + "'");
    }
    if (!j["image_path"].is_string()) fail("image_path must be a string");
    if (!j["person_id"].is_number_integer() || j["person_id"].get<std::int64_t>() < 0) {
      fail("person_id must be a non-negative integer");
    }
    if (!j["camera_id"].is_number_integer() || j["camera_id"].get<std::int64_t>() < 0) {
      fail("camera_id must be a non-negative integer");
    }
    if (!j["modality"].is_string()) fail("modality must be a string");
    ManifestRecord r;
    try {
      r.modality = parse_modality(j["modality"].get<std::string>());
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
    const fs::path image = j["image_path"].get<std::string>();
    r.image_path = (image.is_absolute() ? image : base / image).lexically_normal().string();
    if (check_paths && !fs::exists(r.image_path)) fail("image not found: " + r.image_path);
    r.person_id = j["person_id"].get<Index>();
    r.camera_id = j["camera_id"].get<Index>();
    m.records.push_back(std::move(r));
  }
  for (const auto& r : m.records) m.id_map.emplace(r.person_id, 0);
  Index next = 0;
  for (auto& [id, label] : m.id_map) label = next++;
  return m;
}

// ---------------------------------------------------------------- sampler

void SamplerConfig::validate() const {
  require(p_ids >= 1, "SamplerConfig: p_ids must be >= 1");
  require(k_per_modality >= 1, "SamplerConfig: k_per_modality must be >= 1");
}

std::vector<std::vector<Index>> make_pk_batches(const Manifest& manifest, const SamplerConfig& cfg, Index epoch) {
  cfg.validate();
  std::map<Index, std::array<std::vector<Index>, 2>> pools;
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    pools[r.person_id][static_cast<size_t>(r.modality)].push_back(static_cast<Index>(i));
  }
  for (const auto& [id, pool] : pools) {
    for (Modality m : {Modality::kVis, Modality::kIr}) {
      if (pool[static_cast<size_t>(m)].empty()) {
        throw std::invalid_argument("identity " + std::to_string(id) + " has no " + std::string(to_string(m)) +
                                    " images; cannot train on this manifest");
      }
    }
  }
  const Index n_ids = static_cast<Index>(pools.size());
  if (n_ids < cfg.p_ids) {
    throw std::invalid_argument("sampler needs " + std::to_string(cfg.p_ids) + " identities per batch, manifest has " +
                                std::to_string(n_ids));
  }
  Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
  std::vector<Index> ids;
  for (const auto& [id, pool] : pools) ids.push_back(id);
  std::shuffle(ids.begin(), ids.end(), rng);

  std::vector<std::vector<Index>> groups;
  for (Index start = 0; start < n_ids; start += cfg.p_ids) {
    std::vector<Index> group(ids.begin() + start, ids.begin() + std::min(start + cfg.p_ids, n_ids));
    // Top up the last group with identities not already in it.
    std::vector<Index> rest;
    for (Index id : ids) {
      if (std::find(group.begin(), group.end(), id) == group.end()) rest.push_back(id);
    }
    std::shuffle(rest.begin(), rest.end(), rng);
    for (size_t r = 0; static_cast<Index>(group.size()) < cfg.p_ids; ++r) group.push_back(rest[r]);
    groups.push_back(std::move(group));
  }

  std::vector<std::vector<Index>> batches;
  for (const auto& group : groups) {
    std::vector<Index> batch;
    for (Index id : group) {
      for (Modality m : {Modality::kVis, Modality::kIr}) {
        std::vector<Index> pool = pools[id][static_cast<size_t>(m)];
        std::shuffle(pool.begin(), pool.end(), rng);
        for (Index k = 0; k < cfg.k_per_modality; ++k) {
          if (k < static_cast<Index>(pool.size())) {
            batch.push_back(pool[static_cast<size_t>(k)]);
          } else {
            std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
            batch.push_back(pool[pick(rng)]);
          }
        }
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

// ---------------------------------------------------------------- preprocessing

Tensor<float> load_unit_image(const std::string& path, Index height, Index width) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot decode image " + path);
  cv::Mat rgb, resized;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  if (rgb.rows != height || rgb.cols != width) {
    cv::resize(rgb, resized, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0, cv::INTER_LINEAR);
  } else {
    resized = rgb;
  }
  Tensor<float> out({3, height, width});
  for (Index y = 0; y < height; ++y) {
    const auto* row = resized.ptr<cv::Vec3b>(static_cast<int>(y));
    for (Index x = 0; x < width; ++x) {
      for (Index c = 0; c < 3; ++c) out[(c * height + y) * width + x] = row[x][static_cast<int>(c)] / 255.0f;
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> normalize_image(const Tensor<float>& unit) {
  Tensor<Scalar> out(unit.shape());
  const Index plane = unit.dim(1) * unit.dim(2);
  for (Index c = 0; c < 3; ++c) {
    const Scalar mean = static_cast<Scalar>(kImageMean[c]), inv_std = static_cast<Scalar>(1.0 / kImageStd[c]);
    for (Index i = c * plane; i < (c + 1) * plane; ++i) out[i] = (static_cast<Scalar>(unit[i]) - mean) * inv_std;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> flip_horizontal(const Tensor<Scalar>& image) {
  Tensor<Scalar> out(image.shape());
  const Index h = image.dim(1), w = image.dim(2);
  for (Index c = 0; c < image.dim(0); ++c) {
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) out[(c * h + y) * w + x] = image[(c * h + y) * w + (w - 1 - x)];
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> augment_and_normalize(const Tensor<float>& unit, const AugmentConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  Tensor<float> img = unit;
  const Index h = img.dim(1), w = img.dim(2);
  if (cfg.flip && coin(rng) < 0.5) img = flip_horizontal(img);
  if (cfg.pad_crop && cfg.pad > 0) {
    std::uniform_int_distribution<Index> offset(0, 2 * cfg.pad);
    const Index dy = offset(rng) - cfg.pad, dx = offset(rng) - cfg.pad;
    Tensor<float> shifted(img.shape());
    for (Index c = 0; c < 3; ++c) {
      for (Index y = 0; y < h; ++y) {
        const Index sy = y + dy;
        if (sy < 0 || sy >= h) continue;
        for (Index x = 0; x < w; ++x) {
          const Index sx = x + dx;
          if (sx >= 0 && sx < w) shifted[(c * h + y) * w + x] = img[(c * h + sy) * w + sx];
        }
      }
    }
    img = std::move(shifted);
  }
  Tensor<Scalar> out = normalize_image<Scalar>(img);
  if (cfg.erasing && coin(rng) < cfg.erasing_probability) {
    std::uniform_real_distribution<double> area(0.02, 0.4), log_ratio(std::log(0.3), std::log(1.0 / 0.3));
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double target = area(rng) * static_cast<double>(h * w);
      const double ratio = std::exp(log_ratio(rng));
      const auto eh = static_cast<Index>(std::round(std::sqrt(target * ratio)));
      const auto ew = static_cast<Index>(std::round(std::sqrt(target / ratio)));
      if (eh < 1 || ew < 1 || eh >= h || ew >= w) continue;
      const Index y0 = std::uniform_int_distribution<Index>(0, h - eh)(rng);
      const Index x0 = std::uniform_int_distribution<Index>(0, w - ew)(rng);
      for (Index c = 0; c < 3; ++c) {
        for (Index y = y0; y < y0 + eh; ++y) {
          for (Index x = x0; x < x0 + ew; ++x) out[(c * h + y) * w + x] = Scalar(0);
        }
      }
      break;
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> preprocess(const std::string& path, Index height, Index width, bool train, std::uint64_t seed,
                          const AugmentConfig& cfg) {
  const Tensor<float> unit = load_unit_image(path, height, width);
  return train ? augment_and_normalize<Scalar>(unit, cfg, seed) : normalize_image<Scalar>(unit);
}

const Tensor<float>& ImageCache::get(const std::string& path) {
  auto it = images_.find(path);
  if (it == images_.end()) it = images_.emplace(path, load_unit_image(path, height_, width_)).first;
  return it->second;
}

void ImageCache::preload(const std::vector<std::string>& paths, int workers) {
  std::vector<std::string> todo;
  for (const auto& p : paths) {
    if (!images_.count(p) && std::find(todo.begin(), todo.end(), p) == todo.end()) todo.push_back(p);
  }
  std::vector<Tensor<float>> decoded(todo.size());
  parallel_for(static_cast<Index>(todo.size()), workers, [&](Index i) {
    decoded[static_cast<size_t>(i)] = load_unit_image(todo[static_cast<size_t>(i)], height_, width_);
  });
  for (size_t i = 0; i < todo.size(); ++i) images_.emplace(todo[i], std::move(decoded[i]));
}

template <typename Scalar>
Tensor<Scalar> load_batch(const Manifest& manifest, const std::vector<Index>& indices, ImageCache& cache, bool train,
                          std::uint64_t seed, const AugmentConfig& cfg, int workers) {
  std::vector<std::string> paths;
  for (Index i : indices) paths.push_back(manifest.records.at(static_cast<size_t>(i)).image_path);
  cache.preload(paths, workers);
  std::vector<const Tensor<float>*> units;
  for (const auto& p : paths) units.push_back(&cache.get(p));
  const Index n = static_cast<Index>(indices.size());
  const Shape one = units.empty() ? Shape{3, 1, 1} : units.front()->shape();
  Tensor<Scalar> batch({n, one[0], one[1], one[2]});
  const Index per = shape_size(one);
  parallel_for(n, workers, [&](Index i) {
    const Tensor<float>& unit = *units[static_cast<size_t>(i)];
    const Tensor<Scalar> img = train ? augment_and_normalize<Scalar>(unit, cfg, mix_seed(seed, static_cast<std::uint64_t>(i)))
                                     : normalize_image<Scalar>(unit);
    batch.values().segment(i * per, per) = img.values();
  });
  return batch;
}

// ---------------------------------------------------------------- synthetic data

void SynthConfig::validate() const {
  const auto fail = [](const std::string& what) { throw std::invalid_argument("SynthConfig: " + what); };
  if (num_ids < 2) fail("need at least 2 identities");
  if (per_id < 1) fail("per_id must be >= 1");
  if (height < 32 || width < 16) fail("image must be at least 32x16");
  if (holdout == Holdout::kImages && (test_per_id < 0 || test_per_id >= per_id)) {
    fail("test_per_id must lie in [0, per_id)");
  }
  if (holdout == Holdout::kIdentities && (test_ids < 0 || test_ids >= num_ids)) {
    fail("test_ids must lie in [0, num_ids)");
  }
}

std::vector<double> SynthIdentity::signature() const {
  std::vector<double> s;
  for (int p = 0; p < kParts; ++p) {
    s.push_back(part_height[p]);
    s.push_back(part_width[p]);
    s.push_back(pattern[p]);
    s.push_back(frequency[p] / 10.0);
  }
  return s;
}

namespace {

constexpr double kMinSeparation = 0.05;

double linf(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

SynthIdentity draw_identity(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SynthIdentity id{};
  double total = 0.0;
  for (int p = 0; p < SynthIdentity::kParts; ++p) {
    id.part_height[p] = 0.15 + 0.2 * u(rng);
    total += id.part_height[p];
  }
  for (int p = 0; p < SynthIdentity::kParts; ++p) {
    id.part_height[p] /= total;
    id.part_width[p] = 0.3 + 0.55 * u(rng);
    id.pattern[p] = std::uniform_int_distribution<int>(0, 3)(rng);
    id.frequency[p] = 4.0 + 6.0 * u(rng);
    id.contrast[p] = id.pattern[p] == 0 ? 0.0 : 0.35 + 0.25 * u(rng);
    for (double& c : id.color[p]) c = 0.15 + 0.75 * u(rng);
    id.emission[p] = 0.35 + 0.6 * u(rng);
  }
  return id;
}

}  // namespace

std::vector<SynthIdentity> draw_identities(Index count, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x5eed));
  std::vector<SynthIdentity> out;
  while (static_cast<Index>(out.size()) < count) {
    SynthIdentity cand = draw_identity(rng);
    const auto sig = cand.signature();
    bool separated = true;
    for (const auto& other : out) separated = separated && linf(sig, other.signature()) >= kMinSeparation;
    if (separated) out.push_back(cand);
  }
  return out;
}

std::vector<std::uint8_t> render_synthetic(const SynthIdentity& id, Modality modality, Index camera, Index height,
                                           Index width, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.03);
  const double sy = static_cast<double>(height) / 128.0;

  // Pose jitter.
  const double scale = 0.8 + 0.22 * u(rng);
  const double cx = width / 2.0 + (u(rng) - 0.5) * 0.24 * width;
  const double body_h = 0.84 * height * scale;
  const double top = 0.07 * height + (u(rng) - 0.5) * 0.12 * height;
  const double phase_x = u(rng), phase_y = u(rng);

  // Illumination.
  double gain[3];
  const double brightness = 0.75 + 0.45 * u(rng);
  const double cam_tint[3] = {1.0 + 0.12 * std::sin(camera * 1.7), 1.0 + 0.12 * std::sin(camera * 2.9 + 1.0),
                              1.0 + 0.12 * std::sin(camera * 4.1 + 2.0)};
  for (int c = 0; c < 3; ++c) gain[c] = brightness * cam_tint[c];
  double background[3];
  if (modality == Modality::kVis) {
    for (double& b : background) b = 0.2 + 0.6 * u(rng);
  } else {
    background[0] = background[1] = background[2] = 0.08 + 0.15 * u(rng);
  }
  const double bg_slope = (u(rng) - 0.5) * 0.3;

  std::vector<std::uint8_t> img(static_cast<size_t>(height * width * 3));
  std::vector<double> part_top(SynthIdentity::kParts + 1);
  part_top[0] = top;
  for (int p = 0; p < SynthIdentity::kParts; ++p) part_top[static_cast<size_t>(p) + 1] = part_top[static_cast<size_t>(p)] + id.part_height[p] * body_h;

  for (Index y = 0; y < height; ++y) {
    int part = -1;
    for (int p = 0; p < SynthIdentity::kParts; ++p) {
      if (y >= part_top[static_cast<size_t>(p)] && y < part_top[static_cast<size_t>(p) + 1]) part = p;
    }
    for (Index x = 0; x < width; ++x) {
      double rgb[3];
      bool inside = false;
      if (part >= 0) {
        const double half = id.part_width[part] * width * scale / 2.0;
        const double dx = (x + 0.5 - cx) / half;
        if (part == 0) {
          const double mid = (part_top[0] + part_top[1]) / 2.0, rad = (part_top[1] - part_top[0]) / 2.0;
          const double dy = (y + 0.5 - mid) / rad;
          inside = dx * dx + dy * dy <= 1.0;
        } else {
          inside = std::abs(dx) <= 1.0;
        }
        if (inside) {
          const double period = id.frequency[part] * sy * scale;
          const double uy = (y - part_top[static_cast<size_t>(part)]) / period + phase_y;
          const double ux = (x - (cx - half)) / period + phase_x;
          double pat = 0.0;
          switch (id.pattern[part]) {
            case 1: pat = std::sin(2 * std::numbers::pi * uy) >= 0 ? 1.0 : -1.0; break;
            case 2: pat = std::sin(2 * std::numbers::pi * ux) >= 0 ? 1.0 : -1.0; break;
            case 3:
              pat = (std::sin(2 * std::numbers::pi * ux) >= 0) == (std::sin(2 * std::numbers::pi * uy) >= 0) ? 1.0
                                                                                                             : -1.0;
              break;
            default: break;
          }
          const double mod = 1.0 + id.contrast[part] * pat;
          if (modality == Modality::kVis) {
            for (int c = 0; c < 3; ++c) rgb[c] = id.color[part][c] * gain[c] * mod;
          } else {
            rgb[0] = rgb[1] = rgb[2] = id.emission[part] * brightness * mod;
          }
        }
      }
      if (!inside) {
        const double shade = 1.0 + bg_slope * (static_cast<double>(y) / height - 0.5);
        for (int c = 0; c < 3; ++c) rgb[c] = background[c] * shade;
      }
      const double n = noise(rng);
      for (int c = 0; c < 3; ++c) {
        const double v = modality == Modality::kVis ? rgb[c] + noise(rng) : rgb[c] + n;
        img[static_cast<size_t>((y * width + x) * 3 + c)] =
            static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
      }
    }
  }
  return img;
}

std::string generate_synthetic_dataset(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const fs::path root(out_dir);
  fs::create_directories(root / "images");
  const auto identities = draw_identities(cfg.num_ids, cfg.seed);

  json header;
  header["generator"] = "wrim-synth";
  header["num_ids"] = cfg.num_ids;
  header["per_id"] = cfg.per_id;
  header["height"] = cfg.height;
  header["width"] = cfg.width;
  header["seed"] = cfg.seed;
  header["holdout"] = cfg.holdout == Holdout::kImages ? "images" : "identities";
  header["test_per_id"] = cfg.test_per_id;
  header["test_ids"] = cfg.test_ids;
  const std::string header_line = json{{"header", header}}.dump();

  std::ofstream all(root / "manifest.jsonl"), train(root / "train.jsonl"), test(root / "test.jsonl");
  if (!all || !train || !test) throw std::runtime_error("cannot write manifests in " + out_dir);
  for (auto* f : {&all, &train, &test}) *f << header_line << '\n';

  const Index vis_cameras[4] = {1, 2, 4, 5}, ir_cameras[2] = {3, 6};
  for (Index id = 0; id < cfg.num_ids; ++id) {
    for (Modality m : {Modality::kVis, Modality::kIr}) {
      for (Index k = 0; k < cfg.per_id; ++k) {
        const Index camera = m == Modality::kVis ? vis_cameras[k % 4] : ir_cameras[k % 2];
        const std::uint64_t seed =
            mix_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(id)), static_cast<std::uint64_t>(m) * 100003 + k);
        const auto pixels = render_synthetic(identities[static_cast<size_t>(id)], m, camera, cfg.height, cfg.width, seed);
        cv::Mat rgb(static_cast<int>(cfg.height), static_cast<int>(cfg.width), CV_8UC3,
                    const_cast<std::uint8_t*>(pixels.data()));
        cv::Mat bgr;
        cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
        char name[64];
        std::snprintf(name, sizeof(name), "id%03ld_%s_%02ld.png", static_cast<long>(id),
                      m == Modality::kVis ? "vis" : "ir", static_cast<long>(k));
        const fs::path rel = fs::path("images") / name;
        if (!cv::imwrite((root / rel).string(), bgr)) throw std::runtime_error("cannot write " + (root / rel).string());

        const std::string line = json{{"image_path", rel.string()},
                                      {"person_id", id},
                                      {"camera_id", camera},
                                      {"modality", std::string(to_string(m))}}
                                     .dump();
        all << line << '\n';
        const bool held_out = cfg.holdout == Holdout::kImages ? k >= cfg.per_id - cfg.test_per_id
                                                              : id >= cfg.num_ids - cfg.test_ids;
        (held_out ? test : train) << line << '\n';
      }
    }
  }
  if (!all || !train || !test) throw std::runtime_error("failed writing manifests in " + out_dir);
  return (root / "manifest.jsonl").string();
}

#define WRIM_INSTANTIATE(T)                                                                                 \
  template Tensor<T> normalize_image<T>(const Tensor<float>&);                                              \
  template Tensor<T> flip_horizontal<T>(const Tensor<T>&);                                                  \
  template Tensor<T> augment_and_normalize<T>(const Tensor<float>&, const AugmentConfig&, std::uint64_t);   \
  template Tensor<T> preprocess<T>(const std::string&, Index, Index, bool, std::uint64_t,                   \
                                   const AugmentConfig&);                                                   \
  template Tensor<T> load_batch<T>(const Manifest&, const std::vector<Index>&, ImageCache&, bool,           \
                                   std::uint64_t, const AugmentConfig&, int);

WRIM_INSTANTIATE(float)
WRIM_INSTANTIATE(double)

}  // namespace wrim
