#pragma once

#include "wrim/data.hpp"
#include "wrim/eval.hpp"
#include "wrim/losses.hpp"
#include "wrim/wrimnet.hpp"

#include "json.hpp"

#include <string>
#include <vector>

namespace wrim {

enum class OptimizerKind { kSgd, kAdam };
enum class Precision { kFloat32, kFloat64 };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double base_lr = 0.01;
  double momentum = 0.9;  // SGD
  double beta1 = 0.9;     // Adam
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 5e-4;
  /// Linear ramp from base_lr / warmup_epochs to base_lr.
  Index warmup_epochs = 5;
  /// Epochs at which the learning rate is multiplied by `gamma`.
  std::vector<Index> milestones;
  double gamma = 0.1;
  /// Applied to trunk parameters when pretrained weights are loaded.
  double trunk_lr_scale = 0.1;

  void validate() const;
  /// Learning rate for new modules during `epoch` (0-based).
  double learning_rate(Index epoch) const;
};

struct RunConfig {
  NetworkConfig network;
  LossConfig loss;
  SamplerConfig sampler;  // its seed is overwritten by `seed`
  AugmentConfig augment;
  EvalProtocol eval;
  Index eval_batch_size = 32;
  OptimizerConfig optimizer;
  std::string train_manifest;
  std::string test_manifest;
  Index epochs = 60;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/wrim";
  Index checkpoint_every = 10;
  Precision precision = Precision::kFloat32;

  /// Throws std::invalid_argument; with `check_paths` also requires the
  /// manifests (and pretrained weights, when set) to exist.
  void validate(bool check_paths) const;
};

nlohmann::json to_json(const NetworkConfig& cfg);
NetworkConfig network_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys and ill-typed values throw
/// std::invalid_argument naming the key.
RunConfig run_config_from_json(const nlohmann::json& j);

/// Parses a JSON file and resolves relative manifest, weight and output paths
/// against the file's directory. Throws std::runtime_error when unreadable or
/// malformed, std::invalid_argument on schema errors.
RunConfig load_run_config(const std::string& path);

}  // namespace wrim
