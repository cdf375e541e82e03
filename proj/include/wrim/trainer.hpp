#pragma once

#include "wrim/config.hpp"

#include <functional>
#include <map>
#include <string>

namespace wrim {

struct StepRecord {
  Index step = 0;
  Index epoch = 0;
  Index batch = 0;
  double lr = 0.0;
  double cls_p5 = 0.0;
  double cmkic_p5 = 0.0;
  double id_p4 = 0.0;
  double total = 0.0;

  nlohmann::json to_json() const;
};

/// SGD with momentum or Adam, both with L2 weight decay folded into the
/// gradient. Frozen parameters and buffers are skipped.
template <typename Scalar>
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, ParameterList<Scalar> params, bool pretrained_trunk);
  void step(double lr);

 private:
  OptimizerConfig cfg_;
  ParameterList<Scalar> params_;
  std::vector<double> scale_;
  std::vector<Vector<Scalar>> m_, v_;
  Index steps_ = 0;
};

struct TrainOutcome {
  std::string final_checkpoint;
  std::vector<std::string> checkpoints;
  std::string log_path;
  Index steps = 0;
};

/// Runs the configured schedule, writing `train_log.jsonl`, periodic
/// `checkpoint_epoch_<E>.ckpt` files and `final.ckpt` into output_dir.
/// `on_step` (optional) sees every log record. Aborts with std::runtime_error
/// naming the epoch and batch on a contrastive precondition failure or a
/// non-finite loss.
TrainOutcome train(const RunConfig& cfg, int workers = 1, const std::function<void(const StepRecord&)>& on_step = {});

/// Loads the checkpoint into a model built from cfg.network, evaluates the
/// test manifest with cfg.eval and writes `eval_report.json` and
/// `eval_report.txt` into output_dir. Throws std::runtime_error when the
/// checkpoint was produced with a different network configuration.
EvalResult evaluate(const RunConfig& cfg, const std::string& checkpoint, int workers = 1);

/// Serialised network configuration stored inside checkpoints.
std::string checkpoint_config(const NetworkConfig& cfg);

}  // namespace wrim
