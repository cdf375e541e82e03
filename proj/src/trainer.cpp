#include "wrim/trainer.hpp"

#include "wrim/checkpoint.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

namespace wrim {

namespace fs = std::filesystem;
using nlohmann::json;

nlohmann::json StepRecord::to_json() const {
  return json{{"step", step},     {"epoch", epoch},   {"batch", batch}, {"lr", lr},
              {"cls_p5", cls_p5}, {"cmkic_p5", cmkic_p5}, {"id_p4", id_p4}, {"total", total}};
}

template <typename Scalar>
Optimizer<Scalar>::Optimizer(const OptimizerConfig& cfg, ParameterList<Scalar> params, bool pretrained_trunk)
    : cfg_(cfg) {
  for (auto& p : params) {
    if (!p.param->trainable || p.param->buffer) continue;
    params_.push_back(p);
    scale_.push_back(pretrained_trunk && p.name.rfind("trunk.", 0) == 0 ? cfg.trunk_lr_scale : 1.0);
    m_.push_back(Vector<Scalar>::Zero(p.param->value.size()));
    if (cfg.kind == OptimizerKind::kAdam) v_.push_back(Vector<Scalar>::Zero(p.param->value.size()));
  }
}

template <typename Scalar>
void Optimizer<Scalar>::step(double lr) {
  ++steps_;
  const auto wd = static_cast<Scalar>(cfg_.weight_decay);
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& w = params_[i].param->value.values();
    const Vector<Scalar> g = params_[i].param->grad.values() + wd * w;
    const auto rate = static_cast<Scalar>(lr * scale_[i]);
    if (cfg_.kind == OptimizerKind::kSgd) {
      m_[i] = static_cast<Scalar>(cfg_.momentum) * m_[i] + g;
      w -= rate * m_[i];
    } else {
      const auto b1 = static_cast<Scalar>(cfg_.beta1), b2 = static_cast<Scalar>(cfg_.beta2);
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
      const auto c1 = static_cast<Scalar>(1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_)));
      const auto c2 = static_cast<Scalar>(1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_)));
      const auto eps = static_cast<Scalar>(cfg_.epsilon);
      w.array() -= rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    }
  }
}

std::string checkpoint_config(const NetworkConfig& cfg) {
  json j = to_json(cfg);
  j.erase("pretrained_weights");
  return j.dump();
}

namespace {

template <typename Scalar>
void save_checkpoint(WrimNet<Scalar>& net, const std::string& path) {
  write_archive(path, archive_parameters(net.parameters(), checkpoint_config(net.config())));
}

template <typename Scalar>
TrainOutcome train_impl(const RunConfig& cfg, int workers, const std::function<void(const StepRecord&)>& on_step) {
  const Manifest manifest = load_manifest(cfg.train_manifest);
  if (manifest.num_classes() != cfg.network.num_classes) {
    throw std::runtime_error("network.num_classes = " + std::to_string(cfg.network.num_classes) +
                             " but the training manifest has " + std::to_string(manifest.num_classes()) +
                             " identities");
  }
  fs::create_directories(cfg.output_dir);
  TrainOutcome outcome;
  outcome.log_path = (fs::path(cfg.output_dir) / "train_log.jsonl").string();
  std::ofstream log(outcome.log_path, std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + outcome.log_path);

  WrimNet<Scalar> net(cfg.network, cfg.seed);
  Optimizer<Scalar> optimizer(cfg.optimizer, net.parameters(), cfg.network.pretrained_weights.has_value());
  ImageCache cache(cfg.network.input_height, cfg.network.input_width);
  SamplerConfig sampler = cfg.sampler;
  sampler.seed = cfg.seed;
  const bool use_cmkic = cfg.loss.lambda1 > 0.0;
  const bool use_id_p4 = cfg.loss.lambda2 > 0.0 && net.head_count_p4() > 0;

  Index step = 0;
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.optimizer.learning_rate(epoch);
    const auto batches = make_pk_batches(manifest, sampler, epoch);
    for (size_t b = 0; b < batches.size(); ++b) {
      const std::string where = "epoch " + std::to_string(epoch) + " batch " + std::to_string(b);
      const BatchLabels labels = manifest.batch_labels(batches[b]);
      if (use_cmkic) {
        try {
          check_cmkic_batch(labels, cfg.loss.top_k);
        } catch (const std::invalid_argument& e) {
          throw std::runtime_error(where + ": contrastive loss precondition failed: " + e.what());
        }
      }
      const auto images = load_batch<Scalar>(manifest, batches[b], cache, true,
                                             mix_seed(cfg.seed, static_cast<std::uint64_t>(step)), cfg.augment, workers);
      FeatureGradients<Scalar> grads;
      StepRecord rec{step, epoch, static_cast<Index>(b), lr};
      try {
        const auto out = net.forward(images, labels.modality, Mode::kTrain);
        auto cls = cls_loss(out.logits_p5, labels.person_id, cfg.loss.label_smoothing);
        rec.cls_p5 = static_cast<double>(cls.value);
        grads.logits_p5 = std::move(cls.grads);
        if (use_cmkic) {
          auto c = cmkic_loss(out.z, labels, cfg.loss);
          rec.cmkic_p5 = static_cast<double>(c.value);
          grads.z = static_cast<Scalar>(cfg.loss.lambda1) * c.grad;
        }
        if (use_id_p4) {
          auto id = id_loss_p4(out.pooled_p4.global, out.logits_p4, labels.person_id, cfg.loss);
          rec.id_p4 = static_cast<double>(id.value);
          const auto l2 = static_cast<Scalar>(cfg.loss.lambda2);
          for (auto& g : id.logit_grads) grads.logits_p4.push_back(l2 * g);
          grads.global_p4 = l2 * id.global_grad;
        }
        rec.total = total_loss(rec.cls_p5, rec.cmkic_p5, rec.id_p4, cfg.loss);
      } catch (const std::domain_error& e) {
        throw std::runtime_error(where + " (step " + std::to_string(step) + "): " + e.what());
      }
      net.zero_grad();
      net.backward(grads);
      optimizer.step(lr);

      log << rec.to_json().dump() << '\n';
      if (on_step) on_step(rec);
      ++step;
    }
    log.flush();
    if ((epoch + 1) % cfg.checkpoint_every == 0) {
      const auto path = (fs::path(cfg.output_dir) / ("checkpoint_epoch_" + std::to_string(epoch + 1) + ".ckpt"));
      save_checkpoint(net, path.string());
      outcome.checkpoints.push_back(path.string());
    }
  }
  outcome.final_checkpoint = (fs::path(cfg.output_dir) / "final.ckpt").string();
  save_checkpoint(net, outcome.final_checkpoint);
  outcome.checkpoints.push_back(outcome.final_checkpoint);
  outcome.steps = step;
  if (!log) throw std::runtime_error("failed writing " + outcome.log_path);
  return outcome;
}

template <typename Scalar>
EvalResult evaluate_impl(const RunConfig& cfg, const std::string& checkpoint, int workers) {
  const Archive archive = read_archive(checkpoint);
  const json stored = json::parse(archive.config_json, nullptr, false);
  const json expected = json::parse(checkpoint_config(cfg.network));
  if (stored != expected) {
    std::string detail;
    if (stored.is_object()) {
      for (const auto& [key, value] : expected.items()) {
        if (!stored.contains(key) || stored.at(key) != value) {
          detail = ": network." + key + " is " + (stored.contains(key) ? stored.at(key).dump() : "absent") +
                   " in the checkpoint, " + value.dump() + " in the config";
          break;
        }
      }
    }
    throw std::runtime_error("checkpoint " + checkpoint + " does not match the configured network" + detail);
  }
  NetworkConfig net_cfg = cfg.network;
  net_cfg.pretrained_weights.reset();
  WrimNet<Scalar> net(net_cfg, cfg.seed);
  auto params = net.parameters();
  restore_parameters(params, archive);

  const Manifest manifest = load_manifest(cfg.test_manifest);
  ImageCache cache(cfg.network.input_height, cfg.network.input_width);
  const EvalResult result = run_protocol(net, manifest, cache, cfg.eval, cfg.seed, cfg.eval_batch_size, workers);

  fs::create_directories(cfg.output_dir);
  const fs::path dir(cfg.output_dir);
  std::ofstream(dir / "eval_report.json") << report_json(result, cfg.eval).dump(2) << '\n';
  std::ofstream(dir / "eval_report.txt") << report_table(result, cfg.eval);
  return result;
}

}  // namespace

TrainOutcome train(const RunConfig& cfg, int workers, const std::function<void(const StepRecord&)>& on_step) {
  cfg.validate(true);
  return cfg.precision == Precision::kFloat64 ? train_impl<double>(cfg, workers, on_step)
                                              : train_impl<float>(cfg, workers, on_step);
}

EvalResult evaluate(const RunConfig& cfg, const std::string& checkpoint, int workers) {
  cfg.validate(true);
  return cfg.precision == Precision::kFloat64 ? evaluate_impl<double>(cfg, checkpoint, workers)
                                              : evaluate_impl<float>(cfg, checkpoint, workers);
}

template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace wrim
