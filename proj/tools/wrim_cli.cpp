// Command-line front end: train, evaluate, flops, generate-synth.
//
// Exit codes: 0 success, 1 usage error (bad flags, invalid configuration),
// 2 runtime failure.

#include "CLI11.hpp"
#include "wrim/trainer.hpp"

#include <cstdio>
#include <iostream>

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

int cmd_train(const std::string& config_path, int workers) {
  const wrim::RunConfig cfg = wrim::load_run_config(config_path);
  cfg.validate(true);
  const auto outcome = wrim::train(cfg, workers, [](const wrim::StepRecord& r) {
    if (r.batch == 0) {
      std::fprintf(stderr, "epoch %ld step %ld lr %.5g total %.4f (cls %.4f cmkic %.4f id %.4f)\n",
                   static_cast<long>(r.epoch), static_cast<long>(r.step), r.lr, r.total, r.cls_p5, r.cmkic_p5,
                   r.id_p4);
    }
  });
  std::cout << "log: " << outcome.log_path << "\n";
  std::cout << "checkpoint: " << outcome.final_checkpoint << "\n";
  return 0;
}

int cmd_evaluate(const std::string& config_path, const std::string& checkpoint, int workers) {
  const wrim::RunConfig cfg = wrim::load_run_config(config_path);
  cfg.validate(true);
  const auto result = wrim::evaluate(cfg, checkpoint, workers);
  std::cout << wrim::report_table(result, cfg.eval);
  std::printf("Rank-1: %.6f\nmAP: %.6f\n", result.rank(1), result.map);
  std::cout << "report: " << cfg.output_dir << "/eval_report.json\n";
  return 0;
}

int cmd_flops(const std::string& config_path) {
  const wrim::RunConfig cfg = wrim::load_run_config(config_path);
  cfg.validate(false);
  wrim::NetworkConfig net_cfg = cfg.network;
  net_cfg.pretrained_weights.reset();
  const wrim::WrimNet<float> net(net_cfg);
  const auto report = net.complexity();
  std::printf("%-44s %14s %16s %16s\n", "layer", "params", "MACs", "flops");
  for (const auto& row : report.rows) {
    std::printf("%-44s %14lld %16lld %16lld\n", row.name.c_str(), static_cast<long long>(row.params),
                static_cast<long long>(row.macs), static_cast<long long>(2 * row.macs + row.elementwise));
  }
  std::printf("%-44s %14lld %16lld %16lld\n", "total", static_cast<long long>(report.params),
              static_cast<long long>(report.macs), static_cast<long long>(report.flops()));
  const auto head = net.training_head_cost();
  std::printf("\nparams (M): %.4f\nflops (B): %.4f\nMACs (B): %.4f\n", report.params / 1e6, report.flops() / 1e9,
              report.macs / 1e9);
  std::printf("training-only heads: %.4f M params, %.4f B flops\n", head.params / 1e6, head.flops() / 1e9);
  return 0;
}

int cmd_generate(const wrim::SynthConfig& cfg, const std::string& out) {
  cfg.validate();
  std::cout << wrim::generate_synthetic_dataset(cfg, out) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"WRIM-Net visible-infrared person re-identification"};
  app.require_subcommand(1);

  std::string config, checkpoint, out, holdout = "images";
  wrim::SynthConfig synth;

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config, "Run configuration (JSON)")->required();

  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on the test manifest");
  evaluate->add_option("--config", config, "Run configuration (JSON)")->required();
  evaluate->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();

  auto* flops = app.add_subcommand("flops", "Print per-layer parameter and flop counts");
  flops->add_option("--config", config, "Run configuration (JSON)")->required();

  auto* generate = app.add_subcommand("generate-synth", "Write a synthetic paired-modality dataset");
  generate->add_option("--ids", synth.num_ids, "Identities")->required();
  generate->add_option("--per-id", synth.per_id, "Images per identity per modality")->required();
  generate->add_option("--seed", synth.seed, "Random seed")->required();
  generate->add_option("--out", out, "Output directory")->required();
  generate->add_option("--height", synth.height, "Image height");
  generate->add_option("--width", synth.width, "Image width");
  generate->add_option("--holdout", holdout, "Test split: images or identities")
      ->check(CLI::IsMember({"images", "identities"}));
  generate->add_option("--test-per-id", synth.test_per_id, "Held-out images per identity and modality");
  generate->add_option("--test-ids", synth.test_ids, "Held-out identities");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }
  synth.holdout = holdout == "identities" ? wrim::Holdout::kIdentities : wrim::Holdout::kImages;

  try {
    const int workers = wrim::worker_count_from_env();
    if (*train) return cmd_train(config, workers);
    if (*evaluate) return cmd_evaluate(config, checkpoint, workers);
    if (*flops) return cmd_flops(config);
    if (*generate) return cmd_generate(synth, out);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}
