#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "wrim/checkpoint.hpp"
#include "wrim/trainer.hpp"

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

using namespace wrim;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("wrim_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

struct Process {
  int code = -1;
  std::string out;
};

// Runs the CLI with stderr folded into stdout.
Process run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + WRIM_CLI_PATH + " " + args + " 2>&1";
  Process p;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf;
  size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) p.out.append(buf.data(), n);
  const int status = pclose(pipe);
  p.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return p;
}

// The shared small synthetic dataset, generated once per process.
const fs::path& synth_dir() {
  static const fs::path dir = [] {
    const fs::path d = scratch("synth");
    SynthConfig cfg;
    cfg.num_ids = 6;
    cfg.per_id = 6;
    cfg.test_per_id = 2;
    cfg.test_ids = 2;
    cfg.seed = 3;
    generate_synthetic_dataset(cfg, d.string());
    return d;
  }();
  return dir;
}

RunConfig small_run(const std::string& out) {
  RunConfig c;
  c.network.input_height = 128;
  c.network.input_width = 48;
  c.network.num_classes = 6;
  c.network.stage_blocks = {1, 1, 1, 1};
  c.network.base_width = 4;
  c.network.heads = 2;
  c.network.mlp_hidden = 16;
  c.network.mlp_out = 8;
  c.sampler.p_ids = 3;
  c.sampler.k_per_modality = 4;
  c.augment.pad = 4;
  c.eval.trials = 2;
  c.optimizer.warmup_epochs = 1;
  c.train_manifest = (synth_dir() / "train.jsonl").string();
  c.test_manifest = (synth_dir() / "test.jsonl").string();
  c.epochs = 1;
  c.output_dir = out;
  c.checkpoint_every = 1;
  return c;
}

}  // namespace

// ---------------------------------------------------------------- configuration

TEST_CASE("run configuration survives a JSON round trip") {
  RunConfig c = small_run("/tmp/x");
  c.network.pretrained_weights = "/w.ckpt";
  c.loss.cmkic_mean = true;
  c.eval.mode = SearchMode::kSymmetric;
  c.eval.direction = Direction::kVis2Ir;
  c.eval.indoor_cameras = {1, 7};
  c.optimizer.kind = OptimizerKind::kAdam;
  c.optimizer.milestones = {3, 9};
  c.precision = Precision::kFloat64;
  c.seed = 123456789012345ULL;
  const json j = to_json(c);
  CHECK(to_json(run_config_from_json(j)) == j);
  CHECK(to_json(run_config_from_json(json::object())) == to_json(RunConfig{}));
  CHECK(run_config_from_json(j).sampler.seed == c.seed);
}

TEST_CASE("unknown and ill-typed configuration keys are rejected by name") {
  CHECK_THROWS_WITH_AS(run_config_from_json(json{{"epoch", 3}}), doctest::Contains("'epoch'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(run_config_from_json(json{{"network", {{"heds", 2}}}}), doctest::Contains("network.heds"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(run_config_from_json(json{{"epochs", "ten"}}), doctest::Contains("epochs"),
                       std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json(json{{"network", {{"stage_blocks", {1, 2}}}}}), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json(json{{"optimizer", {{"kind", "rmsprop"}}}}), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json(json{{"eval", {{"mode", "outdoor"}}}}), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json(json::array()), std::invalid_argument);
}

TEST_CASE("relative paths resolve against the configuration file") {
  const auto dir = scratch("paths");
  fs::create_directories(dir / "cfg");
  write_text(dir / "cfg" / "run.json", R"({"train_manifest": "../d/train.jsonl", "output_dir": "out",
                                          "network": {"pretrained_weights": "w.ckpt"}})");
  const RunConfig c = load_run_config((dir / "cfg" / "run.json").string());
  CHECK(c.train_manifest == (dir / "d" / "train.jsonl").string());
  CHECK(c.output_dir == (dir / "cfg" / "out").string());
  CHECK(*c.network.pretrained_weights == (dir / "cfg" / "w.ckpt").string());
  write_text(dir / "bad.json", "{\"epochs\": ");
  CHECK_THROWS_AS(load_run_config((dir / "bad.json").string()), std::runtime_error);
}

TEST_CASE("run configuration invariants") {
  RunConfig c = small_run("/tmp/x");
  CHECK_NOTHROW(c.validate(true));
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(false), std::invalid_argument);
  c = small_run("/tmp/x");
  c.optimizer.base_lr = 0.0;
  CHECK_THROWS_AS(c.validate(false), std::invalid_argument);
  c = small_run("/tmp/x");
  c.train_manifest = "/nonexistent/train.jsonl";
  CHECK_NOTHROW(c.validate(false));
  CHECK_THROWS_WITH_AS(c.validate(true), doctest::Contains("train_manifest"), std::invalid_argument);
  c = small_run("/tmp/x");
  c.optimizer.milestones = {5, 5};
  CHECK_THROWS_AS(c.validate(false), std::invalid_argument);
}

// ---------------------------------------------------------------- optimizer

TEST_CASE("learning rate warms up linearly and decays at milestones") {
  OptimizerConfig o;
  o.base_lr = 0.01;
  o.warmup_epochs = 5;
  o.milestones = {10, 20};
  CHECK(o.learning_rate(0) == doctest::Approx(0.002));
  CHECK(o.learning_rate(4) == doctest::Approx(0.01));
  CHECK(o.learning_rate(9) == doctest::Approx(0.01));
  CHECK(o.learning_rate(10) == doctest::Approx(0.001));
  CHECK(o.learning_rate(25) == doctest::Approx(0.0001));
  o.warmup_epochs = 0;
  CHECK(o.learning_rate(0) == doctest::Approx(0.01));
}

TEST_CASE("SGD step applies momentum and weight decay") {
  Parameter<double> p({2});
  p.value[0] = 1.0;
  p.value[1] = -2.0;
  ParameterList<double> list{{"w", &p}};
  OptimizerConfig o;
  o.momentum = 0.9;
  o.weight_decay = 0.1;
  Optimizer<double> opt(o, list, false);
  p.grad[0] = 0.5;
  p.grad[1] = 0.0;
  opt.step(0.1);
  // g = grad + 0.1 w = (0.6, -0.2); v = g; w -= 0.1 v
  CHECK(p.value[0] == doctest::Approx(0.94));
  CHECK(p.value[1] == doctest::Approx(-1.98));
  opt.step(0.1);
  // g = (0.5 + 0.094, -0.198); v = 0.9 (0.6, -0.2) + g
  CHECK(p.value[0] == doctest::Approx(0.94 - 0.1 * (0.54 + 0.594)));
  CHECK(p.value[1] == doctest::Approx(-1.98 - 0.1 * (-0.18 - 0.198)));
}

TEST_CASE("Adam's first step moves every weight by the learning rate") {
  Parameter<double> p({3});
  p.grad[0] = 3.0;
  p.grad[1] = -0.01;
  p.grad[2] = 0.0;
  ParameterList<double> list{{"w", &p}};
  OptimizerConfig o;
  o.kind = OptimizerKind::kAdam;
  o.weight_decay = 0.0;
  Optimizer<double> opt(o, list, false);
  opt.step(0.5);
  CHECK(p.value[0] == doctest::Approx(-0.5));
  CHECK(p.value[1] == doctest::Approx(0.5));
  CHECK(p.value[2] == 0.0);
}

TEST_CASE("optimizer skips frozen tensors and scales the pretrained trunk") {
  Parameter<double> trunk({1}), head({1}), frozen({1}, false), buffer({1}, false, true);
  ParameterList<double> list{{"trunk.conv1.weight", &trunk}, {"neck.p5.0.bn.weight", &head},
                             {"neck.p5.0.bn.bias", &frozen}, {"trunk.bn1.running_mean", &buffer}};
  for (auto* p : {&trunk, &head, &frozen, &buffer}) p->grad[0] = 1.0;
  OptimizerConfig o;
  o.momentum = 0.0;
  o.weight_decay = 0.0;
  o.trunk_lr_scale = 0.1;
  Optimizer<double> scaled(o, list, true);
  scaled.step(1.0);
  CHECK(trunk.value[0] == doctest::Approx(-0.1));
  CHECK(head.value[0] == doctest::Approx(-1.0));
  CHECK(frozen.value[0] == 0.0);
  CHECK(buffer.value[0] == 0.0);
  Optimizer<double> plain(o, list, false);
  plain.step(1.0);
  CHECK(trunk.value[0] == doctest::Approx(-1.1));
}

// ---------------------------------------------------------------- training

TEST_CASE("one epoch writes a loss log and checkpoints") {
  const auto out = scratch("train");
  const RunConfig c = small_run(out.string());
  std::vector<StepRecord> seen;
  const auto outcome = train(c, 1, [&](const StepRecord& r) { seen.push_back(r); });
  CHECK(outcome.steps == 2);
  CHECK(outcome.checkpoints.size() == 2);
  CHECK(fs::exists(out / "checkpoint_epoch_1.ckpt"));
  CHECK(fs::exists(out / "final.ckpt"));
  CHECK(slurp(out / "checkpoint_epoch_1.ckpt") == slurp(out / "final.ckpt"));
  std::ifstream log(outcome.log_path);
  std::string line;
  Index lines = 0;
  while (std::getline(log, line)) {
    const json j = json::parse(line);
    for (const char* key : {"step", "cls_p5", "cmkic_p5", "id_p4", "total"}) CHECK(j.contains(key));
    CHECK(j.at("step") == lines);
    const double total = j.at("cls_p5").get<double>() + 0.5 * j.at("cmkic_p5").get<double>() +
                         0.1 * j.at("id_p4").get<double>();
    CHECK(j.at("total").get<double>() == doctest::Approx(total).epsilon(1e-12));
    CHECK(j.at("cmkic_p5").get<double>() > 0.0);
    CHECK(j.at("id_p4").get<double>() > 0.0);
    ++lines;
  }
  CHECK(lines == 2);
  CHECK(seen.size() == 2);
}

TEST_CASE("training twice with the same seed gives identical logs in 64-bit mode") {
  RunConfig a = small_run(scratch("det_a").string()), b = small_run(scratch("det_b").string());
  a.precision = b.precision = Precision::kFloat64;
  a.epochs = b.epochs = 2;
  const auto ra = train(a), rb = train(b);
  CHECK(slurp(ra.log_path) == slurp(rb.log_path));
  CHECK(slurp(ra.final_checkpoint) == slurp(rb.final_checkpoint));
  RunConfig c = small_run(scratch("det_c").string());
  c.precision = Precision::kFloat64;
  c.epochs = 2;
  c.seed = 1;
  CHECK(slurp(train(c).log_path) != slurp(ra.log_path));
}

TEST_CASE("training aborts naming the batch when the contrastive precondition fails") {
  RunConfig c = small_run(scratch("precondition").string());
  c.sampler.k_per_modality = 2;
  CHECK_THROWS_WITH_AS(train(c), doctest::Contains("epoch 0 batch 0"), std::runtime_error);
  c.loss.lambda1 = 0.0;
  CHECK_NOTHROW(train(c));
}

TEST_CASE("training aborts naming the step when the model diverges") {
  RunConfig c = small_run(scratch("diverge").string());
  c.optimizer.base_lr = 1e30;
  c.optimizer.warmup_epochs = 0;
  c.epochs = 3;
  CHECK_THROWS_WITH_AS(train(c), doctest::Contains("(step "), std::runtime_error);
}

TEST_CASE("training rejects a class count that differs from the manifest") {
  RunConfig c = small_run(scratch("classes").string());
  c.network.num_classes = 7;
  CHECK_THROWS_WITH_AS(train(c), doctest::Contains("6 identities"), std::runtime_error);
}

// ---------------------------------------------------------------- evaluation

TEST_CASE("evaluation reports finite metrics and is reproducible") {
  const auto out = scratch("evaluate");
  const RunConfig c = small_run(out.string());
  const auto ckpt = train(c).final_checkpoint;
  const auto r = evaluate(c, ckpt);
  for (double v : r.cmc) CHECK((std::isfinite(v) && v >= 0.0 && v <= 1.0));
  CHECK((r.map >= 0.0 && r.map <= 1.0));
  const auto first = slurp(out / "eval_report.json");
  evaluate(c, ckpt);
  CHECK(slurp(out / "eval_report.json") == first);
  const json report = json::parse(first);
  CHECK(report.at("cmc").at(0).get<double>() == r.rank(1));
  CHECK(report.at("trials") == 2);
  CHECK(slurp(out / "eval_report.txt").find("Rank-1") != std::string::npos);
}

TEST_CASE("evaluation rejects a checkpoint from a different network") {
  const auto out = scratch("mismatch");
  RunConfig c = small_run(out.string());
  const auto ckpt = train(c).final_checkpoint;
  c.network.mlp_out = 4;
  CHECK_THROWS_WITH_AS(evaluate(c, ckpt), doctest::Contains("network.mlp_out"), std::runtime_error);
}

// ---------------------------------------------------------------- command line

TEST_CASE("command line exit codes") {
  CHECK(run_cli("").code == 1);
  CHECK(run_cli("fly").code == 1);
  CHECK(run_cli("train").code == 1);
  CHECK(run_cli("generate-synth --ids 3 --per-id 2 --seed 1").code == 1);
  CHECK(run_cli("--help").code == 0);

  const auto dir = scratch("cli_codes");
  write_text(dir / "typo.json", R"({"epoch": 3})");
  const auto typo = run_cli("flops --config " + (dir / "typo.json").string());
  CHECK(typo.code == 1);
  CHECK(typo.out.find("epoch") != std::string::npos);
  CHECK(run_cli("flops --config " + (dir / "missing.json").string()).code == 2);

  const RunConfig c = small_run((dir / "out").string());
  write_text(dir / "run.json", to_json(c).dump());
  CHECK(run_cli("evaluate --config " + (dir / "run.json").string() + " --checkpoint " + (dir / "none.ckpt").string())
            .code == 2);
  CHECK(run_cli("train --config " + (dir / "run.json").string(), "WRIM_NUM_WORKERS=0").code == 1);
}

TEST_CASE("generate-synth prints the manifest path and echoes its flags") {
  const auto dir = scratch("cli_synth");
  const auto p = run_cli("generate-synth --ids 3 --per-id 4 --seed 77 --test-per-id 1 --test-ids 1 --out " + (dir / "s").string());
  REQUIRE(p.code == 0);
  CHECK(p.out == (dir / "s" / "manifest.jsonl").string() + "\n");
  std::ifstream in(dir / "s" / "manifest.jsonl");
  std::string first;
  std::getline(in, first);
  const json h = json::parse(first).at("header");
  CHECK(h.at("num_ids") == 3);
  CHECK(h.at("per_id") == 4);
  CHECK(h.at("seed") == 77);
  CHECK(h.at("test_per_id") == 1);
}

TEST_CASE("flops rows sum to the printed totals") {
  const auto dir = scratch("cli_flops");
  write_text(dir / "c.json", R"({"network": {"input_height": 128, "input_width": 48, "base_width": 8,
                                 "stage_blocks": [1, 1, 1, 1], "heads": 4}})");
  const auto p = run_cli("flops --config " + (dir / "c.json").string());
  REQUIRE(p.code == 0);
  std::istringstream lines(p.out);
  std::string line;
  long long params = 0, macs = 0, flops = 0;
  bool totals = false;
  while (std::getline(lines, line)) {
    std::istringstream row(line);
    std::string name;
    long long a, b, c;
    if (!(row >> name >> a >> b >> c)) continue;
    if (name == "total") {
      CHECK(a == params);
      CHECK(b == macs);
      CHECK(c == flops);
      totals = true;
    } else {
      params += a;
      macs += b;
      flops += c;
    }
  }
  CHECK(totals);
}

TEST_CASE("train and evaluate through the command line") {
  const auto dir = scratch("cli_run");
  RunConfig c = small_run("out");
  c.train_manifest = (synth_dir() / "train.jsonl").string();
  c.test_manifest = (synth_dir() / "test.jsonl").string();
  write_text(dir / "run.json", to_json(c).dump());
  const auto t = run_cli("train --config " + (dir / "run.json").string(), "WRIM_NUM_WORKERS=2");
  REQUIRE(t.code == 0);
  CHECK(fs::exists(dir / "out" / "final.ckpt"));
  const auto e = run_cli("evaluate --config " + (dir / "run.json").string() + " --checkpoint " +
                         (dir / "out" / "final.ckpt").string());
  REQUIRE(e.code == 0);
  const json report = json::parse(slurp(dir / "out" / "eval_report.json"));
  char expected[64];
  std::snprintf(expected, sizeof expected, "Rank-1: %.6f", report.at("cmc").at(0).get<double>());
  CHECK(e.out.find(expected) != std::string::npos);
}
