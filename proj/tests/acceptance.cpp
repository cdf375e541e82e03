// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include "oracles.hpp"
#include "support.hpp"
#include "wrim/checkpoint.hpp"
#include "wrim/trainer.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>

using namespace wrim;
using namespace wrim::testing;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

Vector<double> flat(const RowMatrix<double>& m) { return Eigen::Map<const Vector<double>>(m.data(), m.size()); }

RowMatrix<double> unflat(const Vector<double>& v, Index rows, Index cols) {
  return Eigen::Map<const RowMatrix<double>>(v.data(), rows, cols);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("wrim_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------- 1

Verdict complexity() {
  const WrimNet<float> net(NetworkConfig{});
  const auto r = net.complexity();
  const double params_m = static_cast<double>(r.params) / 1e6;
  const double flops_b = static_cast<double>(r.flops()) / 1e9;
  const double macs_b = static_cast<double>(r.macs) / 1e9;
  const double dp = params_m / 28.99 - 1.0, df = flops_b / 7.19 - 1.0, dm = macs_b / 7.19 - 1.0;
  const bool pass = std::abs(dp) <= 0.05 && std::abs(df) <= 0.10;
  return {pass, format("params %.2fM (%+.1f%% vs 28.99M, limit 5%%), flops %.2fB (%+.1f%% vs 7.19B, limit 10%%); "
                       "MACs %.2fB (%+.1f%%)",
                       params_m, 100 * dp, flops_b, 100 * df, macs_b, 100 * dm)};
}

// ---------------------------------------------------------------- 2

Verdict cmkic_oracle() {
  Rng rng(2024);
  std::uniform_int_distribution<Index> ids_dist(2, 4), per_dist(2, 6);
  std::uniform_real_distribution<double> tau_dist(0.05, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const Index ids = ids_dist(rng), per = per_dist(rng);
    const auto b = random_cmkic_batch(rng, ids, per, 8);
    LossConfig cfg;
    cfg.tau = tau_dist(rng);
    cfg.top_k = std::uniform_int_distribution<Index>(1, per)(rng);
    const double got = cmkic_loss(b.z, b.labels, cfg).value;
    const double want = oracle_cmkic(b.z, b.labels.person_id, b.labels.modality, cfg.tau, cfg.top_k);
    worst = std::max(worst, std::abs(got - want) / std::max(std::abs(want), 1e-300));
  }
  return {worst <= 1e-6, format("200 batches, worst relative difference %.2e (limit 1e-6)", worst)};
}

// ---------------------------------------------------------------- 3

Verdict gradients() {
  Rng rng(3);
  double cmkic = 0.0, cls = 0.0, triplet = 0.0, miim_in = 0.0, miim_param = 0.0;

  for (int trial = 0; trial < 10; ++trial) {
    const auto b = random_cmkic_batch(rng, 2 + trial % 2, 2, 5);
    const Index n = b.z.rows();
    LossConfig cfg;
    cfg.tau = 0.5;
    cfg.top_k = 1 + trial % 2;
    const auto analytic = cmkic_loss(b.z, b.labels, cfg);
    const auto numeric = numeric_gradient(
        [&](const Vector<double>& v) { return cmkic_loss(unflat(v, n, 5), b.labels, cfg).value; }, flat(b.z));
    cmkic = std::max(cmkic, relative_error(numeric, flat(analytic.grad)));
  }

  for (int trial = 0; trial < 10; ++trial) {
    const std::vector<Index> labels{0, 2, 1, 2, 3, 0};
    std::vector<RowMatrix<double>> logits{random_matrix<double>(6, 4, rng), random_matrix<double>(6, 4, rng)};
    const double smoothing = trial % 2 == 0 ? 0.0 : 0.1;
    const auto r = cls_loss(logits, labels, smoothing);
    for (size_t h = 0; h < logits.size(); ++h) {
      const auto numeric = numeric_gradient(
          [&](const Vector<double>& v) {
            auto probe = logits;
            probe[h] = unflat(v, 6, 4);
            return cls_loss(probe, labels, smoothing).value;
          },
          flat(logits[h]));
      cls = std::max(cls, relative_error(numeric, flat(r.grads[h])));
    }
  }

  const std::vector<Index> ids{0, 1, 0, 1, 2, 2, 0, 1};
  for (int trial = 0; trial < 10; ++trial) {
    const RowMatrix<double> f = random_matrix<double>(8, 4, rng);
    const auto r = triplet_batch_hard(f, ids, 2.0);
    const auto numeric = numeric_gradient(
        [&](const Vector<double>& v) { return triplet_batch_hard(unflat(v, 8, 4), ids, 2.0).value; }, flat(f));
    triplet = std::max(triplet, relative_error(numeric, flat(r.grad)));
  }

  for (int trial = 0; trial < 4; ++trial) {
    MiimConfig g;
    g.in_channels = trial < 2 ? 4 : 8;
    g.in_height = 4;
    g.in_width = 4;
    g.spatial_ratio = trial % 2 == 0 ? 1 : 2;
    g.channel_ratio = trial < 2 ? 1 : 2;
    g.pool_window = trial % 2 == 0 ? 2 : 1;
    g.heads = 1 + trial % 2;
    g.positional_embedding = true;
    Miim<double> block(g, rng);
    block.pre_bn.weight.value = random_tensor<double>({g.in_channels}, rng);
    block.post_bn.bias.value = random_tensor<double>({g.in_channels}, rng);
    const Shape shape{2, g.in_channels, 4, 4};
    const auto x = random_tensor<double>(shape, rng);
    const auto probe = random_tensor<double>(shape, rng);
    const auto objective_x = [&](const Vector<double>& v) {
      Tensor<double> in(shape);
      in.values() = v;
      return block.forward(in, Mode::kTrain).values().dot(probe.values());
    };
    ParameterList<double> params;
    block.collect("miim", params);
    for (auto& p : params) p.param->grad.set_zero();
    block.forward(x, Mode::kTrain);
    const auto analytic = block.backward(probe);
    miim_in = std::max(miim_in, relative_error(analytic.values(), numeric_gradient(objective_x, x.values())));
    // Compared over the concatenation of all parameter gradients: some
    // entries (the key-projection bias) have an identically zero gradient.
    std::vector<double> analytic_all, numeric_all;
    for (auto& p : params) {
      if (!p.param->trainable) continue;
      Parameter<double>& param = *p.param;
      const Vector<double> grad = param.grad.values();
      const auto objective_p = [&](const Vector<double>& v) {
        const Vector<double> keep = param.value.values();
        param.value.values() = v;
        const double out = block.forward(x, Mode::kTrain).values().dot(probe.values());
        param.value.values() = keep;
        return out;
      };
      const auto numeric = numeric_gradient(objective_p, param.value.values());
      analytic_all.insert(analytic_all.end(), grad.data(), grad.data() + grad.size());
      numeric_all.insert(numeric_all.end(), numeric.data(), numeric.data() + numeric.size());
    }
    const auto as_vector = [](const std::vector<double>& v) {
      return Vector<double>(Eigen::Map<const Vector<double>>(v.data(), std::ssize(v)));
    };
    miim_param = std::max(miim_param, relative_error(as_vector(analytic_all), as_vector(numeric_all)));
  }
  const double worst = std::max({cmkic, cls, triplet, miim_in, miim_param});
  return {worst < 1e-4, format("worst relative error: cmkic %.1e, cls %.1e, triplet %.1e, miim input %.1e, "
                               "miim params %.1e (limit 1e-4)",
                               cmkic, cls, triplet, miim_in, miim_param)};
}

// ---------------------------------------------------------------- 4

Verdict miim_invariants() {
  Rng rng(4);
  int checks = 0, failures = 0;
  const auto expect = [&](bool ok) {
    ++checks;
    failures += !ok;
  };
  const NetworkConfig net;
  for (int p = 0; p < 4; ++p) {
    const MiimConfig cfg = net.miim_config(p);
    Miim<float> block(cfg, rng);
    const auto f1 = random_tensor<float>({1, cfg.in_channels, cfg.in_height, cfg.in_width}, rng);
    block.forward(f1, Mode::kTrain);
    expect(block.forward(f1, Mode::kEval).shape() == f1.shape());
  }
  for (int trial = 0; trial < 100; ++trial) {
    const MiimConfig cfg = random_miim_config(rng);
    Miim<double> block(cfg, rng);
    const auto f1 = random_tensor<double>({2, cfg.in_channels, cfg.in_height, cfg.in_width}, rng);
    block.forward(f1, Mode::kTrain);
    const auto out = block.forward(f1, Mode::kEval);
    expect(out.shape() == f1.shape());
    const auto& gate = block.upsampled_gate();
    expect(gate.values().minCoeff() > 0.0 && gate.values().maxCoeff() < 1.0);
    const auto& w = block.attention_weights();
    const Index lk = w.dim(3);
    double worst = 0.0;
    for (Index r = 0; r < w.size() / lk; ++r) worst = std::max(worst, std::abs(w.values().segment(r * lk, lk).sum() - 1));
    expect(worst < 1e-9);
    expect(block.forward(f1, Mode::kEval) == out);
  }
  return {failures == 0, format("%d/%d checks over 4 default placements and 100 random configs", checks - failures,
                                checks)};
}

// ---------------------------------------------------------------- 5

Verdict metric_oracle() {
  Rng rng(5);
  int mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index nq = std::uniform_int_distribution<Index>(1, 20)(rng);
    const Index ng = std::uniform_int_distribution<Index>(1, 50)(rng);
    const Index classes = std::uniform_int_distribution<Index>(2, 8)(rng);
    RowMatrix<double> q, g;
    if (trial % 3 == 0) {  // coarse values force score ties
      q = (random_matrix<double>(nq, 3, rng).array() * 1.5).round().matrix();
      g = (random_matrix<double>(ng, 3, rng).array() * 1.5).round().matrix();
    } else {
      q = random_unit_rows(nq, 8, rng);
      g = random_unit_rows(ng, 8, rng);
    }
    std::uniform_int_distribution<Index> id(0, classes - 1);
    std::vector<Index> qid, gid;
    for (Index i = 0; i < nq; ++i) qid.push_back(id(rng));
    for (Index i = 0; i < ng; ++i) gid.push_back(id(rng));
    const auto got = compute_cmc_map(q, qid, std::vector<Index>(qid.size(), 0), g, gid,
                                     std::vector<Index>(gid.size(), 0));
    const auto want = oracle_cmc_map(q, qid, g, gid);
    bool same = got.queries == want.queries && got.cmc.size() == want.cmc.size() &&
                std::abs(got.map - want.map) <= 1e-12;
    for (size_t k = 0; same && k < got.cmc.size(); ++k) same = std::abs(got.cmc[k] - want.cmc[k]) <= 1e-12;
    mismatches += !same;
  }

  RowMatrix<double> q(1, 1), g(5, 1);
  q << 1.0;
  g << 0.9, 0.8, 0.7, 0.6, 0.5;
  const double ap = compute_cmc_map(q, {4}, {0}, g, {4, 1, 4, 2, 3}, {0, 0, 0, 0, 0}).map;
  const double ap_definition = (1.0 / 1.0 + 2.0 / 3.0) / 2.0;
  const bool ap_ok = ap == ap_definition;

  Manifest m;
  for (Index id = 0; id < 5; ++id) {
    for (Index cam : {1, 2, 4, 5}) {
      for (int k = 0; k < 11; ++k) m.records.push_back({"x", id, cam, Modality::kVis});
    }
    for (Index cam : {3, 6}) {
      for (int k = 0; k < 3; ++k) m.records.push_back({"x", id, cam, Modality::kIr});
    }
  }
  for (Index id = 0; id < 5; ++id) m.id_map[id] = id;
  RowMatrix<double> onehot = RowMatrix<double>::Zero(std::ssize(m.records), 5);
  for (size_t i = 0; i < m.records.size(); ++i) onehot(static_cast<Index>(i), m.records[i].person_id) = 1.0;
  bool perfect = true;
  for (SearchMode mode : {SearchMode::kAllSearch, SearchMode::kIndoorSearch, SearchMode::kSymmetric}) {
    for (Index shot : {1, 10}) {
      for (Direction d : {Direction::kVis2Ir, Direction::kIr2Vis}) {
        EvalProtocol p;
        p.mode = mode;
        p.shot = shot;
        p.direction = d;
        const auto r = evaluate_features(onehot, m, p, 1);
        perfect &= r.cmc[0] == 1.0 && r.map == 1.0;
      }
    }
  }
  return {mismatches == 0 && ap_ok && perfect,
          format("%d/100 instances match the exhaustive oracle; AP fixture %.17g (expected (1/1 + 2/3)/2 = %.17g); "
                 "perfect features %s",
                 100 - mismatches, ap, ap_definition, perfect ? "exact" : "NOT exact")};
}

// ---------------------------------------------------------------- 6

Verdict key_instances() {
  Rng rng(6);
  std::uniform_int_distribution<int> level(-5, 5);
  std::normal_distribution<double> cont;
  int mismatches = 0, with_ties = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Index n = std::uniform_int_distribution<Index>(2, 24)(rng);
    const Index classes = std::uniform_int_distribution<Index>(1, 4)(rng);
    std::vector<Index> ids;
    for (Index j = 0; j < n; ++j) ids.push_back(std::uniform_int_distribution<Index>(0, classes - 1)(rng));
    const Index anchor_id = ids[0];
    const Index same = std::count(ids.begin(), ids.end(), anchor_id);
    const Index k = std::uniform_int_distribution<Index>(1, same)(rng);
    // Candidates are unit vectors in 2-D; similarity to e1 is their first coordinate.
    const bool ties = trial % 2 == 0;
    std::vector<double> sims;
    RowMatrix<double> cand(n, 2);
    for (Index j = 0; j < n; ++j) {
      const double s = ties ? level(rng) / 5.0 : std::tanh(cont(rng));
      sims.push_back(s);
      cand(j, 0) = s;
      cand(j, 1) = std::sqrt(1.0 - s * s);
    }
    std::vector<double> same_sims;
    for (Index j = 0; j < n; ++j) {
      if (ids[static_cast<size_t>(j)] == anchor_id) same_sims.push_back(sims[static_cast<size_t>(j)]);
    }
    std::sort(same_sims.begin(), same_sims.end());
    with_ties += std::adjacent_find(same_sims.begin(), same_sims.end()) != same_sims.end();
    Vector<double> anchor(2);
    anchor << 1.0, 0.0;
    mismatches += select_key_instances<double>(anchor, cand, ids, anchor_id, k) !=
                  oracle_key_instances(sims, ids, anchor_id, k);
  }
  return {mismatches == 0, format("%d/1000 instances match the full-sort oracle (%d with tied similarities)",
                                  1000 - mismatches, with_ties)};
}

// ---------------------------------------------------------------- 7

struct SmokeRun {
  double rank1 = 0.0, map = 0.0, seconds = 0.0;
};

SmokeRun smoke_run(const std::string& config, const fs::path& data, const fs::path& out, std::uint64_t seed) {
  RunConfig cfg = load_run_config(std::string(WRIM_SOURCE_DIR) + "/configs/" + config);
  cfg.train_manifest = (data / "train.jsonl").string();
  cfg.test_manifest = (data / "test.jsonl").string();
  cfg.output_dir = out.string();
  cfg.seed = seed;
  cfg.sampler.seed = seed;
  const auto start = std::chrono::steady_clock::now();
  const auto outcome = train(cfg);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const auto result = evaluate(cfg, outcome.final_checkpoint);
  return {result.rank(1), result.map, seconds};
}

Verdict end_to_end() {
  const fs::path root = scratch("smoke");
  const std::uint64_t seeds[] = {0, 1, 2};
  double full = 0.0, base = 0.0, full_seconds = 0.0, base_seconds = 0.0;
  std::string per_seed;
  for (std::uint64_t seed : seeds) {
    SynthConfig sc;
    sc.num_ids = 20;
    sc.per_id = 10;
    sc.seed = seed;
    const fs::path data = root / ("data_" + std::to_string(seed));
    generate_synthetic_dataset(sc, data.string());
    const auto f = smoke_run("smoke_full.json", data, root / ("full_" + std::to_string(seed)), seed);
    const auto b = smoke_run("smoke_baseline.json", data, root / ("baseline_" + std::to_string(seed)), seed);
    std::printf("  seed %llu: full Rank-1 %.4f mAP %.4f (%.0f s), baseline Rank-1 %.4f mAP %.4f (%.0f s)\n",
                static_cast<unsigned long long>(seed), f.rank1, f.map, f.seconds, b.rank1, b.map, b.seconds);
    std::fflush(stdout);
    full += f.rank1 / 3;
    base += b.rank1 / 3;
    full_seconds = std::max(full_seconds, f.seconds);
    base_seconds = std::max(base_seconds, b.seconds);
  }
  const bool pass = full >= 0.90 && full > base;
  return {pass, format("mean held-out Rank-1 over seeds 0-2: full %.4f (need >= 0.90), baseline %.4f; longest "
                       "training %.0f s full, %.0f s baseline",
                       full, base, full_seconds, base_seconds)};
}

// ---------------------------------------------------------------- 8

Verdict determinism() {
  const fs::path root = scratch("determinism");
  SynthConfig sc;
  sc.num_ids = 8;
  sc.per_id = 6;
  sc.test_per_id = 2;
  sc.seed = 8;
  generate_synthetic_dataset(sc, (root / "data").string());
  std::string logs[2], reports[2], checkpoints[2];
  for (int run = 0; run < 2; ++run) {
    RunConfig cfg = load_run_config(std::string(WRIM_SOURCE_DIR) + "/configs/smoke_full.json");
    cfg.network.num_classes = 8;
    cfg.train_manifest = (root / "data" / "train.jsonl").string();
    cfg.test_manifest = (root / "data" / "test.jsonl").string();
    cfg.output_dir = (root / ("run_" + std::to_string(run))).string();
    cfg.precision = Precision::kFloat64;
    cfg.epochs = 3;
    cfg.seed = 17;
    cfg.eval.trials = 3;
    const auto outcome = train(cfg, 1);
    evaluate(cfg, outcome.final_checkpoint, 1);
    logs[run] = slurp(outcome.log_path);
    reports[run] = slurp(fs::path(cfg.output_dir) / "eval_report.json");
    checkpoints[run] = slurp(outcome.final_checkpoint);
  }
  const auto lines = std::count(logs[0].begin(), logs[0].end(), '\n');
  const bool pass = !logs[0].empty() && logs[0] == logs[1] && reports[0] == reports[1] &&
                    checkpoints[0] == checkpoints[1];
  return {pass, format("float64, 1 worker, two runs: loss logs %s (%ld lines), eval reports %s, checkpoints %s",
                       logs[0] == logs[1] ? "identical" : "DIFFER", static_cast<long>(lines),
                       reports[0] == reports[1] ? "identical" : "DIFFER",
                       checkpoints[0] == checkpoints[1] ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"complexity reproduction", complexity},
      {"CMKIC oracle equivalence", cmkic_oracle},
      {"gradient checks", gradients},
      {"MIIM invariant suite", miim_invariants},
      {"metric oracle", metric_oracle},
      {"key-instance selection", key_instances},
      {"end-to-end synthetic smoke with ablation direction", end_to_end},
      {"determinism", determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(number)) continue;
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s criterion %d (%s): %s [%.1f s]\n", v.pass ? "PASS" : "FAIL", number, criteria[i].first.c_str(),
                v.detail.c_str(), seconds);
    std::fflush(stdout);
    failed += !v.pass;
  }
  return failed == 0 ? 0 : 1;
}
