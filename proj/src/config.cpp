#include "wrim/config.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

namespace wrim {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reads optional keys from one JSON object and rejects the rest.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw std::invalid_argument(where() + "expected a JSON object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(where() + key + ": " + e.what());
    }
  }

  template <typename T, typename Parse>
  void get_with(const std::string& key, T& out, Parse parse) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = parse(j_.at(key));
    } catch (const json::exception& e) {
      throw std::invalid_argument(where() + key + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where() + key + ": " + e.what());
    }
  }

  const json* section(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  std::string child(const std::string& key) const { return context_.empty() ? key : context_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw std::invalid_argument("unknown config key '" + child(key) + "'");
    }
  }

 private:
  std::string where() const { return context_.empty() ? "config: " : "config " + context_ + ": "; }

  const json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

template <typename T, size_t N>
std::array<T, N> fixed_array(const json& j) {
  const auto v = j.get<std::vector<T>>();
  if (v.size() != N) throw std::invalid_argument("expected " + std::to_string(N) + " values");
  std::array<T, N> out;
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }
std::string_view to_string(Precision p) { return p == Precision::kFloat32 ? "float32" : "float64"; }

OptimizerKind parse_optimizer(const json& j) {
  const auto s = j.get<std::string>();
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw std::invalid_argument("unknown optimizer '" + s + "', expected sgd or adam");
}

Precision parse_precision(const json& j) {
  const auto s = j.get<std::string>();
  if (s == "float32") return Precision::kFloat32;
  if (s == "float64") return Precision::kFloat64;
  throw std::invalid_argument("unknown precision '" + s + "', expected float32 or float64");
}

void read_network(ObjectReader& r, NetworkConfig& n) {
  r.get("input_height", n.input_height);
  r.get("input_width", n.input_width);
  r.get("local_parts_p5", n.local_parts_p5);
  r.get("local_parts_p4", n.local_parts_p4);
  r.get("num_classes", n.num_classes);
  r.get("last_stride", n.last_stride);
  r.get_with("stage_blocks", n.stage_blocks, fixed_array<Index, 4>);
  r.get("base_width", n.base_width);
  r.get_with("pretrained_weights", n.pretrained_weights, [](const json& j) -> std::optional<std::string> {
    if (j.is_null()) return std::nullopt;
    return j.get<std::string>();
  });
  r.get("use_miim", n.use_miim);
  r.get_with("spatial_ratio", n.spatial_ratio, fixed_array<Index, 4>);
  r.get_with("channel_ratio", n.channel_ratio, fixed_array<Index, 4>);
  r.get("pool_window", n.pool_window);
  r.get("heads", n.heads);
  r.get("positional_embedding", n.positional_embedding);
  r.get("use_aux_p4", n.use_aux_p4);
  r.get("mlp_hidden", n.mlp_hidden);
  r.get("mlp_out", n.mlp_out);
  r.finish();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  const fs::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal();
}

}  // namespace

void OptimizerConfig::validate() const {
  require(base_lr > 0.0, "optimizer: base_lr must be > 0");
  require(momentum >= 0.0 && momentum < 1.0, "optimizer: momentum must lie in [0, 1)");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "optimizer: betas must lie in [0, 1)");
  require(epsilon > 0.0, "optimizer: epsilon must be > 0");
  require(weight_decay >= 0.0, "optimizer: weight_decay must be >= 0");
  require(warmup_epochs >= 0, "optimizer: warmup_epochs must be >= 0");
  require(gamma > 0.0, "optimizer: gamma must be > 0");
  require(trunk_lr_scale > 0.0, "optimizer: trunk_lr_scale must be > 0");
  for (size_t i = 0; i < milestones.size(); ++i) {
    require(milestones[i] >= 1 && (i == 0 || milestones[i] > milestones[i - 1]),
            "optimizer: milestones must be positive and increasing");
  }
}

double OptimizerConfig::learning_rate(Index epoch) const {
  if (epoch < warmup_epochs) return base_lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
  double lr = base_lr;
  for (Index m : milestones) {
    if (epoch >= m) lr *= gamma;
  }
  return lr;
}

void RunConfig::validate(bool check_paths) const {
  network.validate();
  loss.validate();
  sampler.validate();
  eval.validate();
  optimizer.validate();
  require(epochs >= 1, "config: epochs must be >= 1");
  require(checkpoint_every >= 1, "config: checkpoint_every must be >= 1");
  require(eval_batch_size >= 1, "config: eval_batch_size must be >= 1");
  require(augment.pad >= 0, "config: augment.pad must be >= 0");
  require(augment.erasing_probability >= 0.0 && augment.erasing_probability <= 1.0,
          "config: augment.erasing_probability must lie in [0, 1]");
  require(!output_dir.empty(), "config: output_dir is empty");
  if (!check_paths) return;
  for (const auto& [key, path] : {std::pair{"train_manifest", train_manifest}, {"test_manifest", test_manifest}}) {
    require(!path.empty(), std::string("config: ") + key + " is not set");
    require(fs::exists(path), std::string("config: ") + key + " not found: " + path);
  }
  if (network.pretrained_weights) {
    require(fs::exists(*network.pretrained_weights),
            "config: network.pretrained_weights not found: " + *network.pretrained_weights);
  }
}

json to_json(const NetworkConfig& n) {
  return json{{"input_height", n.input_height},
              {"input_width", n.input_width},
              {"local_parts_p5", n.local_parts_p5},
              {"local_parts_p4", n.local_parts_p4},
              {"num_classes", n.num_classes},
              {"last_stride", n.last_stride},
              {"stage_blocks", n.stage_blocks},
              {"base_width", n.base_width},
              {"pretrained_weights", n.pretrained_weights ? json(*n.pretrained_weights) : json(nullptr)},
              {"use_miim", n.use_miim},
              {"spatial_ratio", n.spatial_ratio},
              {"channel_ratio", n.channel_ratio},
              {"pool_window", n.pool_window},
              {"heads", n.heads},
              {"positional_embedding", n.positional_embedding},
              {"use_aux_p4", n.use_aux_p4},
              {"mlp_hidden", n.mlp_hidden},
              {"mlp_out", n.mlp_out}};
}

NetworkConfig network_from_json(const json& j) {
  NetworkConfig n;
  ObjectReader r(j, "network");
  read_network(r, n);
  return n;
}

json to_json(const RunConfig& c) {
  std::vector<Index> indoor(c.eval.indoor_cameras.begin(), c.eval.indoor_cameras.end());
  return json{
      {"network", to_json(c.network)},
      {"loss",
       {{"tau", c.loss.tau},
        {"top_k", c.loss.top_k},
        {"lambda1", c.loss.lambda1},
        {"lambda2", c.loss.lambda2},
        {"triplet_margin", c.loss.triplet_margin},
        {"label_smoothing", c.loss.label_smoothing},
        {"cmkic_mean", c.loss.cmkic_mean}}},
      {"sampler", {{"p_ids", c.sampler.p_ids}, {"k_per_modality", c.sampler.k_per_modality}}},
      {"augment",
       {{"flip", c.augment.flip},
        {"pad_crop", c.augment.pad_crop},
        {"pad", c.augment.pad},
        {"erasing", c.augment.erasing},
        {"erasing_probability", c.augment.erasing_probability}}},
      {"eval",
       {{"mode", to_string(c.eval.mode)},
        {"shot", c.eval.shot},
        {"trials", c.eval.trials},
        {"direction", to_string(c.eval.direction)},
        {"indoor_cameras", indoor},
        {"batch_size", c.eval_batch_size}}},
      {"optimizer",
       {{"kind", to_string(c.optimizer.kind)},
        {"base_lr", c.optimizer.base_lr},
        {"momentum", c.optimizer.momentum},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"epsilon", c.optimizer.epsilon},
        {"weight_decay", c.optimizer.weight_decay},
        {"warmup_epochs", c.optimizer.warmup_epochs},
        {"milestones", c.optimizer.milestones},
        {"gamma", c.optimizer.gamma},
        {"trunk_lr_scale", c.optimizer.trunk_lr_scale}}},
      {"train_manifest", c.train_manifest},
      {"test_manifest", c.test_manifest},
      {"epochs", c.epochs},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"checkpoint_every", c.checkpoint_every},
      {"precision", to_string(c.precision)}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  ObjectReader r(j, "");
  if (const json* s = r.section("network")) {
    ObjectReader n(*s, "network");
    read_network(n, c.network);
  }
  if (const json* s = r.section("loss")) {
    ObjectReader l(*s, "loss");
    l.get("tau", c.loss.tau);
    l.get("top_k", c.loss.top_k);
    l.get("lambda1", c.loss.lambda1);
    l.get("lambda2", c.loss.lambda2);
    l.get("triplet_margin", c.loss.triplet_margin);
    l.get("label_smoothing", c.loss.label_smoothing);
    l.get("cmkic_mean", c.loss.cmkic_mean);
    l.finish();
  }
  if (const json* s = r.section("sampler")) {
    ObjectReader p(*s, "sampler");
    p.get("p_ids", c.sampler.p_ids);
    p.get("k_per_modality", c.sampler.k_per_modality);
    p.finish();
  }
  if (const json* s = r.section("augment")) {
    ObjectReader a(*s, "augment");
    a.get("flip", c.augment.flip);
    a.get("pad_crop", c.augment.pad_crop);
    a.get("pad", c.augment.pad);
    a.get("erasing", c.augment.erasing);
    a.get("erasing_probability", c.augment.erasing_probability);
    a.finish();
  }
  if (const json* s = r.section("eval")) {
    ObjectReader e(*s, "eval");
    e.get_with("mode", c.eval.mode, [](const json& v) { return parse_search_mode(v.get<std::string>()); });
    e.get("shot", c.eval.shot);
    e.get("trials", c.eval.trials);
    e.get_with("direction", c.eval.direction, [](const json& v) { return parse_direction(v.get<std::string>()); });
    e.get_with("indoor_cameras", c.eval.indoor_cameras, [](const json& v) {
      const auto cams = v.get<std::vector<Index>>();
      return std::set<Index>(cams.begin(), cams.end());
    });
    e.get("batch_size", c.eval_batch_size);
    e.finish();
  }
  if (const json* s = r.section("optimizer")) {
    ObjectReader o(*s, "optimizer");
    o.get_with("kind", c.optimizer.kind, parse_optimizer);
    o.get("base_lr", c.optimizer.base_lr);
    o.get("momentum", c.optimizer.momentum);
    o.get("beta1", c.optimizer.beta1);
    o.get("beta2", c.optimizer.beta2);
    o.get("epsilon", c.optimizer.epsilon);
    o.get("weight_decay", c.optimizer.weight_decay);
    o.get("warmup_epochs", c.optimizer.warmup_epochs);
    o.get("milestones", c.optimizer.milestones);
    o.get("gamma", c.optimizer.gamma);
    o.get("trunk_lr_scale", c.optimizer.trunk_lr_scale);
    o.finish();
  }
  r.get("train_manifest", c.train_manifest);
  r.get("test_manifest", c.test_manifest);
  r.get("epochs", c.epochs);
  r.get("seed", c.seed);
  r.get("output_dir", c.output_dir);
  r.get("checkpoint_every", c.checkpoint_every);
  r.get_with("precision", c.precision, parse_precision);
  r.finish();
  c.sampler.seed = c.seed;
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": malformed JSON: " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  const fs::path base = fs::path(path).parent_path();
  c.train_manifest = resolve(base, c.train_manifest).string();
  c.test_manifest = resolve(base, c.test_manifest).string();
  c.output_dir = resolve(base, c.output_dir).string();
  if (c.network.pretrained_weights) c.network.pretrained_weights = resolve(base, *c.network.pretrained_weights).string();
  return c;
}

}  // namespace wrim
