#include <fstream>

#include "acia/harness.hpp"
#include "acia/json_io.hpp"

namespace acia::harness {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Every object key in `user` must exist in `ref`; arrays are taken whole.
void check_known_keys(const json& user, const json& ref, const std::string& path) {
  if (!user.is_object() || !ref.is_object()) return;
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!ref.contains(it.key())) throw HarnessError("config", "unknown config key: " + p);
    check_known_keys(it.value(), ref.at(it.key()), p);
  }
}

}  // namespace

void ExperimentConfig::resolve() {
  detector.num_classes = benchmark.num_classes;
  detector.image_size = benchmark.image_size;
}

void ExperimentConfig::validate() const {
  benchmark.validate();
  detector.validate();
  alignment.validate();
  if (detector.num_classes != benchmark.num_classes || detector.image_size != benchmark.image_size) {
    throw HarnessError("config", "detector class count / image size must match the benchmark (call resolve)");
  }
  if (burn_in_steps < 0 || mutual_steps < 0) throw HarnessError("config", "step counts must be nonnegative");
  if (target_batch < 0) throw HarnessError("config", "target_batch must be nonnegative");
  if (ablation.class_conditioning && !ablation.instance_align) {
    throw HarnessError("config", "class_conditioning requires instance_align");
  }
  if (ablation.include_target_in_cdis && !ablation.instance_align) {
    throw HarnessError("config", "include_target_in_cdis requires instance_align");
  }
  if (optimizer.lr <= 0) throw HarnessError("config", "optimizer.lr must be positive");
  if (log_every < 1) throw HarnessError("config", "log_every must be positive");
}

align::MergeMode ExperimentConfig::effective_merge_mode() const {
  if (!ablation.class_conditioning) return align::MergeMode::agnostic;
  if (alignment.merge_mode == align::MergeMode::agnostic) {
    throw HarnessError("config", "merge_mode agnostic contradicts class_conditioning=true");
  }
  return alignment.merge_mode;
}

ordered_json to_json(const ExperimentConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["burn_in_steps"] = c.burn_in_steps;
  j["mutual_steps"] = c.mutual_steps;
  j["target_batch"] = c.target_batch;
  j["log_every"] = c.log_every;
  j["diag_images_per_domain"] = c.diag_images_per_domain;
  j["projection_points"] = c.projection_points;
  j["data_dir"] = c.data_dir;
  j["ablation"] = {{"image_align", c.ablation.image_align},
                   {"instance_align", c.ablation.instance_align},
                   {"class_conditioning", c.ablation.class_conditioning},
                   {"include_target_in_cdis", c.ablation.include_target_in_cdis}};
  j["alignment"] = ordered_json(json(c.alignment));
  j["optimizer"] = ordered_json(json(c.optimizer));
  j["weak_aug"] = ordered_json(json(c.weak_aug));
  j["strong_aug"] = ordered_json(json(c.strong_aug));
  j["detector"] = ordered_json(json(c.detector));
  j["benchmark"] = ordered_json(json(c.benchmark));
  return j;
}

ExperimentConfig config_from_json(const json& user) {
  if (!user.is_object()) throw HarnessError("config", "config must be a JSON object");
  const ExperimentConfig defaults;
  json merged = json(to_json(defaults));
  check_known_keys(user, merged, "");
  merged.merge_patch(user);
  ExperimentConfig c;
  try {
    c.seed = merged.at("seed").get<std::uint64_t>();
    c.burn_in_steps = merged.at("burn_in_steps").get<int>();
    c.mutual_steps = merged.at("mutual_steps").get<int>();
    c.target_batch = merged.at("target_batch").get<int>();
    c.log_every = merged.at("log_every").get<int>();
    c.diag_images_per_domain = merged.at("diag_images_per_domain").get<int>();
    c.projection_points = merged.at("projection_points").get<int>();
    c.data_dir = merged.at("data_dir").get<std::string>();
    const json& a = merged.at("ablation");
    c.ablation.image_align = a.at("image_align").get<bool>();
    c.ablation.instance_align = a.at("instance_align").get<bool>();
    c.ablation.class_conditioning = a.at("class_conditioning").get<bool>();
    c.ablation.include_target_in_cdis = a.at("include_target_in_cdis").get<bool>();
    c.alignment = merged.at("alignment").get<align::AlignmentConfig>();
    c.optimizer = merged.at("optimizer").get<mt::OptimizerConfig>();
    c.weak_aug = merged.at("weak_aug").get<mt::WeakAugConfig>();
    c.strong_aug = merged.at("strong_aug").get<mt::StrongAugConfig>();
    c.detector = merged.at("detector").get<det::DetectorConfig>();
    c.benchmark = merged.at("benchmark").get<synth::BenchmarkConfig>();
  } catch (const json::exception& e) {
    throw HarnessError("config", std::string("bad config value: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw HarnessError("config", e.what());
  }
  // an explicit detector block may still disagree; the benchmark wins only
  // when the user did not set the detector fields
  const bool user_k = user.contains("detector") && user["detector"].contains("num_classes");
  const bool user_size = user.contains("detector") && user["detector"].contains("image_size");
  if (!user_k) c.detector.num_classes = c.benchmark.num_classes;
  if (!user_size) c.detector.image_size = c.benchmark.image_size;
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw HarnessError("io", "cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw HarnessError("config", path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw HarnessError("config", "override must be key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (node->is_object()) {
      if (!node->contains(part)) throw HarnessError("config", "unknown config key: " + key);
      node = &(*node)[part];
    } else if (node->is_array()) {
      std::size_t idx = 0;
      try {
        std::size_t used = 0;
        idx = std::stoul(part, &used);
        if (used != part.size()) throw std::invalid_argument(part);
      } catch (const std::exception&) {
        throw HarnessError("config", "array index expected in " + key);
      }
      if (idx >= node->size()) throw HarnessError("config", "index out of range in " + key);
      node = &(*node)[idx];
    } else {
      throw HarnessError("config", "cannot descend into scalar at " + key);
    }
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = value;
}

ExperimentConfig with_overrides(const ExperimentConfig& cfg, const std::vector<std::string>& overrides) {
  if (overrides.empty()) return cfg;
  json j = json(to_json(cfg));
  for (const std::string& o : overrides) apply_override(j, o);
  // a changed benchmark size/class count drags the detector along unless the
  // detector field itself was overridden
  ExperimentConfig out = config_from_json(j);
  bool det_k = false, det_size = false;
  for (const std::string& o : overrides) {
    det_k = det_k || o.rfind("detector.num_classes=", 0) == 0;
    det_size = det_size || o.rfind("detector.image_size=", 0) == 0;
  }
  if (!det_k) out.detector.num_classes = out.benchmark.num_classes;
  if (!det_size) out.detector.image_size = out.benchmark.image_size;
  return out;
}

}  // namespace acia::harness
