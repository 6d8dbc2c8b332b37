#include "mbse3/runconfig.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace mbse3::runconfig {

namespace {

std::string join_path(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

/// Pulls typed fields out of one JSON object and rejects everything else.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& doc, std::string prefix)
      : doc_(doc), prefix_(std::move(prefix)) {
    if (!doc_.is_object()) {
      throw ConfigError("config: '" + (prefix_.empty() ? std::string("<root>") : prefix_) +
                        "' must be a JSON object");
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return doc_.contains(key);
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return doc_.at(key);
  }

  void read_int(const std::string& key, int& out) {
    if (!has(key)) return;
    const nlohmann::json& v = doc_.at(key);
    if (!v.is_number_integer()) fail(key, "an integer");
    out = v.get<int>();
  }

  void read_u64(const std::string& key, uint64_t& out) {
    if (!has(key)) return;
    const nlohmann::json& v = doc_.at(key);
    if (!v.is_number_integer()) fail(key, "a non-negative integer");
    if (!v.is_number_unsigned() && v.get<int64_t>() < 0) fail(key, "a non-negative integer");
    out = v.get<uint64_t>();
  }

  void read_double(const std::string& key, double& out) {
    if (!has(key)) return;
    const nlohmann::json& v = doc_.at(key);
    if (!v.is_number()) fail(key, "a number");
    out = v.get<double>();
  }

  void read_bool(const std::string& key, bool& out) {
    if (!has(key)) return;
    const nlohmann::json& v = doc_.at(key);
    if (!v.is_boolean()) fail(key, "a boolean");
    out = v.get<bool>();
  }

  void read_string(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const nlohmann::json& v = doc_.at(key);
    if (!v.is_string()) fail(key, "a string");
    out = v.get<std::string>();
  }

  /// Every key consumed so far is known; anything left over is an error.
  void finish() const {
    for (const auto& item : doc_.items()) {
      if (!seen_.count(item.key())) {
        throw ConfigError("config: unknown key '" + join_path(prefix_, item.key()) + "'");
      }
    }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& expected) const {
    throw ConfigError("config: field '" + join_path(prefix_, key) + "' must be " + expected);
  }

  const std::string& prefix() const { return prefix_; }

 private:
  const nlohmann::json& doc_;
  std::string prefix_;
  std::set<std::string> seen_;
};

void parse_scene(const nlohmann::json& doc, scenegen::SceneSpec& spec) {
  ObjectReader r(doc, "scene");
  r.read_int("min_parts", spec.min_parts);
  r.read_int("max_parts", spec.max_parts);
  r.read_int("points", spec.points);
  r.read_int("min_points_per_part", spec.min_points_per_part);
  r.read_double("min_rotation_deg", spec.min_rotation_deg);
  r.read_double("max_rotation_deg", spec.max_rotation_deg);
  r.read_double("min_translation", spec.min_translation);
  r.read_double("max_translation", spec.max_translation);
  r.read_double("flow_noise_sigma", spec.flow_noise_sigma);
  r.read_double("outlier_fraction", spec.outlier_fraction);
  if (r.has("rotation_mode")) {
    const nlohmann::json& v = r.raw("rotation_mode");
    if (!v.is_string()) r.fail("rotation_mode", "a string");
    const std::string mode = v.get<std::string>();
    if (mode == "group-member") {
      spec.rotation_mode = scenegen::RotationMode::kGroupMember;
    } else if (mode == "continuous") {
      spec.rotation_mode = scenegen::RotationMode::kContinuous;
    } else {
      throw ConfigError(
          "config: field 'scene.rotation_mode' must be \"group-member\" or \"continuous\", got \"" +
          mode + "\"");
    }
  }
  r.finish();
}

void parse_backbone(const nlohmann::json& doc, backbone::BackboneConfig& cfg) {
  ObjectReader r(doc, "backbone");
  if (r.has("layer_dims")) {
    const nlohmann::json& v = r.raw("layer_dims");
    if (!v.is_array() || v.empty()) r.fail("layer_dims", "a non-empty array of integers");
    cfg.layer_dims.clear();
    for (const nlohmann::json& e : v) {
      if (!e.is_number_integer()) r.fail("layer_dims", "a non-empty array of integers");
      cfg.layer_dims.push_back(e.get<int>());
    }
  }
  r.read_int("neighbors_k", cfg.neighbors_k);
  r.read_double("kernel_radius", cfg.kernel_radius);
  r.read_double("kernel_bandwidth", cfg.kernel_bandwidth);
  if (r.has("kernel_points")) {
    const nlohmann::json& v = r.raw("kernel_points");
    if (!v.is_array()) r.fail("kernel_points", "an array of [x, y, z] triples");
    cfg.kernel_points.clear();
    for (const nlohmann::json& p : v) {
      if (!p.is_array() || p.size() != 3 || !p[0].is_number() || !p[1].is_number() ||
          !p[2].is_number()) {
        r.fail("kernel_points", "an array of [x, y, z] triples");
      }
      cfg.kernel_points.emplace_back(p[0].get<double>(), p[1].get<double>(), p[2].get<double>());
    }
  }
  r.finish();
}

void parse_heads(const nlohmann::json& doc, heads::HeadsConfig& cfg) {
  ObjectReader r(doc, "heads");
  r.read_int("slots", cfg.slots);
  r.read_int("hidden", cfg.hidden);
  r.read_double("motion_temperature", cfg.motion_temperature);
  r.finish();
}

void parse_trainer(const nlohmann::json& doc, trainer::TrainerConfig& cfg) {
  ObjectReader r(doc, "trainer");
  r.read_double("flow_decay", cfg.flow_decay);
  r.read_double("consensus_temperature", cfg.consensus_temperature);
  r.read_double("learning_rate", cfg.learning_rate);
  r.read_int("epochs", cfg.epochs);
  r.read_int("cold_start_epochs", cfg.cold_start_epochs);
  r.read_double("lambda_seg", cfg.lambda_seg);
  r.read_double("lambda_mot", cfg.lambda_mot);
  r.finish();
}

void parse_data(const nlohmann::json& doc, DataConfig& cfg) {
  ObjectReader r(doc, "data");
  r.read_string("root", cfg.root);
  r.read_int("train_scenes", cfg.train_scenes);
  r.read_int("val_scenes", cfg.val_scenes);
  r.read_int("test_scenes", cfg.test_scenes);
  r.finish();
}

void parse_paths(const nlohmann::json& doc, PathsConfig& cfg) {
  ObjectReader r(doc, "paths");
  r.read_string("checkpoint", cfg.checkpoint);
  r.read_string("record", cfg.record);
  r.read_string("report", cfg.report);
  r.read_string("csv", cfg.csv);
  r.finish();
}

void parse_eval(const nlohmann::json& doc, EvalConfig& cfg) {
  ObjectReader r(doc, "eval");
  r.read_int("refine_rounds", cfg.refine_rounds);
  r.read_bool("oracle", cfg.oracle);
  r.finish();
}

void parse_train_flags(const nlohmann::json& doc, TrainFlags& cfg) {
  ObjectReader r(doc, "train");
  r.read_bool("resume", cfg.resume);
  r.finish();
}

void parse_check(const nlohmann::json& doc, CheckConfig& cfg) {
  ObjectReader r(doc, "check");
  r.read_string("fault_injection", cfg.fault_injection);
  r.finish();
}

}  // namespace

void RunConfig::validate() const {
  try {
    scene.validate();
    trainer.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (data.train_scenes < 0 || data.val_scenes < 0 || data.test_scenes < 0) {
    throw ConfigError("config: scene counts under 'data' must be non-negative");
  }
  if (data.root.empty()) throw ConfigError("config: field 'data.root' must be non-empty");
  if (paths.checkpoint.empty() || paths.record.empty() || paths.report.empty() ||
      paths.csv.empty()) {
    throw ConfigError("config: fields under 'paths' must be non-empty");
  }
  if (eval.refine_rounds < 0) {
    throw ConfigError("config: field 'eval.refine_rounds' must be non-negative");
  }
  if (check.fault_injection != "none" && check.fault_injection != "kabsch-reflection") {
    throw ConfigError(
        "config: field 'check.fault_injection' must be \"none\" or \"kabsch-reflection\", got \"" +
        check.fault_injection + "\"");
  }
}

RunConfig parse_run_config(const nlohmann::json& doc) {
  RunConfig cfg;
  ObjectReader root(doc, "");
  root.read_u64("seed", cfg.seed);
  if (root.has("scene")) parse_scene(root.raw("scene"), cfg.scene);
  if (root.has("backbone")) parse_backbone(root.raw("backbone"), cfg.trainer.backbone);
  if (root.has("heads")) parse_heads(root.raw("heads"), cfg.trainer.heads);
  if (root.has("trainer")) parse_trainer(root.raw("trainer"), cfg.trainer);
  if (root.has("data")) parse_data(root.raw("data"), cfg.data);
  if (root.has("paths")) parse_paths(root.raw("paths"), cfg.paths);
  if (root.has("eval")) parse_eval(root.raw("eval"), cfg.eval);
  if (root.has("train")) parse_train_flags(root.raw("train"), cfg.train);
  if (root.has("check")) parse_check(root.raw("check"), cfg.check);
  root.finish();

  cfg.scene.seed = cfg.seed;
  cfg.trainer.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("config: override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;  // bare words (paths, mode names) stay strings

  nlohmann::json* node = &doc;
  std::istringstream parts(key);
  std::string segment;
  std::vector<std::string> segments;
  while (std::getline(parts, segment, '.')) segments.push_back(segment);
  if (segments.empty() || key.back() == '.') {
    throw ConfigError("config: override key '" + key + "' is malformed");
  }
  for (size_t i = 0; i + 1 < segments.size(); ++i) {
    if (segments[i].empty()) throw ConfigError("config: override key '" + key + "' is malformed");
    if (!node->is_object()) {
      throw ConfigError("config: override key '" + key + "' descends into a non-object");
    }
    node = &(*node)[segments[i]];
    if (node->is_null()) *node = nlohmann::json::object();
  }
  if (segments.back().empty()) {
    throw ConfigError("config: override key '" + key + "' is malformed");
  }
  if (!node->is_object()) {
    throw ConfigError("config: override key '" + key + "' descends into a non-object");
  }
  (*node)[segments.back()] = value;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config: file '" + path + "' is not valid JSON");
  for (const std::string& assignment : overrides) apply_override(doc, assignment);
  return parse_run_config(doc);
}

}  // namespace mbse3::runconfig
