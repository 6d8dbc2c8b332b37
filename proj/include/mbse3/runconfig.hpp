#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mbse3/scenegen.hpp"
#include "mbse3/trainer.hpp"

namespace mbse3::runconfig {

/// Raised for malformed config documents: bad JSON, unknown keys, wrong field
/// types, out-of-range values, or malformed --set assignments.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when a referenced file or directory cannot be read or written.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string root = "data";
  int train_scenes = 200;
  int val_scenes = 0;
  int test_scenes = 50;
};

struct PathsConfig {
  std::string checkpoint = "checkpoint.json";
  std::string record = "train_record.jsonl";
  std::string report = "report.json";
  std::string csv = "report.csv";
};

struct EvalConfig {
  /// Alternating flow-EMA / motion re-estimation passes per scene.
  int refine_rounds = 5;
  /// Score ground-truth masks and motions instead of the model's.
  bool oracle = false;
};

struct TrainFlags {
  /// Continue from the checkpoint and record file if both exist.
  bool resume = false;
};

struct CheckConfig {
  /// "none" or "kabsch-reflection" (skips the determinant fix so the
  /// mirrored-points property fails on purpose).
  std::string fault_injection = "none";
};

/// One document describing a full run: dataset geometry, model and trainer
/// hyperparameters, artifact paths, and per-command switches. The top-level
/// seed feeds both scene generation and parameter initialization.
struct RunConfig {
  uint64_t seed = 0;
  scenegen::SceneSpec scene;
  trainer::TrainerConfig trainer;
  DataConfig data;
  PathsConfig paths;
  EvalConfig eval;
  TrainFlags train;
  CheckConfig check;

  /// Throws ConfigError on an unusable configuration.
  void validate() const;
};

/// Parses a config document; every key must be known and well-typed, and the
/// result passes validate(). Error messages name the offending dotted path.
RunConfig parse_run_config(const nlohmann::json& doc);

/// Reads the JSON file at path, applies "dotted.key=value" overrides in
/// order, then parses strictly. Values parse as JSON when possible and fall
/// back to strings, so `scene.points=256` and `data.root=out/run1` both work.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {});

/// Applies one override assignment to a document (shared by load_run_config).
void apply_override(nlohmann::json& doc, const std::string& assignment);

}  // namespace mbse3::runconfig
