#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mbse3/diffcore.hpp"
#include "mbse3/metrics.hpp"
#include "mbse3/scenegen.hpp"
#include "mbse3/trainer.hpp"

namespace mbse3::evalrun {

/// Raised when a loaded checkpoint and the config disagree on the parameter
/// set or any parameter's shape.
struct CheckpointMismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One evaluated scene: the seven segmentation scores plus flow and motion
/// errors. epe3d measures the refined flow; initial_epe3d the noisy input
/// flow. The motion means are absent when no part was matched at IoU > 0.5.
struct SceneEvalRow {
  std::string scene_id;
  metrics::SegmentationEval seg;
  double epe3d = 0.0;
  std::optional<double> angular_error_deg;
  std::optional<double> translation_error;
  double initial_epe3d = 0.0;
};

struct EvalReport {
  std::vector<SceneEvalRow> rows;
};

/// Verifies that every parameter the config would register exists in the
/// loaded store with the same shape (and nothing extra is present). Throws
/// CheckpointMismatchError naming the first offending parameter.
void check_params_match(const diff::ParamStore& loaded, const trainer::TrainerConfig& cfg);

/// Scores one scene. The model path segments frame K, correlates both
/// frames, then alternates motion estimation with flow-EMA updates
/// (refine_rounds times, blend weight cfg.flow_decay). The oracle path
/// substitutes the ground-truth mask and transforms and replaces the flow
/// with their rigid flow outright.
SceneEvalRow evaluate_scene(const scenegen::SceneSample& scene, const trainer::TrainerConfig& cfg,
                            const diff::ParamStore& params, int refine_rounds, bool oracle);

EvalReport evaluate_dataset(const std::vector<scenegen::SceneSample>& scenes,
                            const trainer::TrainerConfig& cfg, const diff::ParamStore& params,
                            int refine_rounds, bool oracle);

/// {"per_scene": [...], "aggregate": {...}} where every aggregate entry is
/// the mean of the corresponding per-scene column (motion means are averaged
/// over the scenes where they exist and are null when that set is empty).
nlohmann::ordered_json report_json(const EvalReport& report);

void write_report_json(const EvalReport& report, const std::string& path);

/// Flat CSV, one row per scene, exactly ten columns:
/// scene_id, ap, pq, f1, precision, recall, miou, ri, epe3d, angular_error_deg.
/// An absent angular error prints as nan.
void write_report_csv(const EvalReport& report, const std::string& path);

}  // namespace mbse3::evalrun
