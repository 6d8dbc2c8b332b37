#include "mbse3/evalrun.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "mbse3/backbone.hpp"
#include "mbse3/heads.hpp"

namespace mbse3::evalrun {

namespace {

Eigen::MatrixXd to_matrix(const diff::Tensor& t) {
  if (t.rank() != 2) throw std::logic_error("to_matrix: rank-2 tensor required");
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      t.data(), t.dim(0), t.dim(1));
}

std::string shape_text(const std::vector<int>& shape) {
  std::string out = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

double mean_flow_error(const Eigen::Matrix<double, Eigen::Dynamic, 3>& flow,
                       const Eigen::Matrix<double, Eigen::Dynamic, 3>& reference) {
  return (flow - reference).rowwise().norm().mean();
}

SceneEvalRow score_scene(const scenegen::SceneSample& scene, const Eigen::MatrixXd& mask,
                         const std::vector<geom::RigidTransform>& slot_transforms,
                         const Eigen::Matrix<double, Eigen::Dynamic, 3>& flow,
                         double initial_epe3d) {
  SceneEvalRow row;
  row.scene_id = scene.id;
  row.seg = metrics::segmentation_scores(mask, scene.mask);
  const metrics::MotionEval motion = metrics::motion_scores(slot_transforms, flow, mask, scene);
  row.epe3d = motion.epe3d;
  row.angular_error_deg = motion.angular_error_deg;
  row.translation_error = motion.translation_error;
  row.initial_epe3d = initial_epe3d;
  return row;
}

SceneEvalRow evaluate_oracle(const scenegen::SceneSample& scene, double initial_epe3d,
                             trainer::FlowState state) {
  const int parts = scene.parts();
  Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(scene.size(), parts);
  for (int i = 0; i < scene.size(); ++i) mask(i, scene.mask[static_cast<size_t>(i)]) = 1.0;

  const geom::PointCloud cloud{scene.points_k};
  trainer::update_flow(state, cloud, mask, scene.transforms, 0.0);
  return score_scene(scene, mask, scene.transforms, state.flow, initial_epe3d);
}

}  // namespace

void check_params_match(const diff::ParamStore& loaded, const trainer::TrainerConfig& cfg) {
  diff::ParamStore expected;
  trainer::register_model_params(expected, cfg);
  for (const std::string& name : expected.names()) {
    if (!loaded.contains(name)) {
      throw CheckpointMismatchError("checkpoint does not match config: parameter '" + name +
                                    "' is missing from the checkpoint");
    }
    const std::vector<int>& want = expected.value(name).shape();
    const std::vector<int>& got = loaded.value(name).shape();
    if (want != got) {
      throw CheckpointMismatchError("checkpoint does not match config: parameter '" + name +
                                    "' has shape " + shape_text(got) + " but the config expects " +
                                    shape_text(want));
    }
  }
  for (const std::string& name : loaded.names()) {
    if (!expected.contains(name)) {
      throw CheckpointMismatchError("checkpoint does not match config: parameter '" + name +
                                    "' is not part of the configured model");
    }
  }
}

SceneEvalRow evaluate_scene(const scenegen::SceneSample& scene, const trainer::TrainerConfig& cfg,
                            const diff::ParamStore& params, int refine_rounds, bool oracle) {
  trainer::FlowState state = trainer::cold_start(scene);
  const double initial_epe3d = mean_flow_error(state.flow, scene.flow_clean);
  if (oracle) return evaluate_oracle(scene, initial_epe3d, std::move(state));

  const geom::PointCloud cloud_k{scene.points_k};
  const geom::PointCloud cloud_l{scene.points_l};
  const std::vector<backbone::EquivariantFeature> feats_k =
      backbone::extract_features(cloud_k, cfg.backbone, params);
  const std::vector<backbone::EquivariantFeature> feats_l =
      backbone::extract_features(cloud_l, cfg.backbone, params);
  const heads::SoftMask mask = heads::segment(feats_k, params, cfg.heads);
  const diff::Tensor vk = heads::part_features(feats_k.back(), mask);
  const diff::Tensor vl = heads::part_features(feats_l.back(), mask);
  const heads::CorrelationFeature correlation = heads::correlate(vk, vl);
  const Eigen::MatrixXd mask_matrix = to_matrix(mask.values);

  const geom::RotationGroup& group = geom::icosahedral_group();
  heads::PartMotionSet motion = heads::estimate_motion(correlation, cloud_k, state.flow, mask,
                                                       group, cfg.heads.motion_temperature);
  for (int round = 0; round < refine_rounds; ++round) {
    trainer::update_flow(state, cloud_k, mask_matrix, motion, cfg.flow_decay);
    motion = heads::estimate_motion(correlation, cloud_k, state.flow, mask, group,
                                    cfg.heads.motion_temperature);
  }

  std::vector<geom::RigidTransform> slot_transforms;
  slot_transforms.reserve(motion.slots.size());
  for (const heads::PartMotion& slot : motion.slots) slot_transforms.push_back(slot.transform);
  return score_scene(scene, mask_matrix, slot_transforms, state.flow, initial_epe3d);
}

EvalReport evaluate_dataset(const std::vector<scenegen::SceneSample>& scenes,
                            const trainer::TrainerConfig& cfg, const diff::ParamStore& params,
                            int refine_rounds, bool oracle) {
  EvalReport report;
  report.rows.reserve(scenes.size());
  for (const scenegen::SceneSample& scene : scenes) {
    report.rows.push_back(evaluate_scene(scene, cfg, params, refine_rounds, oracle));
  }
  return report;
}

namespace {

nlohmann::ordered_json row_json(const SceneEvalRow& row) {
  nlohmann::ordered_json out;
  out["scene_id"] = row.scene_id;
  out["ap"] = row.seg.ap;
  out["pq"] = row.seg.pq;
  out["f1"] = row.seg.f1;
  out["precision"] = row.seg.pre;
  out["recall"] = row.seg.rec;
  out["miou"] = row.seg.miou;
  out["ri"] = row.seg.ri;
  out["epe3d"] = row.epe3d;
  if (row.angular_error_deg) {
    out["angular_error_deg"] = *row.angular_error_deg;
  } else {
    out["angular_error_deg"] = nullptr;
  }
  if (row.translation_error) {
    out["translation_error"] = *row.translation_error;
  } else {
    out["translation_error"] = nullptr;
  }
  out["initial_epe3d"] = row.initial_epe3d;
  return out;
}

}  // namespace

nlohmann::ordered_json report_json(const EvalReport& report) {
  nlohmann::ordered_json per_scene = nlohmann::ordered_json::array();
  double ap = 0, pq = 0, f1 = 0, pre = 0, rec = 0, miou = 0, ri = 0;
  double epe = 0, initial_epe = 0;
  double angular = 0, translation = 0;
  int angular_count = 0, translation_count = 0;
  for (const SceneEvalRow& row : report.rows) {
    per_scene.push_back(row_json(row));
    ap += row.seg.ap;
    pq += row.seg.pq;
    f1 += row.seg.f1;
    pre += row.seg.pre;
    rec += row.seg.rec;
    miou += row.seg.miou;
    ri += row.seg.ri;
    epe += row.epe3d;
    initial_epe += row.initial_epe3d;
    if (row.angular_error_deg) {
      angular += *row.angular_error_deg;
      ++angular_count;
    }
    if (row.translation_error) {
      translation += *row.translation_error;
      ++translation_count;
    }
  }
  const double n = report.rows.empty() ? 1.0 : static_cast<double>(report.rows.size());

  nlohmann::ordered_json aggregate;
  aggregate["scenes"] = report.rows.size();
  aggregate["ap"] = ap / n;
  aggregate["pq"] = pq / n;
  aggregate["f1"] = f1 / n;
  aggregate["precision"] = pre / n;
  aggregate["recall"] = rec / n;
  aggregate["miou"] = miou / n;
  aggregate["ri"] = ri / n;
  aggregate["epe3d"] = epe / n;
  if (angular_count > 0) {
    aggregate["angular_error_deg"] = angular / angular_count;
  } else {
    aggregate["angular_error_deg"] = nullptr;
  }
  aggregate["angular_scene_count"] = angular_count;
  if (translation_count > 0) {
    aggregate["translation_error"] = translation / translation_count;
  } else {
    aggregate["translation_error"] = nullptr;
  }
  aggregate["translation_scene_count"] = translation_count;
  aggregate["initial_epe3d"] = initial_epe / n;

  nlohmann::ordered_json out;
  out["per_scene"] = std::move(per_scene);
  out["aggregate"] = std::move(aggregate);
  return out;
}

void write_report_json(const EvalReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open report file: " + path);
  out << report_json(report).dump(1) << "\n";
}

void write_report_csv(const EvalReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open CSV file: " + path);
  std::ostringstream text;
  text.precision(17);
  text << "scene_id,ap,pq,f1,precision,recall,miou,ri,epe3d,angular_error_deg\n";
  for (const SceneEvalRow& row : report.rows) {
    text << row.scene_id << ',' << row.seg.ap << ',' << row.seg.pq << ',' << row.seg.f1 << ','
         << row.seg.pre << ',' << row.seg.rec << ',' << row.seg.miou << ',' << row.seg.ri << ','
         << row.epe3d << ',';
    if (row.angular_error_deg) {
      text << *row.angular_error_deg;
    } else {
      text << "nan";
    }
    text << '\n';
  }
  out << text.str();
}

}  // namespace mbse3::evalrun
