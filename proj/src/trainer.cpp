#include "mbse3/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "mbse3/metrics.hpp"
#include "mbse3/rigidfit.hpp"

namespace mbse3::trainer {
namespace {

Eigen::MatrixXd to_matrix(const diff::Tensor& t) {
  if (t.rank() != 2) throw std::logic_error("to_matrix: rank-2 tensor required");
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      t.data(), t.dim(0), t.dim(1));
}

std::vector<geom::RigidTransform> transforms_of(const heads::PartMotionSet& motion) {
  std::vector<geom::RigidTransform> transforms;
  transforms.reserve(motion.slots.size());
  for (const heads::PartMotion& slot : motion.slots) transforms.push_back(slot.transform);
  return transforms;
}

std::vector<bool> active_flags(const heads::PartMotionSet& motion) {
  std::vector<bool> active;
  active.reserve(motion.slots.size());
  for (const heads::PartMotion& slot : motion.slots) active.push_back(slot.active);
  return active;
}

/// Mask-weighted rigid flow: row i = sum_s m_is * T_s(p_i) - p_i.
Eigen::Matrix<double, Eigen::Dynamic, 3> blended_flow(
    const geom::PointCloud& cloud, const Eigen::MatrixXd& mask,
    const std::vector<geom::RigidTransform>& motions) {
  const Eigen::Index n = cloud.points.rows();
  Eigen::Matrix<double, Eigen::Dynamic, 3> flow = Eigen::MatrixXd::Zero(n, 3);
  for (size_t s = 0; s < motions.size(); ++s) {
    const geom::PointMatrix moved = geom::apply_transform(motions[s], cloud).points;
    flow += mask.col(static_cast<Eigen::Index>(s)).asDiagonal() * moved;
  }
  flow -= cloud.points;
  return flow;
}

/// Rudimentary rigid decomposition of one scene pair, computed straight from
/// geometry and flow with no learned parameters: farthest-point seeds grow
/// into spatial clusters, then alternating per-cluster Kabsch refits and
/// nearest-residual reassignment settle on motion-consistent groups. The
/// result seeds the early epochs, whose losses would otherwise compare every
/// slot against the same all-scene compromise fit and leave the fresh mask
/// head without any usable signal.
Eigen::MatrixXd rigid_em_mask(const geom::PointCloud& cloud,
                              const Eigen::Matrix<double, Eigen::Dynamic, 3>& flow, int slots) {
  const int n = cloud.size();
  const int seed_count = std::min(slots, n);

  std::vector<int> seeds;
  seeds.reserve(static_cast<size_t>(seed_count));
  const Eigen::RowVector3d centroid = cloud.points.colwise().mean();
  int first = 0;
  (cloud.points.rowwise() - centroid).rowwise().squaredNorm().maxCoeff(&first);
  seeds.push_back(first);
  Eigen::VectorXd nearest_seed =
      (cloud.points.rowwise() - cloud.points.row(first)).rowwise().squaredNorm();
  while (static_cast<int>(seeds.size()) < seed_count) {
    int next = 0;
    nearest_seed.maxCoeff(&next);
    seeds.push_back(next);
    nearest_seed = nearest_seed.cwiseMin(
        (cloud.points.rowwise() - cloud.points.row(next)).rowwise().squaredNorm());
  }

  std::vector<int> assign(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (size_t s = 0; s < seeds.size(); ++s) {
      const double d = (cloud.points.row(i) - cloud.points.row(seeds[s])).squaredNorm();
      if (d < best) {
        best = d;
        assign[static_cast<size_t>(i)] = static_cast<int>(s);
      }
    }
  }

  Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(n, slots);
  for (int i = 0; i < n; ++i) mask(i, assign[static_cast<size_t>(i)]) = 1.0;
  for (int round = 0; round < 8; ++round) {
    const rigidfit::MultibodyFit fit = rigidfit::fit_multibody(cloud, flow, mask);
    const Eigen::MatrixXd res = rigidfit::residuals(cloud, flow, fit.transforms());
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      int best_slot = -1;
      double best = std::numeric_limits<double>::infinity();
      for (int s = 0; s < slots; ++s) {
        if (fit.slots[static_cast<size_t>(s)].degenerate) continue;
        if (res(i, s) < best) {
          best = res(i, s);
          best_slot = s;
        }
      }
      if (best_slot >= 0 && best_slot != assign[static_cast<size_t>(i)]) {
        assign[static_cast<size_t>(i)] = best_slot;
        changed = true;
      }
    }
    if (!changed) break;
    mask.setZero();
    for (int i = 0; i < n; ++i) mask(i, assign[static_cast<size_t>(i)]) = 1.0;
  }
  return mask;
}

/// Routes each cluster column onto the model slot it overlaps most, so the
/// bootstrap supervision pulls the mask toward whichever slots the model
/// already prefers for those points instead of fighting them.
Eigen::MatrixXd align_clusters(const Eigen::MatrixXd& clusters, const Eigen::MatrixXd& soft_mask) {
  const Eigen::MatrixXd overlap = clusters.transpose() * soft_mask;
  const std::vector<int> to_slot = metrics::max_weight_assignment(overlap);
  Eigen::MatrixXd aligned = Eigen::MatrixXd::Zero(clusters.rows(), clusters.cols());
  for (int s = 0; s < clusters.cols(); ++s) {
    const int target = to_slot[static_cast<size_t>(s)];
    if (target >= 0) aligned.col(target) = clusters.col(s);
  }
  return aligned;
}

struct SceneForward {
  diff::Tape tape;
  int mask_node = -1;
  int logits_node = -1;
  Eigen::MatrixXd mask;
  heads::PartMotionSet motion;
};

/// Shared forward pass: features for both frames, segmentation on frame k,
/// correlation and motion estimation against the given flow.
SceneForward forward_scene(const scenegen::SceneSample& scene,
                           const Eigen::Matrix<double, Eigen::Dynamic, 3>& flow,
                           const TrainerConfig& cfg, const diff::ParamStore& params) {
  SceneForward fwd;
  const geom::PointCloud cloud_k{scene.points_k};
  const geom::PointCloud cloud_l{scene.points_l};
  const std::vector<int> feats_k =
      backbone::extract_feature_nodes(fwd.tape, cloud_k, cfg.backbone, params);
  const std::vector<int> feats_l =
      backbone::extract_feature_nodes(fwd.tape, cloud_l, cfg.backbone, params);
  fwd.mask_node = heads::segment_node(fwd.tape, feats_k, params, cfg.heads);
  const int vk = heads::part_feature_node(fwd.tape, feats_k.back(), fwd.mask_node);
  const int vl = heads::part_feature_node(fwd.tape, feats_l.back(), fwd.mask_node);
  const int correlation = heads::correlate_node(fwd.tape, vk, vl);
  fwd.logits_node = heads::rotation_logit_node(fwd.tape, correlation);

  fwd.mask = to_matrix(fwd.tape.val(fwd.mask_node));
  const heads::SoftMask mask_values{fwd.tape.val(fwd.mask_node)};
  const heads::CorrelationFeature correlation_values{fwd.tape.val(correlation)};
  fwd.motion = heads::estimate_motion(correlation_values, cloud_k, flow, mask_values,
                                      geom::icosahedral_group(), cfg.heads.motion_temperature);
  return fwd;
}

struct ValidationStats {
  double ap = std::numeric_limits<double>::quiet_NaN();
  double epe3d = std::numeric_limits<double>::quiet_NaN();
  double angular_deg = std::numeric_limits<double>::quiet_NaN();
};

ValidationStats validate_pass(const std::vector<scenegen::SceneSample>& scenes,
                              const TrainerConfig& cfg, const diff::ParamStore& params) {
  ValidationStats stats;
  if (scenes.empty()) return stats;
  double ap_sum = 0.0;
  double epe_sum = 0.0;
  double angular_sum = 0.0;
  int angular_count = 0;
  for (const scenegen::SceneSample& scene : scenes) {
    FlowState state = cold_start(scene);
    SceneForward fwd = forward_scene(scene, state.flow, cfg, params);
    const std::vector<geom::RigidTransform> motions = transforms_of(fwd.motion);
    const geom::PointCloud cloud{scene.points_k};
    update_flow(state, cloud, fwd.mask, motions, 0.0);

    ap_sum += metrics::segmentation_scores(fwd.mask, scene.mask).ap;
    const metrics::MotionEval motion_eval =
        metrics::motion_scores(motions, state.flow, fwd.mask, scene);
    epe_sum += motion_eval.epe3d;
    if (motion_eval.angular_error_deg) {
      angular_sum += *motion_eval.angular_error_deg;
      angular_count += 1;
    }
  }
  const auto n = static_cast<double>(scenes.size());
  stats.ap = ap_sum / n;
  stats.epe3d = epe_sum / n;
  if (angular_count > 0) stats.angular_deg = angular_sum / angular_count;
  return stats;
}

nlohmann::ordered_json epoch_json(const EpochStats& stats) {
  nlohmann::ordered_json line;
  line["epoch"] = stats.epoch;
  line["seg_loss"] = stats.seg_loss;
  line["motion_loss"] = stats.motion_loss;
  line["consensus"] = stats.consensus_mean;
  if (std::isfinite(stats.val_ap)) line["val_ap"] = stats.val_ap;
  if (std::isfinite(stats.val_epe3d)) line["val_epe3d"] = stats.val_epe3d;
  if (std::isfinite(stats.val_angular_deg)) line["val_angular_deg"] = stats.val_angular_deg;
  return line;
}

}  // namespace

void TrainerConfig::validate() const {
  if (flow_decay < 0.0 || flow_decay > 1.0) {
    throw std::invalid_argument("trainer config: flow decay outside [0, 1]");
  }
  if (consensus_temperature <= 0.0) {
    throw std::invalid_argument("trainer config: consensus temperature must be positive");
  }
  if (learning_rate <= 0.0) throw std::invalid_argument("trainer config: non-positive learning rate");
  if (epochs < 0 || cold_start_epochs < 0) {
    throw std::invalid_argument("trainer config: negative epoch count");
  }
  if (lambda_seg < 0.0 || lambda_mot < 0.0) {
    throw std::invalid_argument("trainer config: negative loss weight");
  }
  backbone.validate();
  heads.validate();
}

void register_model_params(diff::ParamStore& params, const TrainerConfig& cfg) {
  Rng rng(cfg.seed);
  Rng backbone_rng = rng.fork(1);
  Rng heads_rng = rng.fork(2);
  backbone::register_backbone_params(params, cfg.backbone, backbone_rng);
  heads::register_head_params(params, cfg.backbone, cfg.heads, heads_rng);
}

FlowState cold_start(const scenegen::SceneSample& scene) {
  if (scene.flow_noisy.rows() != scene.points_k.rows() || scene.flow_noisy.rows() == 0) {
    throw std::invalid_argument("cold_start: scene has no noisy flow channel");
  }
  FlowState state;
  state.flow = scene.flow_noisy;
  state.tag = FlowState::Tag::kInitial;
  return state;
}

void update_flow(FlowState& state, const geom::PointCloud& cloud, const Eigen::MatrixXd& mask,
                 const std::vector<geom::RigidTransform>& motions, double alpha) {
  if (state.flow.rows() != cloud.points.rows() || mask.rows() != cloud.points.rows() ||
      static_cast<size_t>(mask.cols()) != motions.size()) {
    throw std::invalid_argument("update_flow: inconsistent shapes");
  }
  state.flow = alpha * state.flow + (1.0 - alpha) * blended_flow(cloud, mask, motions);
  state.tag = FlowState::Tag::kUpdated;
}

void update_flow(FlowState& state, const geom::PointCloud& cloud, const Eigen::MatrixXd& mask,
                 const heads::PartMotionSet& motions, double alpha) {
  update_flow(state, cloud, mask, transforms_of(motions), alpha);
}

Eigen::MatrixXd consensus(const geom::PointCloud& cloud, const FlowState& state,
                          const std::vector<geom::RigidTransform>& motions, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("consensus: temperature must be positive");
  return (-tau * rigidfit::residuals(cloud, state.flow, motions)).array().exp();
}

Eigen::MatrixXd consensus(const geom::PointCloud& cloud, const FlowState& state,
                          const heads::PartMotionSet& motions, double tau) {
  return consensus(cloud, state, transforms_of(motions), tau);
}

int segmentation_loss_node(diff::Tape& tape, int mask_node, const geom::PointCloud& cloud,
                           const FlowState& state,
                           const std::vector<geom::RigidTransform>& kabsch_motions,
                           const Eigen::MatrixXd& beta) {
  const diff::Tensor& mask = tape.val(mask_node);
  if (mask.rank() != 2 || mask.dim(0) != cloud.points.rows() ||
      static_cast<size_t>(mask.dim(1)) != kabsch_motions.size() || beta.rows() != mask.dim(0) ||
      beta.cols() != mask.dim(1)) {
    throw std::invalid_argument("segmentation_loss: inconsistent shapes");
  }
  // The mask multiplies a constant gate: per entry
  // beta_is * |(p_i + flow_i) - T_s(p_i)|, so transforms and gate stay
  // outside the tape.
  const Eigen::MatrixXd gated =
      beta.cwiseProduct(rigidfit::residuals(cloud, state.flow, kabsch_motions));
  diff::Tensor gate({mask.dim(0), mask.dim(1)});
  for (int i = 0; i < mask.dim(0); ++i) {
    for (int s = 0; s < mask.dim(1); ++s) gate.at2(i, s) = gated(i, s);
  }
  const int weighted = tape.mul(mask_node, tape.input(gate));
  return tape.affine(tape.sum_all(weighted), 1.0 / static_cast<double>(mask.size()), 0.0);
}

int motion_loss_node(diff::Tape& tape, int rotation_logits_node, double temperature,
                     const std::vector<geom::RigidTransform>& kabsch_motions,
                     const std::vector<bool>& active, const geom::RotationGroup& group) {
  const diff::Tensor& logits = tape.val(rotation_logits_node);
  if (logits.rank() != 2 || logits.dim(1) != geom::RotationGroup::kOrder ||
      static_cast<size_t>(logits.dim(0)) != kabsch_motions.size() ||
      active.size() != kabsch_motions.size()) {
    throw std::invalid_argument("motion_loss: inconsistent shapes");
  }
  if (temperature <= 0.0) throw std::invalid_argument("motion_loss: non-positive temperature");

  const int active_count = static_cast<int>(std::count(active.begin(), active.end(), true));
  if (active_count == 0) {
    std::cerr << "motion_loss: all slots inactive, loss fixed at 0\n";
    return tape.input(diff::Tensor::scalar(0.0));
  }

  diff::Tensor targets({logits.dim(0), logits.dim(1)});
  for (int s = 0; s < logits.dim(0); ++s) {
    if (!active[static_cast<size_t>(s)]) continue;
    const auto [bin, angle] =
        geom::nearest_group_element(group, kabsch_motions[static_cast<size_t>(s)].rotation);
    targets.at2(s, bin) = 1.0 / active_count;
  }
  const int log_probs = tape.log_softmax(tape.affine(rotation_logits_node, 1.0 / temperature, 0.0));
  const int picked = tape.mul(log_probs, tape.input(targets));
  return tape.affine(tape.sum_all(picked), -1.0, 0.0);
}

double motion_loss_value(const heads::PartMotionSet& motion,
                         const std::vector<geom::RigidTransform>& kabsch_motions,
                         const geom::RotationGroup& group) {
  if (motion.slots.size() != kabsch_motions.size()) {
    throw std::invalid_argument("motion_loss: slot counts differ");
  }
  double total = 0.0;
  int active_count = 0;
  for (size_t s = 0; s < motion.slots.size(); ++s) {
    if (!motion.slots[s].active) continue;
    const auto [bin, angle] = geom::nearest_group_element(group, kabsch_motions[s].rotation);
    total += -std::log(motion.slots[s].rotation_distribution[static_cast<size_t>(bin)]);
    active_count += 1;
  }
  if (active_count == 0) {
    std::cerr << "motion_loss: all slots inactive, loss fixed at 0\n";
    return 0.0;
  }
  return total / active_count;
}

int supervised_segmentation_loss_node(diff::Tape& tape, int mask_node,
                                      const std::vector<int>& gt_labels) {
  const diff::Tensor& mask = tape.val(mask_node);
  if (mask.rank() != 2 || static_cast<size_t>(mask.dim(0)) != gt_labels.size()) {
    throw std::invalid_argument("supervised loss: mask and labels disagree on N");
  }
  std::map<int, int> part_row;
  for (int label : gt_labels) part_row.emplace(label, static_cast<int>(part_row.size()));
  const int parts = static_cast<int>(part_row.size());
  const int slots = mask.dim(1);
  if (parts > slots) {
    throw std::invalid_argument("supervised loss: more ground-truth parts than mask slots");
  }

  // Soft overlap mass decides which column answers for which part.
  Eigen::MatrixXd overlap = Eigen::MatrixXd::Zero(parts, slots);
  for (size_t i = 0; i < gt_labels.size(); ++i) {
    const int row = part_row.at(gt_labels[i]);
    for (int s = 0; s < slots; ++s) overlap(row, s) += mask.at2(static_cast<int>(i), s);
  }
  const std::vector<int> assignment = metrics::max_weight_assignment(overlap);

  const auto n = static_cast<double>(gt_labels.size());
  diff::Tensor targets({mask.dim(0), slots});
  for (size_t i = 0; i < gt_labels.size(); ++i) {
    const int slot = assignment[static_cast<size_t>(part_row.at(gt_labels[i]))];
    targets.at2(static_cast<int>(i), slot) = 1.0 / n;
  }
  const int picked = tape.mul(tape.log(mask_node), tape.input(targets));
  return tape.affine(tape.sum_all(picked), -1.0, 0.0);
}

TrainRecord train(const std::vector<scenegen::SceneSample>& train_scenes,
                  const std::vector<scenegen::SceneSample>& val_scenes, const TrainerConfig& cfg,
                  diff::ParamStore& params, const std::string& record_path, int first_epoch) {
  cfg.validate();
  if (train_scenes.empty()) throw std::invalid_argument("train: empty dataset");
  if (first_epoch < 0) throw std::invalid_argument("train: first_epoch must be non-negative");

  std::ofstream record_out;
  if (!record_path.empty()) {
    record_out.open(record_path, first_epoch > 0 ? std::ios::app : std::ios::trunc);
    if (!record_out) throw std::runtime_error("cannot open training record: " + record_path);
  }

  const geom::RotationGroup& group = geom::icosahedral_group();
  std::vector<FlowState> flows;
  flows.reserve(train_scenes.size());
  for (const scenegen::SceneSample& scene : train_scenes) flows.push_back(cold_start(scene));
  std::vector<Eigen::MatrixXd> cluster_masks(train_scenes.size());

  TrainRecord record;
  for (int epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
    double seg_sum = 0.0;
    double motion_sum = 0.0;
    double consensus_sum = 0.0;
    for (size_t idx = 0; idx < train_scenes.size(); ++idx) {
      const scenegen::SceneSample& scene = train_scenes[idx];
      FlowState& state = flows[idx];
      const geom::PointCloud cloud{scene.points_k};

      SceneForward fwd = forward_scene(scene, state.flow, cfg, params);
      const std::vector<geom::RigidTransform> head_motions = transforms_of(fwd.motion);

      // Cold-start epochs fit against the flow-derived clusters; afterwards
      // the model's own mask takes over and the motion head supplies the
      // consensus reference.
      std::vector<geom::RigidTransform> kabsch_motions;
      std::vector<bool> active;
      Eigen::MatrixXd beta;
      if (epoch < cfg.cold_start_epochs) {
        if (cluster_masks[idx].size() == 0) {
          cluster_masks[idx] = rigid_em_mask(cloud, state.flow, cfg.heads.slots);
        }
        const Eigen::MatrixXd aligned = align_clusters(cluster_masks[idx], fwd.mask);
        const rigidfit::MultibodyFit fit = rigidfit::fit_multibody(cloud, state.flow, aligned);
        kabsch_motions = fit.transforms();
        for (const rigidfit::FitResult& slot : fit.slots) active.push_back(!slot.degenerate);
        beta = consensus(cloud, state, kabsch_motions, cfg.consensus_temperature);
      } else {
        kabsch_motions = rigidfit::fit_multibody(cloud, state.flow, fwd.mask).transforms();
        active = active_flags(fwd.motion);
        beta = consensus(cloud, state, head_motions, cfg.consensus_temperature);
      }

      const int seg_node =
          segmentation_loss_node(fwd.tape, fwd.mask_node, cloud, state, kabsch_motions, beta);
      const int motion_node =
          motion_loss_node(fwd.tape, fwd.logits_node, cfg.heads.motion_temperature,
                           kabsch_motions, active, group);
      const int total = fwd.tape.add(fwd.tape.affine(seg_node, cfg.lambda_seg, 0.0),
                                     fwd.tape.affine(motion_node, cfg.lambda_mot, 0.0));

      const double seg_value = fwd.tape.val(seg_node).value();
      const double motion_value = fwd.tape.val(motion_node).value();
      if (!std::isfinite(seg_value) || !std::isfinite(motion_value)) {
        std::ostringstream what;
        what << "training aborted: non-finite loss at epoch " << epoch << ", scene '" << scene.id
             << "' (seg=" << seg_value << ", motion=" << motion_value << ")";
        throw std::runtime_error(what.str());
      }

      fwd.tape.backward(total);
      adam_step(params, fwd.tape.param_grads(), cfg.learning_rate);
      if (epoch >= cfg.cold_start_epochs) {
        update_flow(state, cloud, fwd.mask, head_motions, cfg.flow_decay);
      }

      seg_sum += seg_value;
      motion_sum += motion_value;
      consensus_sum += beta.mean();
    }

    EpochStats stats;
    stats.epoch = epoch;
    const auto n = static_cast<double>(train_scenes.size());
    stats.seg_loss = seg_sum / n;
    stats.motion_loss = motion_sum / n;
    stats.consensus_mean = consensus_sum / n;
    const ValidationStats val = validate_pass(val_scenes, cfg, params);
    stats.val_ap = val.ap;
    stats.val_epe3d = val.epe3d;
    stats.val_angular_deg = val.angular_deg;
    record.epochs.push_back(stats);
    if (record_out.is_open()) record_out << epoch_json(stats).dump() << "\n";
  }
  return record;
}

}  // namespace mbse3::trainer
