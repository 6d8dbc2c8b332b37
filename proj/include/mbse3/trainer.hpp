#pragma once

#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mbse3/backbone.hpp"
#include "mbse3/diffcore.hpp"
#include "mbse3/geom.hpp"
#include "mbse3/heads.hpp"
#include "mbse3/scenegen.hpp"

namespace mbse3::trainer {

struct TrainerConfig {
  double flow_decay = 0.9;              // EMA weight kept on the current flow
  double consensus_temperature = 10.0;  // sharpness of the residual gate, 1/m
  double learning_rate = 1e-3;
  int epochs = 10;
  int cold_start_epochs = 1;  // epochs before the flow EMA starts
  double lambda_seg = 1.0;
  double lambda_mot = 0.5;
  uint64_t seed = 0;
  backbone::BackboneConfig backbone;
  heads::HeadsConfig heads;

  void validate() const;
};

struct FlowState {
  enum class Tag { kInitial, kUpdated };

  Eigen::Matrix<double, Eigen::Dynamic, 3> flow;
  Tag tag = Tag::kInitial;
};

/// Per-epoch aggregates; validation fields are NaN when no validation
/// scenes were given (or no part matched, for the angular error).
struct EpochStats {
  int epoch = 0;
  double seg_loss = 0.0;
  double motion_loss = 0.0;
  double consensus_mean = 0.0;
  double val_ap = std::numeric_limits<double>::quiet_NaN();
  double val_epe3d = std::numeric_limits<double>::quiet_NaN();
  double val_angular_deg = std::numeric_limits<double>::quiet_NaN();
};

struct TrainRecord {
  std::vector<EpochStats> epochs;
};

/// Seeds backbone and head parameters for the configured model.
void register_model_params(diff::ParamStore& params, const TrainerConfig& cfg);

/// Flow estimate seeded from the scene's noisy flow channel.
FlowState cold_start(const scenegen::SceneSample& scene);

/// EMA blend towards the mask-weighted rigid flow:
/// flow_i <- alpha * flow_i + (1 - alpha) * (sum_s m_is * T_s(p_i) - p_i).
void update_flow(FlowState& state, const geom::PointCloud& cloud, const Eigen::MatrixXd& mask,
                 const std::vector<geom::RigidTransform>& motions, double alpha);
void update_flow(FlowState& state, const geom::PointCloud& cloud, const Eigen::MatrixXd& mask,
                 const heads::PartMotionSet& motions, double alpha);

/// Residual gate beta_is = exp(-tau * |T_s(p_i) - (p_i + flow_i)|); a plain
/// array, so nothing differentiates through it.
Eigen::MatrixXd consensus(const geom::PointCloud& cloud, const FlowState& state,
                          const std::vector<geom::RigidTransform>& motions, double tau);
Eigen::MatrixXd consensus(const geom::PointCloud& cloud, const FlowState& state,
                          const heads::PartMotionSet& motions, double tau);

/// Consensus-gated mask alignment loss
/// (1/NS) * sum_is beta_is * m_is * |(p_i + flow_i) - T_s(p_i)|,
/// differentiable in the mask only; transforms and gate enter as constants.
int segmentation_loss_node(diff::Tape& tape, int mask_node, const geom::PointCloud& cloud,
                           const FlowState& state,
                           const std::vector<geom::RigidTransform>& kabsch_motions,
                           const Eigen::MatrixXd& beta);

/// Cross-entropy of each active slot's rotation bins against the group
/// element nearest its Kabsch rotation, averaged over active slots.
/// All slots inactive: returns a constant 0 and warns on stderr.
int motion_loss_node(diff::Tape& tape, int rotation_logits_node, double temperature,
                     const std::vector<geom::RigidTransform>& kabsch_motions,
                     const std::vector<bool>& active, const geom::RotationGroup& group);

/// Value-level counterpart reading the stored bin distributions.
double motion_loss_value(const heads::PartMotionSet& motion,
                         const std::vector<geom::RigidTransform>& kabsch_motions,
                         const geom::RotationGroup& group);

/// Mean cross-entropy against ground-truth parts after maximum-weight
/// matching of parts to mask columns (soft overlap mass as the weight).
int supervised_segmentation_loss_node(diff::Tape& tape, int mask_node,
                                      const std::vector<int>& gt_labels);

/// Joint unsupervised optimization over scene pairs: segment, correlate,
/// estimate motion, Kabsch-fit the current flow, gate by consensus, step
/// Adam, then EMA the flow. Deterministic for a fixed config and dataset.
/// Appends one JSON line per epoch to record_path unless it is empty.
/// Runs epochs first_epoch..cfg.epochs-1; a positive first_epoch resumes an
/// earlier run, so the record file is appended to instead of truncated.
/// Throws std::runtime_error on a non-finite loss, naming epoch and scene.
TrainRecord train(const std::vector<scenegen::SceneSample>& train_scenes,
                  const std::vector<scenegen::SceneSample>& val_scenes, const TrainerConfig& cfg,
                  diff::ParamStore& params, const std::string& record_path = "",
                  int first_epoch = 0);

}  // namespace mbse3::trainer
