#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "mbse3/geom.hpp"
#include "mbse3/heads.hpp"
#include "mbse3/scenegen.hpp"

namespace mbse3::metrics {

/// Instance-segmentation scores at an IoU threshold of 0.5.
struct SegmentationEval {
  double ap = 0.0;
  double pq = 0.0;
  double f1 = 0.0;
  double pre = 0.0;
  double rec = 0.0;
  double miou = 0.0;
  double ri = 0.0;
};

struct MotionEval {
  double epe3d = 0.0;
  /// Mean over matched parts; absent when no prediction matches any part.
  std::optional<double> angular_error_deg;
  std::optional<double> translation_error;
};

/// Per-point argmax of the soft mask; ties resolve to the lowest slot index.
std::vector<int> hard_mask(const Eigen::MatrixXd& soft_mask);

struct Instance {
  int label = 0;                 // originating slot or part index
  std::vector<int> points;      // ascending point indices
  double confidence = 0.0;      // mean soft-mask weight (predictions only)
};

/// Non-empty slots of the hard assignment, with per-instance confidence.
std::vector<Instance> predicted_instances(const Eigen::MatrixXd& soft_mask);

/// Instances of a ground-truth labeling (empty labels dropped).
std::vector<Instance> ground_truth_instances(const std::vector<int>& labels);

struct InstanceMatch {
  int pred = -1;  // index into the prediction instance list
  int gt = -1;    // index into the ground-truth instance list
  double iou = 0.0;
};

struct MatchResult {
  std::vector<InstanceMatch> matches;  // assignment pairs with IoU > 0.5
  double assignment_iou = 0.0;         // total IoU of the optimal assignment
  int pred_count = 0;
  int gt_count = 0;
};

/// Maximum-weight one-to-one matching on IoU (O(n^3) Hungarian assignment);
/// assigned pairs with IoU <= 0.5 are discarded as unmatched.
MatchResult match_instances(const std::vector<Instance>& pred, const std::vector<Instance>& gt);

/// Maximum-weight one-to-one assignment (rows to columns, rectangular
/// matrices padded internally). Entry -1 marks an unassigned row.
std::vector<int> max_weight_assignment(const Eigen::MatrixXd& weight);

/// Pair-counting agreement between two labelings of the same points.
double rand_index(const std::vector<int>& a, const std::vector<int>& b);

SegmentationEval segmentation_scores(const Eigen::MatrixXd& soft_mask,
                                     const std::vector<int>& gt_labels);

/// EPE3D against the clean flow plus mean rotation/translation errors over
/// parts matched through the segmentation (IoU > 0.5).
MotionEval motion_scores(const std::vector<geom::RigidTransform>& slot_transforms,
                         const Eigen::MatrixXd& flow_pred, const Eigen::MatrixXd& soft_mask,
                         const scenegen::SceneSample& gt);
MotionEval motion_scores(const heads::PartMotionSet& motion, const Eigen::MatrixXd& flow_pred,
                         const Eigen::MatrixXd& soft_mask, const scenegen::SceneSample& gt);

}  // namespace mbse3::metrics
