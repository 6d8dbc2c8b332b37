#pragma once

#include <vector>

#include "mbse3/geom.hpp"

namespace mbse3::rigidfit {

struct WeightedCorrespondence {
  geom::PointMatrix source;  // N x 3
  geom::PointMatrix target;  // N x 3
  Eigen::VectorXd weights;   // N, entries >= 0
};

struct FitResult {
  geom::RigidTransform transform;
  /// Weight mass below threshold; the transform is the identity.
  bool degenerate = false;
  /// Cross-covariance rank < 2: the unconstrained rotation component is
  /// completed toward the identity.
  bool ill_conditioned = false;
};

struct FitOptions {
  /// Diagnostic switch for the self-check suite: skips the determinant fix so
  /// mirrored correspondences come back as improper rotations.
  bool skip_determinant_fix = false;
};

/// argmin over rigid transforms of sum_i w_i * |R*s_i + t - t_i|^2 via
/// weighted centroids and an SVD of the weighted cross-covariance with the
/// proper-rotation (determinant) fix.
FitResult weighted_kabsch(const WeightedCorrespondence& c);
FitResult weighted_kabsch(const WeightedCorrespondence& c, const FitOptions& options);

struct MultibodyFit {
  std::vector<FitResult> slots;

  std::vector<geom::RigidTransform> transforms() const;
};

/// One weighted Kabsch fit per mask column: source = cloud, target =
/// cloud + flow, weights = column s.
MultibodyFit fit_multibody(const geom::PointCloud& cloud, const geom::PointMatrix& flow,
                           const Eigen::MatrixXd& mask);

/// Per-point, per-slot alignment error in meters:
/// entry (i,s) = |R_s*p_i + t_s - (p_i + flow_i)|.
Eigen::MatrixXd residuals(const geom::PointCloud& cloud, const geom::PointMatrix& flow,
                          const std::vector<geom::RigidTransform>& motions);

}  // namespace mbse3::rigidfit
