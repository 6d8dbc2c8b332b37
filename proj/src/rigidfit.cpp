#include "mbse3/rigidfit.hpp"

#include <cmath>
#include <stdexcept>

namespace mbse3::rigidfit {

namespace {

constexpr double kDegenerateWeightSum = 1e-6;

/// Minimal rotation taking unit vector a to unit vector b (identity on the
/// shared orthogonal complement).
geom::Matrix3 minimal_rotation(const geom::Vector3& a, const geom::Vector3& b) {
  const double c = a.dot(b);
  if (c > 1.0 - 1e-12) return geom::Matrix3::Identity();
  if (c < -1.0 + 1e-12) {
    // Antiparallel: half turn about any perpendicular axis.
    geom::Vector3 seed = std::abs(a.x()) < 0.9 ? geom::Vector3::UnitX() : geom::Vector3::UnitY();
    const geom::Vector3 axis = a.cross(seed).normalized();
    return Eigen::AngleAxisd(M_PI, axis).toRotationMatrix();
  }
  const geom::Vector3 axis = a.cross(b);
  return Eigen::AngleAxisd(std::atan2(axis.norm(), c), axis.normalized()).toRotationMatrix();
}

}  // namespace

FitResult weighted_kabsch(const WeightedCorrespondence& c) {
  return weighted_kabsch(c, FitOptions{});
}

FitResult weighted_kabsch(const WeightedCorrespondence& c, const FitOptions& options) {
  const auto n = c.source.rows();
  if (c.target.rows() != n || c.weights.size() != n) {
    throw std::invalid_argument("correspondence sizes disagree");
  }
  FitResult result;
  const double weight_sum = c.weights.sum();
  if (weight_sum < kDegenerateWeightSum) {
    result.degenerate = true;
    return result;
  }

  const geom::Vector3 centroid_s = (c.source.transpose() * c.weights) / weight_sum;
  const geom::Vector3 centroid_t = (c.target.transpose() * c.weights) / weight_sum;

  geom::Matrix3 cross = geom::Matrix3::Zero();
  for (Eigen::Index i = 0; i < n; ++i) {
    cross += c.weights(i) * (c.target.row(i).transpose() - centroid_t) *
             (c.source.row(i) - centroid_s.transpose());
  }

  Eigen::JacobiSVD<geom::Matrix3> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const geom::Vector3 sigma = svd.singularValues();
  const double tol = std::max(sigma(0) * 1e-9, 1e-12);
  const int rank = (sigma(0) > tol ? 1 : 0) + (sigma(1) > tol ? 1 : 0) + (sigma(2) > tol ? 1 : 0);

  if (rank >= 2) {
    geom::Matrix3 fix = geom::Matrix3::Identity();
    if (!options.skip_determinant_fix) {
      fix(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant();
    }
    result.transform.rotation = svd.matrixU() * fix * svd.matrixV().transpose();
  } else {
    result.ill_conditioned = true;
    if (rank == 1) {
      result.transform.rotation = minimal_rotation(svd.matrixV().col(0), svd.matrixU().col(0));
    }
  }
  result.transform.translation = centroid_t - result.transform.rotation * centroid_s;
  return result;
}

std::vector<geom::RigidTransform> MultibodyFit::transforms() const {
  std::vector<geom::RigidTransform> out;
  out.reserve(slots.size());
  for (const FitResult& r : slots) out.push_back(r.transform);
  return out;
}

MultibodyFit fit_multibody(const geom::PointCloud& cloud, const geom::PointMatrix& flow,
                           const Eigen::MatrixXd& mask) {
  const auto n = cloud.points.rows();
  if (flow.rows() != n || mask.rows() != n) {
    throw std::invalid_argument("cloud, flow, and mask sizes disagree");
  }
  MultibodyFit fit;
  fit.slots.reserve(static_cast<size_t>(mask.cols()));
  WeightedCorrespondence c;
  c.source = cloud.points;
  c.target = cloud.points + flow;
  for (Eigen::Index s = 0; s < mask.cols(); ++s) {
    c.weights = mask.col(s);
    fit.slots.push_back(weighted_kabsch(c));
  }
  return fit;
}

Eigen::MatrixXd residuals(const geom::PointCloud& cloud, const geom::PointMatrix& flow,
                          const std::vector<geom::RigidTransform>& motions) {
  const auto n = cloud.points.rows();
  if (flow.rows() != n) throw std::invalid_argument("cloud and flow sizes disagree");
  Eigen::MatrixXd out(n, static_cast<Eigen::Index>(motions.size()));
  for (size_t s = 0; s < motions.size(); ++s) {
    const geom::Matrix3& r = motions[s].rotation;
    const geom::Vector3& t = motions[s].translation;
    for (Eigen::Index i = 0; i < n; ++i) {
      const geom::Vector3 p = cloud.points.row(i).transpose();
      out(i, static_cast<Eigen::Index>(s)) = (r * p + t - (p + flow.row(i).transpose())).norm();
    }
  }
  return out;
}

}  // namespace mbse3::rigidfit
