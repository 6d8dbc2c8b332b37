#pragma once

#include <Eigen/Dense>
#include <array>
#include <utility>
#include <vector>

namespace mbse3::geom {

using Matrix3 = Eigen::Matrix3d;
using Vector3 = Eigen::Vector3d;
using PointMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3>;

/// N x 3 point set in meters. N >= 1, all coordinates finite.
struct PointCloud {
  PointMatrix points;

  int size() const { return static_cast<int>(points.rows()); }
  Vector3 point(int i) const { return points.row(i).transpose(); }
};

/// Rotation + translation. rotation'*rotation = I and det = 1 within 1e-9.
struct RigidTransform {
  Matrix3 rotation = Matrix3::Identity();
  Vector3 translation = Vector3::Zero();

  Vector3 apply(const Vector3& p) const { return rotation * p + translation; }
  RigidTransform inverse() const {
    return {rotation.transpose(), -(rotation.transpose() * translation)};
  }
  /// Composition: (*this) after other, i.e. x -> this(other(x)).
  RigidTransform compose(const RigidTransform& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }
};

/// The 60 rotations of the icosahedron with its Cayley and inverse tables.
/// Element 0 is the identity; the rest are sorted lexicographically by
/// matrix entries rounded to 6 decimals, so indices are stable across runs.
class RotationGroup {
 public:
  static constexpr int kOrder = 60;

  const std::vector<Matrix3>& elements() const { return elements_; }
  const Matrix3& element(int i) const { return elements_[i]; }
  int cayley(int i, int j) const { return cayley_[i][j]; }
  int inverse(int i) const { return inverse_[i]; }

  friend RotationGroup build_icosahedral_group();

 private:
  std::vector<Matrix3> elements_;
  std::array<std::array<int, kOrder>, kOrder> cayley_{};
  std::array<int, kOrder> inverse_{};
};

/// Closes {order-5 vertex rotation, order-2 edge rotation} under
/// multiplication. Throws std::logic_error if the closure does not reach
/// exactly 60 elements.
RotationGroup build_icosahedral_group();

/// Shared immutable instance (the group never changes once built).
const RotationGroup& icosahedral_group();

PointCloud apply_transform(const RigidTransform& t, const PointCloud& x);

/// Index k with g_k = g_i^-1 * g_j, read from the tables.
int relative_rotation_index(const RotationGroup& g, int i, int j);

/// Geodesic angle acos((trace(Ra'*Rb) - 1) / 2) in degrees.
double geodesic_angle_deg(const Matrix3& ra, const Matrix3& rb);

/// Argmin over group elements of the geodesic angle to r, plus that angle.
std::pair<int, double> nearest_group_element(const RotationGroup& g, const Matrix3& r);

/// Rotation about a (not necessarily unit) axis by an angle in radians.
Matrix3 axis_angle(const Vector3& axis, double angle_rad);

}  // namespace mbse3::geom
