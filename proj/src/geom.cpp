#include "mbse3/geom.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mbse3::geom {

namespace {

constexpr double kDedupTol = 1e-9;

int find_element(const std::vector<Matrix3>& elements, const Matrix3& m) {
  for (int i = 0; i < static_cast<int>(elements.size()); ++i) {
    if ((elements[i] - m).norm() < kDedupTol) return i;
  }
  return -1;
}

/// Re-projects a near-rotation onto SO(3) so products of generator chains
/// carry no accumulated drift.
Matrix3 orthonormalize(const Matrix3& m) {
  Eigen::JacobiSVD<Matrix3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Matrix3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Matrix3 flip = Matrix3::Identity();
    flip(2, 2) = -1.0;
    r = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return r;
}

}  // namespace

Matrix3 axis_angle(const Vector3& axis, double angle_rad) {
  return Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix();
}

RotationGroup build_icosahedral_group() {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  // Order-5 rotation about a vertex axis, order-2 about an edge-midpoint axis.
  const Matrix3 gen5 = axis_angle(Vector3(0.0, 1.0, phi), 2.0 * M_PI / 5.0);
  const Matrix3 gen2 = axis_angle(Vector3(0.0, 0.0, 1.0), M_PI);

  std::vector<Matrix3> elements{Matrix3::Identity()};
  std::vector<Matrix3> frontier{Matrix3::Identity()};
  while (!frontier.empty()) {
    std::vector<Matrix3> next;
    for (const Matrix3& m : frontier) {
      for (const Matrix3* gen : {&gen5, &gen2}) {
        const Matrix3 p = orthonormalize(m * (*gen));
        if (find_element(elements, p) < 0) {
          elements.push_back(p);
          next.push_back(p);
        }
      }
    }
    frontier = std::move(next);
    if (elements.size() > RotationGroup::kOrder) break;
  }
  if (elements.size() != RotationGroup::kOrder) {
    throw std::logic_error("icosahedral closure reached " +
                           std::to_string(elements.size()) + " elements, expected 60");
  }

  // Canonical order: identity first, the rest lexicographic on entries
  // rounded to 6 decimals.
  const auto rounded_key = [](const Matrix3& m) {
    std::array<double, 9> key{};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) key[r * 3 + c] = std::round(m(r, c) * 1e6) / 1e6;
    return key;
  };
  std::sort(elements.begin() + 1, elements.end(),
            [&](const Matrix3& a, const Matrix3& b) { return rounded_key(a) < rounded_key(b); });

  RotationGroup group;
  group.elements_ = elements;
  for (int i = 0; i < RotationGroup::kOrder; ++i) {
    for (int j = 0; j < RotationGroup::kOrder; ++j) {
      const int k = find_element(elements, elements[i] * elements[j]);
      if (k < 0) throw std::logic_error("icosahedral group is not closed");
      group.cayley_[i][j] = k;
    }
  }
  for (int i = 0; i < RotationGroup::kOrder; ++i) {
    const int inv = find_element(elements, elements[i].transpose());
    if (inv < 0 || group.cayley_[i][inv] != 0) {
      throw std::logic_error("inconsistent inverse table");
    }
    group.inverse_[i] = inv;
  }
  return group;
}

const RotationGroup& icosahedral_group() {
  static const RotationGroup group = build_icosahedral_group();
  return group;
}

PointCloud apply_transform(const RigidTransform& t, const PointCloud& x) {
  PointCloud out;
  out.points = (x.points * t.rotation.transpose()).rowwise() + t.translation.transpose();
  return out;
}

int relative_rotation_index(const RotationGroup& g, int i, int j) {
  return g.cayley(g.inverse(i), j);
}

double geodesic_angle_deg(const Matrix3& ra, const Matrix3& rb) {
  const double c = ((ra.transpose() * rb).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / M_PI;
}

std::pair<int, double> nearest_group_element(const RotationGroup& g, const Matrix3& r) {
  int best = 0;
  double best_angle = geodesic_angle_deg(g.element(0), r);
  for (int k = 1; k < RotationGroup::kOrder; ++k) {
    const double a = geodesic_angle_deg(g.element(k), r);
    if (a < best_angle) {
      best = k;
      best_angle = a;
    }
  }
  return {best, best_angle};
}

}  // namespace mbse3::geom
