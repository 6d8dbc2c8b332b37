#include "mbse3/rigidfit.hpp"

#include <cmath>

#include "doctest.h"
#include "mbse3/rng.hpp"

using namespace mbse3;

namespace {

geom::Matrix3 random_rotation(Rng& rng) {
  Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return Eigen::Quaterniond(q(0), q(1), q(2), q(3)).toRotationMatrix();
}

geom::PointMatrix random_points(int n, Rng& rng, double extent = 1.0) {
  geom::PointMatrix p(n, 3);
  for (int i = 0; i < n * 3; ++i) p.data()[i] = rng.uniform(-extent, extent);
  return p;
}

double weighted_error(const rigidfit::WeightedCorrespondence& c, const geom::RigidTransform& t) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < c.source.rows(); ++i) {
    total += c.weights(i) *
             (t.rotation * c.source.row(i).transpose() + t.translation -
              c.target.row(i).transpose())
                 .squaredNorm();
  }
  return total;
}

}  // namespace

TEST_CASE("aligning a set with itself gives the identity") {
  Rng rng(1);
  rigidfit::WeightedCorrespondence c;
  c.source = random_points(20, rng);
  c.target = c.source;
  c.weights = Eigen::VectorXd::Ones(20);
  const auto fit = rigidfit::weighted_kabsch(c);
  CHECK_FALSE(fit.degenerate);
  CHECK_FALSE(fit.ill_conditioned);
  CHECK((fit.transform.rotation - geom::Matrix3::Identity()).norm() < 1e-12);
  CHECK(fit.transform.translation.norm() < 1e-12);
}

TEST_CASE("a pure shift is recovered exactly") {
  Rng rng(2);
  rigidfit::WeightedCorrespondence c;
  c.source = random_points(15, rng);
  c.target = c.source;
  c.target.rowwise() += Eigen::RowVector3d(1.0, 2.0, 3.0);
  c.weights = Eigen::VectorXd::Ones(15);
  const auto fit = rigidfit::weighted_kabsch(c);
  CHECK((fit.transform.rotation - geom::Matrix3::Identity()).norm() < 1e-9);
  CHECK((fit.transform.translation - geom::Vector3(1, 2, 3)).norm() < 1e-9);
}

TEST_CASE("random rigid transforms are recovered to machine precision") {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    geom::RigidTransform truth{random_rotation(rng),
                               geom::Vector3(rng.uniform(-3, 3), rng.uniform(-3, 3),
                                             rng.uniform(-3, 3))};
    rigidfit::WeightedCorrespondence c;
    c.source = random_points(50, rng);
    c.target = (c.source * truth.rotation.transpose()).rowwise() + truth.translation.transpose();
    c.weights = Eigen::VectorXd(50);
    for (int i = 0; i < 50; ++i) c.weights(i) = rng.uniform(0.05, 1.0);

    const auto fit = rigidfit::weighted_kabsch(c);
    CHECK_FALSE(fit.degenerate);
    CHECK_FALSE(fit.ill_conditioned);
    CHECK((fit.transform.rotation - truth.rotation).norm() < 1e-9);
    CHECK((fit.transform.translation - truth.translation).norm() < 1e-9);
  }
}

TEST_CASE("mirrored targets still produce a proper rotation") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    rigidfit::WeightedCorrespondence c;
    c.source = random_points(30, rng);
    c.target = c.source;
    c.target.col(2) = -c.target.col(2);
    c.weights = Eigen::VectorXd::Ones(30);
    const auto fit = rigidfit::weighted_kabsch(c);
    const geom::Matrix3& r = fit.transform.rotation;
    CHECK((r.transpose() * r - geom::Matrix3::Identity()).norm() < 1e-9);
    CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("no 1-degree perturbation of the fit decreases the weighted error") {
  Rng rng(5);
  rigidfit::WeightedCorrespondence c;
  c.source = random_points(40, rng);
  const geom::Matrix3 r_true = random_rotation(rng);
  c.target = c.source * r_true.transpose();
  for (int i = 0; i < 40 * 3; ++i) c.target.data()[i] += 0.02 * rng.normal();
  c.weights = Eigen::VectorXd(40);
  for (int i = 0; i < 40; ++i) c.weights(i) = rng.uniform(0.1, 1.0);

  const auto fit = rigidfit::weighted_kabsch(c);
  const double base = weighted_error(c, fit.transform);
  for (int trial = 0; trial < 100; ++trial) {
    geom::Vector3 axis(rng.normal(), rng.normal(), rng.normal());
    axis.normalize();
    const geom::Matrix3 nudge = Eigen::AngleAxisd(M_PI / 180.0, axis).toRotationMatrix();
    geom::RigidTransform perturbed{nudge * fit.transform.rotation, fit.transform.translation};
    // Re-optimize the translation for the perturbed rotation so only the
    // rotation choice is being scored.
    const double wsum = c.weights.sum();
    const geom::Vector3 cs = (c.source.transpose() * c.weights) / wsum;
    const geom::Vector3 ct = (c.target.transpose() * c.weights) / wsum;
    perturbed.translation = ct - perturbed.rotation * cs;
    CHECK(weighted_error(c, perturbed) >= base - 1e-12);
  }
}

TEST_CASE("zero-weight points have no influence") {
  Rng rng(6);
  rigidfit::WeightedCorrespondence c;
  c.source = random_points(25, rng);
  const geom::Matrix3 r = random_rotation(rng);
  c.target = c.source * r.transpose();
  c.weights = Eigen::VectorXd::Ones(25);
  c.weights(3) = 0.0;
  c.weights(17) = 0.0;
  const auto base = rigidfit::weighted_kabsch(c);

  c.source.row(3) << 1e6, -2e6, 3e6;
  c.target.row(17) << -4e5, 5e5, -6e5;
  const auto moved = rigidfit::weighted_kabsch(c);
  CHECK((base.transform.rotation - moved.transform.rotation).norm() < 1e-12);
  CHECK((base.transform.translation - moved.transform.translation).norm() < 1e-12);
}

TEST_CASE("vanishing total weight is flagged degenerate") {
  rigidfit::WeightedCorrespondence c;
  c.source = geom::PointMatrix(4, 3);
  c.source << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
  c.target = c.source;
  c.weights = Eigen::VectorXd::Constant(4, 1e-9);
  const auto fit = rigidfit::weighted_kabsch(c);
  CHECK(fit.degenerate);
  CHECK((fit.transform.rotation - geom::Matrix3::Identity()).norm() == 0.0);
  CHECK(fit.transform.translation.norm() == 0.0);
}

TEST_CASE("collinear points are flagged and still map the line correctly") {
  rigidfit::WeightedCorrespondence c;
  c.source = geom::PointMatrix(5, 3);
  for (int i = 0; i < 5; ++i) c.source.row(i) << static_cast<double>(i), 0.0, 0.0;
  const geom::Matrix3 r = Eigen::AngleAxisd(M_PI / 2, geom::Vector3::UnitZ()).toRotationMatrix();
  c.target = c.source * r.transpose();
  c.weights = Eigen::VectorXd::Ones(5);

  const auto fit = rigidfit::weighted_kabsch(c);
  CHECK(fit.ill_conditioned);
  const geom::Matrix3& got = fit.transform.rotation;
  CHECK((got.transpose() * got - geom::Matrix3::Identity()).norm() < 1e-9);
  CHECK(got.determinant() == doctest::Approx(1.0).epsilon(1e-9));
  for (int i = 0; i < 5; ++i) {
    const geom::Vector3 mapped =
        got * c.source.row(i).transpose() + fit.transform.translation;
    CHECK((mapped - c.target.row(i).transpose()).norm() < 1e-9);
  }
}

TEST_CASE("coincident points are flagged and give the identity rotation") {
  rigidfit::WeightedCorrespondence c;
  c.source = geom::PointMatrix(3, 3);
  c.source << 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5;
  c.target = c.source;
  c.target.rowwise() += Eigen::RowVector3d(1, 0, 0);
  c.weights = Eigen::VectorXd::Ones(3);
  const auto fit = rigidfit::weighted_kabsch(c);
  CHECK(fit.ill_conditioned);
  CHECK((fit.transform.rotation - geom::Matrix3::Identity()).norm() < 1e-12);
  CHECK((fit.transform.translation - geom::Vector3(1, 0, 0)).norm() < 1e-12);
}

TEST_CASE("multibody fit recovers a global motion from a single slot") {
  Rng rng(7);
  geom::PointCloud cloud;
  cloud.points = random_points(30, rng);
  const geom::RigidTransform truth{random_rotation(rng), geom::Vector3(0.2, -0.4, 0.6)};
  geom::PointMatrix flow(30, 3);
  for (int i = 0; i < 30; ++i) {
    flow.row(i) =
        (truth.apply(cloud.points.row(i).transpose()) - cloud.points.row(i).transpose())
            .transpose();
  }
  const auto fit = rigidfit::fit_multibody(cloud, flow, Eigen::MatrixXd::Ones(30, 1));
  REQUIRE(fit.slots.size() == 1);
  CHECK((fit.slots[0].transform.rotation - truth.rotation).norm() < 1e-9);
  CHECK((fit.slots[0].transform.translation - truth.translation).norm() < 1e-9);
}

TEST_CASE("multibody fit of zero flow is identity in every slot") {
  Rng rng(8);
  geom::PointCloud cloud;
  cloud.points = random_points(20, rng);
  Eigen::MatrixXd mask(20, 3);
  for (int i = 0; i < 20; ++i) {
    mask.row(i).setZero();
    mask(i, static_cast<int>(rng.uniform_index(3))) = 1.0;
  }
  const auto fit = rigidfit::fit_multibody(cloud, geom::PointMatrix::Zero(20, 3), mask);
  for (const auto& slot : fit.slots) {
    CHECK((slot.transform.rotation - geom::Matrix3::Identity()).norm() < 1e-9);
    CHECK(slot.transform.translation.norm() < 1e-9);
  }
}

TEST_CASE("two separated parts with distinct motions are both recovered") {
  Rng rng(9);
  const int per_part = 25;
  geom::PointCloud cloud;
  cloud.points.resize(2 * per_part, 3);
  cloud.points.topRows(per_part) = random_points(per_part, rng, 0.5);
  cloud.points.bottomRows(per_part) =
      random_points(per_part, rng, 0.5).rowwise() + Eigen::RowVector3d(5, 0, 0);

  const geom::RigidTransform t0{random_rotation(rng), geom::Vector3(0.1, 0.2, -0.3)};
  const geom::RigidTransform t1{random_rotation(rng), geom::Vector3(-0.5, 0.05, 0.4)};
  geom::PointMatrix flow(2 * per_part, 3);
  Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(2 * per_part, 2);
  for (int i = 0; i < 2 * per_part; ++i) {
    const geom::RigidTransform& t = i < per_part ? t0 : t1;
    mask(i, i < per_part ? 0 : 1) = 1.0;
    flow.row(i) =
        (t.apply(cloud.points.row(i).transpose()) - cloud.points.row(i).transpose()).transpose();
  }

  const auto fit = rigidfit::fit_multibody(cloud, flow, mask);
  REQUIRE(fit.slots.size() == 2);
  CHECK((fit.slots[0].transform.rotation - t0.rotation).norm() < 1e-9);
  CHECK((fit.slots[0].transform.translation - t0.translation).norm() < 1e-9);
  CHECK((fit.slots[1].transform.rotation - t1.rotation).norm() < 1e-9);
  CHECK((fit.slots[1].transform.translation - t1.translation).norm() < 1e-9);
}

TEST_CASE("residuals of the exact motion vanish and constant flow offsets appear directly") {
  Rng rng(10);
  geom::PointCloud cloud;
  cloud.points = random_points(12, rng);

  const geom::RigidTransform truth{random_rotation(rng), geom::Vector3(0.3, 0.1, -0.2)};
  geom::PointMatrix flow(12, 3);
  for (int i = 0; i < 12; ++i) {
    flow.row(i) =
        (truth.apply(cloud.points.row(i).transpose()) - cloud.points.row(i).transpose())
            .transpose();
  }
  const Eigen::MatrixXd exact = rigidfit::residuals(cloud, flow, {truth});
  for (int i = 0; i < 12; ++i) CHECK(exact(i, 0) < 1e-12);

  geom::PointMatrix shift_flow(12, 3);
  shift_flow.setZero();
  shift_flow.col(0).setConstant(0.1);
  const Eigen::MatrixXd shifted = rigidfit::residuals(cloud, shift_flow, {geom::RigidTransform{}});
  for (int i = 0; i < 12; ++i) CHECK(shifted(i, 0) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("residuals match direct evaluation on random inputs") {
  Rng rng(11);
  geom::PointCloud cloud;
  cloud.points = random_points(18, rng);
  geom::PointMatrix flow = random_points(18, rng, 0.3);
  std::vector<geom::RigidTransform> motions;
  for (int s = 0; s < 4; ++s) {
    motions.push_back({random_rotation(rng),
                       geom::Vector3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1))});
  }
  const Eigen::MatrixXd r = rigidfit::residuals(cloud, flow, motions);
  REQUIRE(r.rows() == 18);
  REQUIRE(r.cols() == 4);
  for (int i = 0; i < 18; ++i) {
    for (int s = 0; s < 4; ++s) {
      const geom::Vector3 p = cloud.points.row(i).transpose();
      const double expected =
          (motions[static_cast<size_t>(s)].rotation * p +
           motions[static_cast<size_t>(s)].translation - (p + flow.row(i).transpose()))
              .norm();
      CHECK(r(i, s) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}
