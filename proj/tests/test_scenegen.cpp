#include "mbse3/scenegen.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

#include "mbse3/geom.hpp"

using namespace mbse3;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("mbse3_scenegen_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

bool bitwise_equal(const geom::PointMatrix& a, const geom::PointMatrix& b) {
  return a.rows() == b.rows() && (a.array() == b.array()).all();
}

}  // namespace

TEST_CASE("scene spec validation rejects degenerate ranges") {
  scenegen::SceneSpec spec;
  CHECK_NOTHROW(spec.validate());

  scenegen::SceneSpec bad = spec;
  bad.max_parts = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = spec;
  bad.points = bad.max_parts * bad.min_points_per_part - 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = spec;
  bad.max_rotation_deg = bad.min_rotation_deg - 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = spec;
  bad.max_translation = bad.min_translation - 0.01;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = spec;
  bad.outlier_fraction = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  CHECK_THROWS_AS(scenegen::generate_scene(spec, -1), std::invalid_argument);
}

TEST_CASE("scene structure: part sizes, mask coverage, valid rotations") {
  scenegen::SceneSpec spec;
  spec.seed = 7;
  for (int index = 0; index < 6; ++index) {
    scenegen::SceneSample sample = scenegen::generate_scene(spec, index);
    CHECK(sample.size() == spec.points);
    CHECK(sample.parts() >= spec.min_parts);
    CHECK(sample.parts() <= spec.max_parts);

    std::vector<int> counts(static_cast<size_t>(sample.parts()), 0);
    for (int part : sample.mask) {
      REQUIRE(part >= 0);
      REQUIRE(part < sample.parts());
      counts[static_cast<size_t>(part)] += 1;
    }
    for (int c : counts) CHECK(c >= spec.min_points_per_part);

    for (const geom::RigidTransform& t : sample.transforms) {
      CHECK((t.rotation.transpose() * t.rotation - Eigen::Matrix3d::Identity()).norm() ==
            doctest::Approx(0.0).epsilon(1e-12));
      CHECK(t.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("parts are separated: per-part bounding boxes stay disjoint") {
  scenegen::SceneSpec spec;
  spec.seed = 21;
  for (int index = 0; index < 4; ++index) {
    scenegen::SceneSample sample = scenegen::generate_scene(spec, index);
    const int parts = sample.parts();
    std::vector<Eigen::Vector3d> lo(static_cast<size_t>(parts),
                                    Eigen::Vector3d::Constant(1e30));
    std::vector<Eigen::Vector3d> hi(static_cast<size_t>(parts),
                                    Eigen::Vector3d::Constant(-1e30));
    for (int i = 0; i < sample.size(); ++i) {
      auto p = static_cast<size_t>(sample.mask[static_cast<size_t>(i)]);
      lo[p] = lo[p].cwiseMin(sample.points_k.row(i).transpose());
      hi[p] = hi[p].cwiseMax(sample.points_k.row(i).transpose());
    }
    for (int a = 0; a < parts; ++a) {
      for (int b = a + 1; b < parts; ++b) {
        bool separated = false;
        for (int axis = 0; axis < 3; ++axis) {
          if (hi[static_cast<size_t>(a)][axis] + 0.01 < lo[static_cast<size_t>(b)][axis] ||
              hi[static_cast<size_t>(b)][axis] + 0.01 < lo[static_cast<size_t>(a)][axis]) {
            separated = true;
          }
        }
        CHECK(separated);
      }
    }
  }
}

TEST_CASE("clean flow is the exact per-part rigid displacement") {
  scenegen::SceneSpec spec;
  spec.seed = 3;
  scenegen::SceneSample sample = scenegen::generate_scene(spec, 0);

  CHECK(bitwise_equal(sample.points_l, sample.points_k + sample.flow_clean));

  double worst = 0.0;
  for (int i = 0; i < sample.size(); ++i) {
    const geom::RigidTransform& t =
        sample.transforms[static_cast<size_t>(sample.mask[static_cast<size_t>(i)])];
    Eigen::Vector3d moved = t.apply(sample.points_k.row(i).transpose());
    worst = std::max(worst, (moved - sample.points_l.row(i).transpose()).norm());
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("zero sigma and zero outliers leave the noisy flow untouched") {
  scenegen::SceneSpec spec;
  spec.seed = 11;
  spec.flow_noise_sigma = 0.0;
  spec.outlier_fraction = 0.0;
  scenegen::SceneSample sample = scenegen::generate_scene(spec, 2);
  CHECK(bitwise_equal(sample.flow_noisy, sample.flow_clean));
}

TEST_CASE("noise level: mean flow error matches sigma") {
  scenegen::SceneSpec spec;
  spec.seed = 13;
  spec.outlier_fraction = 0.0;
  spec.flow_noise_sigma = 0.02;
  double total = 0.0;
  int n = 0;
  for (int index = 0; index < 5; ++index) {
    scenegen::SceneSample sample = scenegen::generate_scene(spec, index);
    total += (sample.flow_noisy - sample.flow_clean).rowwise().norm().sum();
    n += sample.size();
  }
  const double epe = total / n;
  CHECK(epe > 0.8 * spec.flow_noise_sigma);
  CHECK(epe < 1.6 * spec.flow_noise_sigma);
  CHECK(epe == doctest::Approx(spec.flow_noise_sigma).epsilon(0.1));
}

TEST_CASE("outliers land in the scene bounding box at the requested rate") {
  scenegen::SceneSpec spec;
  spec.seed = 17;
  spec.flow_noise_sigma = 0.0;
  spec.outlier_fraction = 0.25;
  scenegen::SceneSample sample = scenegen::generate_scene(spec, 1);

  Eigen::Vector3d lo = sample.points_k.colwise().minCoeff().transpose();
  Eigen::Vector3d hi = sample.points_k.colwise().maxCoeff().transpose();
  lo = lo.cwiseMin(sample.points_l.colwise().minCoeff().transpose());
  hi = hi.cwiseMax(sample.points_l.colwise().maxCoeff().transpose());

  int outliers = 0;
  for (int i = 0; i < sample.size(); ++i) {
    if ((sample.flow_noisy.row(i) - sample.flow_clean.row(i)).norm() == 0.0) continue;
    outliers += 1;
    Eigen::Vector3d target = (sample.points_k.row(i) + sample.flow_noisy.row(i)).transpose();
    CHECK(((target - lo).minCoeff() >= 0.0));
    CHECK(((hi - target).minCoeff() >= 0.0));
  }
  CHECK(outliers > 80);
  CHECK(outliers < 180);
}

TEST_CASE("group-member mode moves each part by a distinct group rotation") {
  scenegen::SceneSpec spec;
  spec.seed = 29;
  spec.rotation_mode = scenegen::RotationMode::kGroupMember;
  const auto& group = geom::icosahedral_group();
  for (int index = 0; index < 4; ++index) {
    scenegen::SceneSample sample = scenegen::generate_scene(spec, index);
    std::set<int> seen;
    for (const geom::RigidTransform& t : sample.transforms) {
      auto [k, angle] = geom::nearest_group_element(group, t.rotation);
      // acos loses ~sqrt(eps) of precision near zero angle.
      CHECK(angle < 1e-4);
      CHECK(k != 0);
      CHECK(seen.insert(k).second);
    }
  }
}

TEST_CASE("continuous mode keeps rotation magnitudes inside the spec range") {
  scenegen::SceneSpec spec;
  spec.seed = 31;
  spec.min_rotation_deg = 10.0;
  spec.max_rotation_deg = 60.0;
  for (int index = 0; index < 6; ++index) {
    scenegen::SceneSample sample = scenegen::generate_scene(spec, index);
    for (const geom::RigidTransform& t : sample.transforms) {
      double angle = geom::geodesic_angle_deg(Eigen::Matrix3d::Identity(), t.rotation);
      CHECK(angle >= spec.min_rotation_deg - 1e-9);
      CHECK(angle <= spec.max_rotation_deg + 1e-9);
    }
  }
}

TEST_CASE("same seed and index reproduce the scene byte for byte") {
  scenegen::SceneSpec spec;
  spec.seed = 99;
  auto dir = temp_dir("identical");
  scenegen::SceneSample a = scenegen::generate_scene(spec, 5);
  scenegen::SceneSample b = scenegen::generate_scene(spec, 5);
  scenegen::save_scene(a, (dir / "a.json").string());
  scenegen::save_scene(b, (dir / "b.json").string());
  CHECK(read_file((dir / "a.json").string()) == read_file((dir / "b.json").string()));

  scenegen::SceneSample c = scenegen::generate_scene(spec, 6);
  CHECK_FALSE(bitwise_equal(a.points_k, c.points_k));
}

TEST_CASE("save/load round trip preserves every field exactly") {
  scenegen::SceneSpec spec;
  spec.seed = 41;
  auto dir = temp_dir("roundtrip");
  scenegen::SceneSample sample = scenegen::generate_scene(spec, 3);
  const std::string path = (dir / "scene.json").string();
  scenegen::save_scene(sample, path);
  scenegen::SceneSample loaded = scenegen::load_scene(path);

  CHECK(loaded.id == sample.id);
  CHECK(bitwise_equal(loaded.points_k, sample.points_k));
  CHECK(bitwise_equal(loaded.points_l, sample.points_l));
  CHECK(bitwise_equal(loaded.flow_clean, sample.flow_clean));
  CHECK(bitwise_equal(loaded.flow_noisy, sample.flow_noisy));
  CHECK(loaded.mask == sample.mask);
  REQUIRE(loaded.parts() == sample.parts());
  for (int s = 0; s < sample.parts(); ++s) {
    const auto& ta = sample.transforms[static_cast<size_t>(s)];
    const auto& tb = loaded.transforms[static_cast<size_t>(s)];
    CHECK((ta.rotation.array() == tb.rotation.array()).all());
    CHECK((ta.translation.array() == tb.translation.array()).all());
  }

  const std::string again = (dir / "again.json").string();
  scenegen::save_scene(loaded, again);
  CHECK(read_file(path) == read_file(again));
}

TEST_CASE("malformed scene files are rejected with the offending field") {
  auto dir = temp_dir("malformed");
  scenegen::SceneSpec spec;
  spec.seed = 55;
  scenegen::SceneSample sample = scenegen::generate_scene(spec, 0);
  const std::string good_path = (dir / "good.json").string();
  scenegen::save_scene(sample, good_path);

  auto mutate = [&](const std::string& name, auto&& edit) {
    nlohmann::ordered_json doc = nlohmann::ordered_json::parse(read_file(good_path));
    edit(doc);
    const std::string path = (dir / name).string();
    std::ofstream(path) << doc.dump(1);
    return path;
  };

  auto expect_error = [](const std::string& path, const std::string& needle) {
    try {
      scenegen::load_scene(path);
      FAIL_CHECK("expected load_scene to reject " << path);
    } catch (const std::runtime_error& e) {
      INFO("message: " << e.what());
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };

  expect_error(mutate("missing_flow.json", [](auto& d) { d.erase("flow_noisy"); }),
               "flow_noisy");
  expect_error(mutate("empty_flow.json", [](auto& d) { d["flow_clean"].clear(); }),
               "flow_clean");
  expect_error(mutate("short_row.json", [](auto& d) { d["points_k"][0].erase(2); }),
               "points_k[0]");
  expect_error(mutate("bad_mask.json", [&](auto& d) { d["mask"][3] = sample.parts(); }),
               "mask[3]");
  expect_error(mutate("short_rotation.json", [](auto& d) {
                 d["transforms"][0]["rotation"].erase(8);
               }),
               "transforms[0].rotation");
  expect_error(mutate("row_mismatch.json", [](auto& d) { d["points_l"].erase(0); }),
               "points_l");

  const std::string garbled = (dir / "garbled.json").string();
  std::ofstream(garbled) << "{not json";
  expect_error(garbled, "not valid JSON");
  CHECK_THROWS_AS(scenegen::load_scene((dir / "does_not_exist.json").string()),
                  std::runtime_error);
}

TEST_CASE("dataset writer lays out split directories with disjoint content") {
  auto dir = temp_dir("dataset");
  scenegen::SceneSpec spec;
  spec.seed = 1234;
  auto train = scenegen::write_dataset(spec, dir.string(), "train", 3);
  auto val = scenegen::write_dataset(spec, dir.string(), "val", 2);
  CHECK(train.size() == 3);
  CHECK(val.size() == 2);

  auto listed = scenegen::list_scene_files(dir.string(), "train");
  CHECK(listed == std::vector<std::string>(train.begin(), train.end()));
  CHECK(listed.front().find("train/scene-00000.json") != std::string::npos);

  scenegen::SceneSample t0 = scenegen::load_scene(train[0]);
  scenegen::SceneSample v0 = scenegen::load_scene(val[0]);
  CHECK_FALSE(bitwise_equal(t0.points_k, v0.points_k));

  CHECK_THROWS_AS(scenegen::list_scene_files(dir.string(), "test"), std::runtime_error);
}

TEST_CASE("impossible packing reports the overlap constraint") {
  scenegen::SceneSpec spec;
  spec.seed = 2;
  spec.min_parts = 60;
  spec.max_parts = 60;
  spec.min_points_per_part = 8;
  try {
    scenegen::generate_scene(spec, 0);
    FAIL_CHECK("expected placement to fail for 60 parts");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("bounding-box overlap") != std::string::npos);
  }
}
