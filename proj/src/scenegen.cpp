#include "mbse3/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mbse3::scenegen {
namespace {

using json = nlohmann::ordered_json;

constexpr int kMaxPlacementAttempts = 1000;
constexpr double kPlacementMargin = 0.02;

struct Aabb {
  Eigen::Vector3d lo;
  Eigen::Vector3d hi;

  bool intersects(const Aabb& other, double margin) const {
    for (int a = 0; a < 3; ++a) {
      if (hi[a] + margin < other.lo[a] || other.hi[a] + margin < lo[a]) return false;
    }
    return true;
  }
};

Aabb bounding_box(const geom::PointMatrix& points) {
  return {points.colwise().minCoeff().transpose(), points.colwise().maxCoeff().transpose()};
}

Eigen::Vector3d random_unit_vector(Rng& rng) {
  while (true) {
    Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
    double n = v.norm();
    if (n > 1e-6) return v / n;
  }
}

Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Vector3d axis = random_unit_vector(rng);
  double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return Eigen::AngleAxisd(angle, axis).toRotationMatrix();
}

/// Uniform sample on the surface of an axis-aligned box with the given
/// half-extents, faces weighted by area.
Eigen::Vector3d sample_box_surface(const Eigen::Vector3d& half, Rng& rng) {
  const double ax = half.y() * half.z();
  const double ay = half.x() * half.z();
  const double az = half.x() * half.y();
  double pick = rng.uniform(0.0, ax + ay + az);
  int axis = pick < ax ? 0 : (pick < ax + ay ? 1 : 2);
  double sign = rng.uniform01() < 0.5 ? -1.0 : 1.0;
  Eigen::Vector3d p;
  p[axis] = sign * half[axis];
  int u = (axis + 1) % 3;
  int v = (axis + 2) % 3;
  p[u] = rng.uniform(-half[u], half[u]);
  p[v] = rng.uniform(-half[v], half[v]);
  return p;
}

geom::PointMatrix sample_box(int count, Rng& rng) {
  Eigen::Vector3d half(rng.uniform(0.08, 0.25), rng.uniform(0.08, 0.25), rng.uniform(0.08, 0.25));
  geom::PointMatrix points(count, 3);
  for (int i = 0; i < count; ++i) points.row(i) = sample_box_surface(half, rng).transpose();
  return points;
}

geom::PointMatrix sample_cylinder(int count, Rng& rng) {
  const double radius = rng.uniform(0.06, 0.15);
  const double half_height = rng.uniform(0.10, 0.30);
  const double lateral_area = 2.0 * std::numbers::pi * radius * 2.0 * half_height;
  const double cap_area = std::numbers::pi * radius * radius;
  geom::PointMatrix points(count, 3);
  for (int i = 0; i < count; ++i) {
    double pick = rng.uniform(0.0, lateral_area + 2.0 * cap_area);
    double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    Eigen::Vector3d p;
    if (pick < lateral_area) {
      p = Eigen::Vector3d(radius * std::cos(theta), radius * std::sin(theta),
                          rng.uniform(-half_height, half_height));
    } else {
      double rho = radius * std::sqrt(rng.uniform01());
      double z = pick < lateral_area + cap_area ? half_height : -half_height;
      p = Eigen::Vector3d(rho * std::cos(theta), rho * std::sin(theta), z);
    }
    points.row(i) = p.transpose();
  }
  return points;
}

/// Two boxes joined into an L lying in the xz plane with shared thickness
/// along y; bottoms aligned.
geom::PointMatrix sample_l_bracket(int count, Rng& rng) {
  const double half_y = rng.uniform(0.05, 0.12);
  const Eigen::Vector3d upright_half(rng.uniform(0.05, 0.10), half_y, rng.uniform(0.12, 0.25));
  const Eigen::Vector3d arm_half(rng.uniform(0.12, 0.25), half_y, rng.uniform(0.05, 0.10));
  const Eigen::Vector3d arm_center(upright_half.x() + arm_half.x(), 0.0,
                                   -(upright_half.z() - arm_half.z()));
  auto area = [](const Eigen::Vector3d& h) {
    return 8.0 * (h.x() * h.y() + h.y() * h.z() + h.x() * h.z());
  };
  const double upright_area = area(upright_half);
  geom::PointMatrix points(count, 3);
  for (int i = 0; i < count; ++i) {
    Eigen::Vector3d p;
    if (rng.uniform(0.0, upright_area + area(arm_half)) < upright_area) {
      p = sample_box_surface(upright_half, rng);
    } else {
      p = arm_center + sample_box_surface(arm_half, rng);
    }
    points.row(i) = p.transpose();
  }
  return points;
}

geom::PointMatrix sample_shape(int shape, int count, Rng& rng) {
  switch (shape) {
    case 0: return sample_box(count, rng);
    case 1: return sample_cylinder(count, rng);
    default: return sample_l_bracket(count, rng);
  }
}

Eigen::Matrix3d sample_motion_rotation(const SceneSpec& spec, Rng& rng,
                                       std::vector<int>& used_group_elements) {
  if (spec.rotation_mode == RotationMode::kGroupMember) {
    const auto& group = geom::icosahedral_group();
    while (true) {
      int k = 1 + static_cast<int>(rng.uniform_index(geom::RotationGroup::kOrder - 1));
      if (std::find(used_group_elements.begin(), used_group_elements.end(), k) ==
          used_group_elements.end()) {
        used_group_elements.push_back(k);
        return group.element(k);
      }
    }
  }
  Eigen::Vector3d axis = random_unit_vector(rng);
  double angle_deg = rng.uniform(spec.min_rotation_deg, spec.max_rotation_deg);
  return Eigen::AngleAxisd(angle_deg * std::numbers::pi / 180.0, axis).toRotationMatrix();
}

json matrix_to_json(const geom::PointMatrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    rows.push_back(json::array({m(i, 0), m(i, 1), m(i, 2)}));
  }
  return rows;
}

geom::PointMatrix matrix_from_json(const json& rows, const std::string& field) {
  if (!rows.is_array() || rows.empty()) {
    throw std::runtime_error("scene field '" + field + "' must be a non-empty array");
  }
  geom::PointMatrix m(static_cast<Eigen::Index>(rows.size()), 3);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const json& row = rows[static_cast<size_t>(i)];
    if (!row.is_array() || row.size() != 3) {
      throw std::runtime_error("scene field '" + field + "[" + std::to_string(i) +
                               "]' must hold exactly 3 coordinates");
    }
    for (int a = 0; a < 3; ++a) m(i, a) = row[static_cast<size_t>(a)].get<double>();
  }
  return m;
}

const json& require_field(const json& doc, const std::string& field) {
  auto it = doc.find(field);
  if (it == doc.end()) throw std::runtime_error("scene file is missing field '" + field + "'");
  return *it;
}

}  // namespace

void SceneSpec::validate() const {
  if (min_parts < 1 || max_parts < min_parts) {
    throw std::invalid_argument("scene spec: part-count range is empty");
  }
  if (min_points_per_part < 1 || points < max_parts * min_points_per_part) {
    throw std::invalid_argument(
        "scene spec: point budget cannot cover max_parts * min_points_per_part");
  }
  if (min_rotation_deg <= 0.0 || max_rotation_deg < min_rotation_deg || max_rotation_deg > 180.0) {
    throw std::invalid_argument("scene spec: rotation magnitude range is degenerate");
  }
  if (min_translation < 0.0 || max_translation < min_translation) {
    throw std::invalid_argument("scene spec: translation magnitude range is degenerate");
  }
  if (flow_noise_sigma < 0.0) throw std::invalid_argument("scene spec: negative noise sigma");
  if (outlier_fraction < 0.0 || outlier_fraction > 1.0) {
    throw std::invalid_argument("scene spec: outlier fraction outside [0, 1]");
  }
}

SceneSample generate_scene(const SceneSpec& spec, int index) {
  spec.validate();
  if (index < 0) throw std::invalid_argument("scene index must be non-negative");
  Rng rng = Rng(spec.seed).fork(static_cast<uint64_t>(index));

  const int part_count =
      spec.min_parts + static_cast<int>(rng.uniform_index(
                           static_cast<uint64_t>(spec.max_parts - spec.min_parts + 1)));
  std::vector<int> counts(part_count, spec.min_points_per_part);
  for (int extra = spec.points - part_count * spec.min_points_per_part; extra > 0; --extra) {
    counts[rng.uniform_index(static_cast<uint64_t>(part_count))] += 1;
  }

  SceneSample sample;
  char id[32];
  std::snprintf(id, sizeof(id), "scene-%05d", index);
  sample.id = id;
  sample.points_k.resize(spec.points, 3);
  sample.mask.resize(static_cast<size_t>(spec.points));

  std::vector<Aabb> placed;
  std::vector<Eigen::Vector3d> centroids;
  int row = 0;
  for (int part = 0; part < part_count; ++part) {
    const int shape = static_cast<int>(rng.uniform_index(3));
    geom::PointMatrix local = sample_shape(shape, counts[part], rng);
    local.rowwise() -= local.colwise().mean();

    bool placed_ok = false;
    for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed_ok; ++attempt) {
      Eigen::Matrix3d pose = random_rotation(rng);
      Eigen::Vector3d center(rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7),
                             rng.uniform(-0.7, 0.7));
      geom::PointMatrix posed = (local * pose.transpose()).rowwise() + center.transpose();
      Aabb box = bounding_box(posed);
      bool clear = true;
      for (const Aabb& other : placed) {
        if (box.intersects(other, kPlacementMargin)) {
          clear = false;
          break;
        }
      }
      if (!clear) continue;
      placed.push_back(box);
      centroids.push_back(posed.colwise().mean().transpose());
      sample.points_k.middleRows(row, counts[part]) = posed;
      std::fill(sample.mask.begin() + row, sample.mask.begin() + row + counts[part], part);
      placed_ok = true;
    }
    if (!placed_ok) {
      throw std::runtime_error(
          "scene generation: could not place part " + std::to_string(part) +
          " without bounding-box overlap after " + std::to_string(kMaxPlacementAttempts) +
          " attempts");
    }
    row += counts[part];
  }

  std::vector<int> used_group_elements;
  sample.transforms.reserve(static_cast<size_t>(part_count));
  for (int part = 0; part < part_count; ++part) {
    Eigen::Matrix3d rotation = sample_motion_rotation(spec, rng, used_group_elements);
    Eigen::Vector3d shift =
        random_unit_vector(rng) * rng.uniform(spec.min_translation, spec.max_translation);
    // Rotate about the part centroid so displacement stays in the sampled
    // translation range instead of scaling with distance from the origin.
    const Eigen::Vector3d& c = centroids[static_cast<size_t>(part)];
    sample.transforms.push_back({rotation, c - rotation * c + shift});
  }

  sample.flow_clean.resize(spec.points, 3);
  for (int i = 0; i < spec.points; ++i) {
    const geom::RigidTransform& t = sample.transforms[static_cast<size_t>(sample.mask[i])];
    Eigen::Vector3d p = sample.points_k.row(i).transpose();
    sample.flow_clean.row(i) = (t.apply(p) - p).transpose();
  }
  sample.points_l = sample.points_k + sample.flow_clean;

  // Scale sigma so the expected per-point flow error (mean noise norm)
  // equals flow_noise_sigma: E||N(0, s^2 I_3)|| = s * sqrt(8/pi).
  const double component_sigma = spec.flow_noise_sigma / std::sqrt(8.0 / std::numbers::pi);
  sample.flow_noisy = sample.flow_clean;
  for (int i = 0; i < spec.points; ++i) {
    for (int a = 0; a < 3; ++a) sample.flow_noisy(i, a) += component_sigma * rng.normal();
  }

  Aabb scene_box = bounding_box(sample.points_k);
  Aabb box_l = bounding_box(sample.points_l);
  scene_box.lo = scene_box.lo.cwiseMin(box_l.lo);
  scene_box.hi = scene_box.hi.cwiseMax(box_l.hi);
  for (int i = 0; i < spec.points; ++i) {
    if (rng.uniform01() >= spec.outlier_fraction) continue;
    Eigen::Vector3d target(rng.uniform(scene_box.lo.x(), scene_box.hi.x()),
                           rng.uniform(scene_box.lo.y(), scene_box.hi.y()),
                           rng.uniform(scene_box.lo.z(), scene_box.hi.z()));
    sample.flow_noisy.row(i) = (target - sample.points_k.row(i).transpose()).transpose();
  }
  return sample;
}

void save_scene(const SceneSample& sample, const std::string& path) {
  json doc;
  doc["id"] = sample.id;
  doc["points_k"] = matrix_to_json(sample.points_k);
  doc["points_l"] = matrix_to_json(sample.points_l);
  doc["mask"] = sample.mask;
  json transforms = json::array();
  for (const geom::RigidTransform& t : sample.transforms) {
    json entry;
    json rotation = json::array();
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) rotation.push_back(t.rotation(r, c));
    }
    entry["rotation"] = rotation;
    entry["translation"] = json::array({t.translation.x(), t.translation.y(), t.translation.z()});
    transforms.push_back(entry);
  }
  doc["transforms"] = transforms;
  doc["flow_clean"] = matrix_to_json(sample.flow_clean);
  doc["flow_noisy"] = matrix_to_json(sample.flow_noisy);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open scene file for writing: " + path);
  out << doc.dump(1) << "\n";
}

SceneSample load_scene(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open scene file: " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("scene file " + path + " is not valid JSON: " + e.what());
  }

  SceneSample sample;
  const json& id = require_field(doc, "id");
  if (!id.is_string()) throw std::runtime_error("scene field 'id' must be a string");
  sample.id = id.get<std::string>();
  sample.points_k = matrix_from_json(require_field(doc, "points_k"), "points_k");
  sample.points_l = matrix_from_json(require_field(doc, "points_l"), "points_l");
  sample.flow_clean = matrix_from_json(require_field(doc, "flow_clean"), "flow_clean");
  sample.flow_noisy = matrix_from_json(require_field(doc, "flow_noisy"), "flow_noisy");

  const json& transforms = require_field(doc, "transforms");
  if (!transforms.is_array() || transforms.empty()) {
    throw std::runtime_error("scene field 'transforms' must be a non-empty array");
  }
  for (size_t s = 0; s < transforms.size(); ++s) {
    const std::string label = "transforms[" + std::to_string(s) + "]";
    const json& entry = transforms[s];
    if (!entry.is_object()) throw std::runtime_error("scene field '" + label + "' must be an object");
    auto rot = entry.find("rotation");
    auto tr = entry.find("translation");
    if (rot == entry.end() || !rot->is_array() || rot->size() != 9) {
      throw std::runtime_error("scene field '" + label + ".rotation' must hold 9 values");
    }
    if (tr == entry.end() || !tr->is_array() || tr->size() != 3) {
      throw std::runtime_error("scene field '" + label + ".translation' must hold 3 values");
    }
    geom::RigidTransform t;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) t.rotation(r, c) = (*rot)[static_cast<size_t>(3 * r + c)].get<double>();
    }
    for (int a = 0; a < 3; ++a) t.translation[a] = (*tr)[static_cast<size_t>(a)].get<double>();
    sample.transforms.push_back(t);
  }

  const json& mask = require_field(doc, "mask");
  if (!mask.is_array() || static_cast<Eigen::Index>(mask.size()) != sample.points_k.rows()) {
    throw std::runtime_error("scene field 'mask' must hold one part index per point");
  }
  for (size_t i = 0; i < mask.size(); ++i) {
    int part = mask[i].get<int>();
    if (part < 0 || part >= sample.parts()) {
      throw std::runtime_error("scene field 'mask[" + std::to_string(i) +
                               "]' references part " + std::to_string(part) +
                               " outside transforms");
    }
    sample.mask.push_back(part);
  }

  const Eigen::Index n = sample.points_k.rows();
  for (const char* field : {"points_l", "flow_clean", "flow_noisy"}) {
    const geom::PointMatrix& m = field == std::string("points_l") ? sample.points_l
                                 : field == std::string("flow_clean") ? sample.flow_clean
                                                                      : sample.flow_noisy;
    if (m.rows() != n) {
      throw std::runtime_error("scene field '" + std::string(field) +
                               "' row count does not match points_k");
    }
  }
  return sample;
}

std::vector<std::string> write_dataset(const SceneSpec& spec, const std::string& root,
                                       const std::string& split, int count) {
  if (count < 0) throw std::invalid_argument("dataset scene count must be non-negative");
  // FNV-1a over the split name keeps splits on disjoint seed streams.
  uint64_t split_tag = 1469598103934665603ull;
  for (unsigned char ch : split) {
    split_tag ^= ch;
    split_tag *= 1099511628211ull;
  }
  SceneSpec split_spec = spec;
  split_spec.seed = Rng(spec.seed).fork(split_tag).next_u64();

  std::filesystem::path dir = std::filesystem::path(root) / split;
  std::filesystem::create_directories(dir);
  std::vector<std::string> paths;
  paths.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    SceneSample sample = generate_scene(split_spec, i);
    std::string path = (dir / (sample.id + ".json")).string();
    save_scene(sample, path);
    paths.push_back(path);
  }
  return paths;
}

std::vector<std::string> list_scene_files(const std::string& root, const std::string& split) {
  std::filesystem::path dir = std::filesystem::path(root) / split;
  if (!std::filesystem::is_directory(dir)) {
    throw std::runtime_error("dataset split directory not found: " + dir.string());
  }
  std::vector<std::string> paths;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") {
      paths.push_back(entry.path().string());
    }
  }
  std::sort(paths.begin(), paths.end());
  return paths;
}

}  // namespace mbse3::scenegen
