#pragma once

#include <string>
#include <vector>

#include "mbse3/geom.hpp"
#include "mbse3/rng.hpp"

namespace mbse3::scenegen {

enum class RotationMode { kGroupMember, kContinuous };

struct SceneSpec {
  int min_parts = 2;
  int max_parts = 4;
  int points = 512;
  int min_points_per_part = 48;
  double min_rotation_deg = 10.0;
  double max_rotation_deg = 60.0;
  double min_translation = 0.05;
  double max_translation = 0.4;
  RotationMode rotation_mode = RotationMode::kContinuous;
  double flow_noise_sigma = 0.02;
  double outlier_fraction = 0.1;
  uint64_t seed = 0;

  /// Throws std::invalid_argument on degenerate ranges or an infeasible
  /// point budget.
  void validate() const;
};

struct SceneSample {
  std::string id;
  geom::PointMatrix points_k;  // N x 3
  geom::PointMatrix points_l;  // N x 3, equals points_k + flow_clean
  std::vector<int> mask;       // part index per point
  std::vector<geom::RigidTransform> transforms;
  geom::PointMatrix flow_clean;
  geom::PointMatrix flow_noisy;

  int size() const { return static_cast<int>(points_k.rows()); }
  int parts() const { return static_cast<int>(transforms.size()); }
};

/// Deterministic in (spec.seed, index): poses 2-4 primitive parts (box,
/// cylinder, L-bracket) without bounding-box overlap, moves each by its own
/// rigid transform, and derives clean plus noise/outlier-corrupted flow.
/// Throws std::runtime_error when rejection sampling cannot place a part.
SceneSample generate_scene(const SceneSpec& spec, int index);

/// JSON serialization; load(save(s)) reproduces every byte. Malformed
/// documents raise std::runtime_error naming the offending field.
void save_scene(const SceneSample& sample, const std::string& path);
SceneSample load_scene(const std::string& path);

/// Generates `count` scenes into <root>/<split>/<scene-id>.json. The split
/// name is folded into the seed so splits carry disjoint scenes.
std::vector<std::string> write_dataset(const SceneSpec& spec, const std::string& root,
                                       const std::string& split, int count);

/// Sorted scene file paths under <root>/<split>.
std::vector<std::string> list_scene_files(const std::string& root, const std::string& split);

}  // namespace mbse3::scenegen
