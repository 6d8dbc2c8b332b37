#pragma once

#include <vector>

#include "mbse3/diffcore.hpp"
#include "mbse3/geom.hpp"
#include "mbse3/rng.hpp"

namespace mbse3::backbone {

using IndexMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Shape of the per-point equivariant feature stack.
struct BackboneConfig {
  std::vector<int> layer_dims{16, 32};
  int neighbors_k = 16;
  /// Correlation kernel points in meters, all within kernel_radius of the
  /// origin. Empty selects the default layout (center plus a cube's eight
  /// vertices at kernel_radius).
  std::vector<geom::Vector3> kernel_points;
  double kernel_radius = 0.2;
  double kernel_bandwidth = 0.1;

  /// kernel_points with the default layout materialized.
  std::vector<geom::Vector3> effective_kernel_points() const;
  /// Throws std::invalid_argument on an unusable configuration.
  void validate() const;
};

/// One layer's output: per point, one feature row per group element.
struct EquivariantFeature {
  diff::Tensor values;  // N x 60 x D
  int layer_id = 0;
};

/// Indices of the k nearest points (self included) for every point, ties
/// broken toward the lower index. Throws std::invalid_argument if k exceeds
/// the cloud size.
IndexMatrix knn_neighborhoods(const geom::PointCloud& cloud, int k);

/// Registers backbone weights ("backbone.layer<l>.weight|bias") for the
/// configured shapes.
void register_backbone_params(diff::ParamStore& store, const BackboneConfig& cfg, Rng& rng);

/// Builds the feature stack on the tape and returns one node per layer,
/// each shaped N x 60 x D_l. Throws std::runtime_error on a non-finite
/// activation, identifying the layer and point.
std::vector<int> extract_feature_nodes(diff::Tape& tape, const geom::PointCloud& cloud,
                                       const BackboneConfig& cfg, const diff::ParamStore& params);

/// Convenience wrapper evaluating the stack on a private tape.
std::vector<EquivariantFeature> extract_features(const geom::PointCloud& cloud,
                                                 const BackboneConfig& cfg,
                                                 const diff::ParamStore& params);

/// Group action on the feature domain: out[i, j, :] = f[i, cayley(g^-1, j), :].
diff::Tensor rotate_feature_values(const diff::Tensor& values, int g);
EquivariantFeature rotate_feature(const EquivariantFeature& f, int g);

}  // namespace mbse3::backbone
