#pragma once

#include <vector>

#include "mbse3/backbone.hpp"
#include "mbse3/diffcore.hpp"
#include "mbse3/geom.hpp"
#include "mbse3/rng.hpp"

namespace mbse3::heads {

struct HeadsConfig {
  /// Segmentation slot budget; scenes with fewer parts leave slots empty.
  int slots = 8;
  /// Hidden width of the pointwise segmentation map.
  int hidden = 64;
  /// Softmax temperature over the 60 relative-rotation bins.
  double motion_temperature = 1.0;

  /// Throws std::invalid_argument on an unusable configuration.
  void validate() const;
};

/// Per-point slot assignment; rows sum to 1.
struct SoftMask {
  diff::Tensor values;  // N x S

  int points() const { return values.dim(0); }
  int slots() const { return values.dim(1); }
};

/// Correlation of two frames' part features over the group: 60 x 60 x S.
struct CorrelationFeature {
  diff::Tensor values;
};

struct PartMotion {
  geom::RigidTransform transform;
  std::vector<double> rotation_distribution;  // 60 bins, sums to 1
  double confidence = 0.0;
  /// False when the slot's mask weight was below threshold; the transform is
  /// then the identity.
  bool active = true;
};

struct PartMotionSet {
  std::vector<PartMotion> slots;
};

/// Registers pooling and segmentation parameters ("heads.*") matching the
/// backbone layer dimensions.
void register_head_params(diff::ParamStore& store, const backbone::BackboneConfig& backbone_cfg,
                          const HeadsConfig& cfg, Rng& rng);

/// Attention pooling over the group axis: per point, a softmax over 60
/// logits (1x1 map of the feature channels) weights the 60 feature rows.
/// Invariant under rotate_feature because weights and features permute
/// together. Node shapes: feature (N,60,D) -> output (N,D).
int invariant_pool_node(diff::Tape& tape, int feature_node, const diff::ParamStore& params,
                        int layer_id);
diff::Tensor invariant_pool(const backbone::EquivariantFeature& feature,
                            const diff::ParamStore& params);

/// Pointwise segmentation over concatenated per-layer pooled features:
/// two-layer map (hidden, leaky 0.1) to slot logits, softmax rows.
int segment_node(diff::Tape& tape, const std::vector<int>& feature_nodes,
                 const diff::ParamStore& params, const HeadsConfig& cfg);
SoftMask segment(const std::vector<backbone::EquivariantFeature>& features,
                 const diff::ParamStore& params, const HeadsConfig& cfg);

/// Mask-weighted features max-pooled over points: (N,60,D) x (N,S) -> (60,D,S).
int part_feature_node(diff::Tape& tape, int feature_node, int mask_node);
diff::Tensor part_features(const backbone::EquivariantFeature& feature, const SoftMask& mask);

/// C[j1,j2,s] = <Vk[j1,:,s], Vl[j2,:,s]>.
int correlate_node(diff::Tape& tape, int vk_node, int vl_node);
CorrelationFeature correlate(const diff::Tensor& vk, const diff::Tensor& vl);

/// Relative-rotation bin logits from a correlation volume:
/// z[s,r] = sum_j C[j, cayley(r,j), s]. Node shapes: (60,60,S) -> (S,60).
int rotation_logit_node(diff::Tape& tape, int correlation_node);

/// Constant 0/1 selector realizing rotation_logit_node's sum as a single
/// (S,3600) x (3600,60) product.
const diff::Tensor& rotation_bin_selector();

/// Per-slot rigid motion from the correlation volume: rotation = argmax bin
/// element, translation = mask-weighted centroid difference under that
/// rotation, confidence = top bin probability. Slots whose mask sum falls
/// below 1e-6 come back inactive with the identity transform.
PartMotionSet estimate_motion(const CorrelationFeature& correlation, const geom::PointCloud& cloud,
                              const Eigen::Matrix<double, Eigen::Dynamic, 3>& flow,
                              const SoftMask& mask, const geom::RotationGroup& group,
                              double temperature);

}  // namespace mbse3::heads
