#include "mbse3/heads.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mbse3::heads {

namespace {

constexpr double kLeakySlope = 0.1;
constexpr double kInactiveMaskSum = 1e-6;
constexpr int kOrder = geom::RotationGroup::kOrder;

std::string pool_param(int layer, const char* what) {
  return "heads.pool" + std::to_string(layer) + "." + what;
}

diff::Tensor uniform_init(std::vector<int> shape, int fan_in, Rng& rng) {
  diff::Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (int i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

void HeadsConfig::validate() const {
  if (slots < 1) throw std::invalid_argument("heads config: at least one slot required");
  if (hidden < 1) throw std::invalid_argument("heads config: hidden width must be positive");
  if (motion_temperature <= 0.0) {
    throw std::invalid_argument("heads config: motion temperature must be positive");
  }
}

void register_head_params(diff::ParamStore& store, const backbone::BackboneConfig& backbone_cfg,
                          const HeadsConfig& cfg, Rng& rng) {
  int fused = 0;
  for (size_t l = 0; l < backbone_cfg.layer_dims.size(); ++l) {
    const int d = backbone_cfg.layer_dims[l];
    const int layer_id = static_cast<int>(l) + 1;
    store.register_param(pool_param(layer_id, "weight"), uniform_init({d, 1}, d, rng));
    store.register_param(pool_param(layer_id, "bias"), diff::Tensor({1}));
    fused += d;
  }
  store.register_param("heads.seg.fc1.weight", uniform_init({fused, cfg.hidden}, fused, rng));
  store.register_param("heads.seg.fc1.bias", diff::Tensor({cfg.hidden}));
  store.register_param("heads.seg.fc2.weight",
                       uniform_init({cfg.hidden, cfg.slots}, cfg.hidden, rng));
  store.register_param("heads.seg.fc2.bias", diff::Tensor({cfg.slots}));
}

int invariant_pool_node(diff::Tape& tape, int feature_node, const diff::ParamStore& params,
                        int layer_id) {
  const diff::Tensor& f = tape.val(feature_node);
  const int n = f.dim(0), order = f.dim(1), d = f.dim(2);
  const int flat = tape.reshape(feature_node, {n * order, d});
  const int logits = tape.add(tape.matmul(flat, tape.param(params, pool_param(layer_id, "weight"))),
                              tape.param(params, pool_param(layer_id, "bias")));
  const int attention = tape.softmax(tape.reshape(logits, {n, order}));
  const int pooled = tape.matmul(tape.reshape(attention, {n, 1, order}), feature_node);
  return tape.reshape(pooled, {n, d});
}

diff::Tensor invariant_pool(const backbone::EquivariantFeature& feature,
                            const diff::ParamStore& params) {
  diff::Tape tape;
  return tape.val(invariant_pool_node(tape, tape.input(feature.values), params, feature.layer_id));
}

int segment_node(diff::Tape& tape, const std::vector<int>& feature_nodes,
                 const diff::ParamStore& params, const HeadsConfig& cfg) {
  if (feature_nodes.empty()) throw std::invalid_argument("segment needs at least one layer");
  int fused = -1;
  for (size_t l = 0; l < feature_nodes.size(); ++l) {
    const int pooled =
        invariant_pool_node(tape, feature_nodes[l], params, static_cast<int>(l) + 1);
    fused = l == 0 ? pooled : tape.concat(fused, pooled, 1);
  }
  const int hidden = tape.leaky_relu(
      tape.add(tape.matmul(fused, tape.param(params, "heads.seg.fc1.weight")),
               tape.param(params, "heads.seg.fc1.bias")),
      kLeakySlope);
  const int logits = tape.add(tape.matmul(hidden, tape.param(params, "heads.seg.fc2.weight")),
                              tape.param(params, "heads.seg.fc2.bias"));
  (void)cfg;
  return tape.softmax(logits);
}

SoftMask segment(const std::vector<backbone::EquivariantFeature>& features,
                 const diff::ParamStore& params, const HeadsConfig& cfg) {
  diff::Tape tape;
  std::vector<int> nodes;
  for (const auto& f : features) nodes.push_back(tape.input(f.values));
  return SoftMask{tape.val(segment_node(tape, nodes, params, cfg))};
}

int part_feature_node(diff::Tape& tape, int feature_node, int mask_node) {
  const diff::Tensor& f = tape.val(feature_node);
  const diff::Tensor& m = tape.val(mask_node);
  if (f.dim(0) != m.dim(0)) throw std::invalid_argument("feature/mask point counts disagree");
  const int n = f.dim(0), order = f.dim(1), d = f.dim(2);
  const int s = m.dim(1);
  const int weighted = tape.mul(tape.reshape(feature_node, {n, order, d, 1}),
                                tape.reshape(mask_node, {n, 1, 1, s}));
  return tape.max_over_axis(weighted, 0);
}

diff::Tensor part_features(const backbone::EquivariantFeature& feature, const SoftMask& mask) {
  diff::Tape tape;
  return tape.val(
      part_feature_node(tape, tape.input(feature.values), tape.input(mask.values)));
}

int correlate_node(diff::Tape& tape, int vk_node, int vl_node) {
  const diff::Tensor& vk = tape.val(vk_node);
  const diff::Tensor& vl = tape.val(vl_node);
  if (vk.shape() != vl.shape()) throw std::invalid_argument("part feature shapes disagree");
  const int order = vk.dim(0), d = vk.dim(1), s = vk.dim(2);

  const auto slot_major = [&](int node) {
    const int flat = tape.reshape(node, {order * d, s});
    return tape.reshape(tape.transpose2d(flat), {s, order, d});
  };
  const int per_slot = tape.matmul(slot_major(vk_node), slot_major(vl_node), false, true);
  const int flat = tape.reshape(per_slot, {s, order * order});
  return tape.reshape(tape.transpose2d(flat), {order, order, s});
}

CorrelationFeature correlate(const diff::Tensor& vk, const diff::Tensor& vl) {
  diff::Tape tape;
  return CorrelationFeature{tape.val(correlate_node(tape, tape.input(vk), tape.input(vl)))};
}

const diff::Tensor& rotation_bin_selector() {
  static const diff::Tensor selector = [] {
    const auto& group = geom::icosahedral_group();
    diff::Tensor b({kOrder * kOrder, kOrder});
    for (int r = 0; r < kOrder; ++r) {
      for (int j = 0; j < kOrder; ++j) {
        b.at2(j * kOrder + group.cayley(r, j), r) = 1.0;
      }
    }
    return b;
  }();
  return selector;
}

int rotation_logit_node(diff::Tape& tape, int correlation_node) {
  const diff::Tensor& c = tape.val(correlation_node);
  const int s = c.dim(2);
  const int slot_major = tape.transpose2d(tape.reshape(correlation_node, {kOrder * kOrder, s}));
  return tape.matmul(slot_major, tape.input(rotation_bin_selector()));
}

PartMotionSet estimate_motion(const CorrelationFeature& correlation, const geom::PointCloud& cloud,
                              const Eigen::Matrix<double, Eigen::Dynamic, 3>& flow,
                              const SoftMask& mask, const geom::RotationGroup& group,
                              double temperature) {
  const diff::Tensor& c = correlation.values;
  if (c.rank() != 3 || c.dim(0) != kOrder || c.dim(1) != kOrder) {
    throw std::invalid_argument("correlation volume must be 60x60xS");
  }
  const int s_count = c.dim(2);
  const int n = cloud.size();
  if (mask.points() != n || flow.rows() != n) {
    throw std::invalid_argument("cloud, flow, and mask sizes disagree");
  }
  if (mask.slots() != s_count) throw std::invalid_argument("mask slots disagree with correlation");
  if (temperature <= 0.0) throw std::invalid_argument("temperature must be positive");

  PartMotionSet out;
  out.slots.resize(static_cast<size_t>(s_count));
  for (int s = 0; s < s_count; ++s) {
    PartMotion& slot = out.slots[static_cast<size_t>(s)];
    slot.rotation_distribution.assign(kOrder, 1.0 / kOrder);

    double mask_sum = 0.0;
    geom::Vector3 from = geom::Vector3::Zero();
    geom::Vector3 to = geom::Vector3::Zero();
    for (int i = 0; i < n; ++i) {
      const double w = mask.values.at2(i, s);
      mask_sum += w;
      from += w * cloud.points.row(i).transpose();
      to += w * (cloud.points.row(i).transpose() + flow.row(i).transpose());
    }
    if (mask_sum < kInactiveMaskSum) {
      slot.active = false;
      slot.confidence = 0.0;
      continue;
    }
    from /= mask_sum;
    to /= mask_sum;

    std::array<double, kOrder> logits{};
    for (int r = 0; r < kOrder; ++r) {
      double z = 0.0;
      for (int j = 0; j < kOrder; ++j) z += c.at3(j, group.cayley(r, j), s);
      logits[static_cast<size_t>(r)] = z / temperature;
    }
    int best = 0;
    double peak = logits[0];
    for (int r = 1; r < kOrder; ++r) {
      if (logits[static_cast<size_t>(r)] > peak) {
        peak = logits[static_cast<size_t>(r)];
        best = r;
      }
    }
    double total = 0.0;
    for (int r = 0; r < kOrder; ++r) {
      slot.rotation_distribution[static_cast<size_t>(r)] =
          std::exp(logits[static_cast<size_t>(r)] - peak);
      total += slot.rotation_distribution[static_cast<size_t>(r)];
    }
    for (double& p : slot.rotation_distribution) p /= total;

    slot.transform.rotation = group.element(best);
    slot.transform.translation = to - slot.transform.rotation * from;
    slot.confidence = slot.rotation_distribution[static_cast<size_t>(best)];
  }
  return out;
}

}  // namespace mbse3::heads
