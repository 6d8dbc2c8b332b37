#include "mbse3/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "mbse3/threading.hpp"

namespace mbse3::backbone {

namespace {

constexpr double kLeakySlope = 0.1;

void check_finite_activation(const diff::Tensor& values, int layer_id) {
  const double* p = values.data();
  for (int i = 0; i < values.size(); ++i) {
    if (!std::isfinite(p[i])) {
      const int point = i / (values.dim(1) * values.dim(2));
      throw std::runtime_error("non-finite activation at layer " + std::to_string(layer_id) +
                               ", point " + std::to_string(point));
    }
  }
}

std::string layer_param(int layer, const char* what) {
  return "backbone.layer" + std::to_string(layer) + "." + what;
}

}  // namespace

std::vector<geom::Vector3> BackboneConfig::effective_kernel_points() const {
  if (!kernel_points.empty()) return kernel_points;
  std::vector<geom::Vector3> pts;
  pts.emplace_back(0.0, 0.0, 0.0);
  const double a = kernel_radius / std::sqrt(3.0);
  for (double x : {-a, a})
    for (double y : {-a, a})
      for (double z : {-a, a}) pts.emplace_back(x, y, z);
  return pts;
}

void BackboneConfig::validate() const {
  if (layer_dims.empty()) throw std::invalid_argument("backbone needs at least one layer");
  for (int d : layer_dims) {
    if (d <= 0) throw std::invalid_argument("layer dimensions must be positive");
  }
  if (neighbors_k < 4) throw std::invalid_argument("neighbors_k must be at least 4");
  if (kernel_radius <= 0.0) throw std::invalid_argument("kernel_radius must be positive");
  if (kernel_bandwidth <= 0.0) throw std::invalid_argument("kernel_bandwidth must be positive");
  for (const geom::Vector3& p : effective_kernel_points()) {
    if (p.norm() > kernel_radius + 1e-12) {
      throw std::invalid_argument("kernel point outside the kernel radius");
    }
  }
}

IndexMatrix knn_neighborhoods(const geom::PointCloud& cloud, int k) {
  const int n = cloud.size();
  if (k > n) throw std::invalid_argument("neighborhood size exceeds the cloud size");
  IndexMatrix out(n, k);
  parallel_for_each(0, n, [&](std::int64_t i) {
    std::vector<std::pair<double, int>> by_distance(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
      by_distance[static_cast<size_t>(j)] = {(cloud.points.row(j) - cloud.points.row(i)).squaredNorm(), j};
    }
    std::partial_sort(by_distance.begin(), by_distance.begin() + k, by_distance.end());
    for (int t = 0; t < k; ++t) out(i, t) = by_distance[static_cast<size_t>(t)].second;
  });
  return out;
}

void register_backbone_params(diff::ParamStore& store, const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  const int m = static_cast<int>(cfg.effective_kernel_points().size());
  int fan_in = m;
  for (size_t l = 0; l < cfg.layer_dims.size(); ++l) {
    const int d_out = cfg.layer_dims[l];
    diff::Tensor weight({fan_in, d_out});
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (int i = 0; i < weight.size(); ++i) weight.data()[i] = rng.uniform(-bound, bound);
    store.register_param(layer_param(static_cast<int>(l) + 1, "weight"), std::move(weight));
    store.register_param(layer_param(static_cast<int>(l) + 1, "bias"),
                         diff::Tensor({d_out}));
    fan_in = m * d_out;
  }
}

std::vector<int> extract_feature_nodes(diff::Tape& tape, const geom::PointCloud& cloud,
                                       const BackboneConfig& cfg,
                                       const diff::ParamStore& params) {
  cfg.validate();
  const auto& group = geom::icosahedral_group();
  const int n = cloud.size();
  const int k = cfg.neighbors_k;
  const int order = geom::RotationGroup::kOrder;
  const std::vector<geom::Vector3> kernels = cfg.effective_kernel_points();
  const int m = static_cast<int>(kernels.size());

  const IndexMatrix neighbors = knn_neighborhoods(cloud, k);

  // Kernel copies rotated by every group element.
  std::vector<geom::Vector3> rotated(static_cast<size_t>(order) * m);
  for (int j = 0; j < order; ++j) {
    for (int km = 0; km < m; ++km) {
      rotated[static_cast<size_t>(j) * m + km] = group.element(j) * kernels[km];
    }
  }

  // Gaussian correlation of each neighbor offset against each rotated
  // kernel point: weights[(i*order + j), m, t] and their sums over t.
  // Both depend only on geometry, so they enter the tape as constants.
  const double inv_bw2 = 1.0 / (cfg.kernel_bandwidth * cfg.kernel_bandwidth);
  diff::Tensor weights({n * order, m, k});
  diff::Tensor weight_sums({n * order, m});
  parallel_for_each(0, n, [&](std::int64_t i) {
    std::vector<geom::Vector3> offsets(static_cast<size_t>(k));
    for (int t = 0; t < k; ++t) {
      offsets[static_cast<size_t>(t)] =
          (cloud.points.row(neighbors(i, t)) - cloud.points.row(i)).transpose();
    }
    for (int j = 0; j < order; ++j) {
      const size_t row = static_cast<size_t>(i) * order + j;
      for (int km = 0; km < m; ++km) {
        const geom::Vector3& anchor = rotated[static_cast<size_t>(j) * m + km];
        double total = 0.0;
        for (int t = 0; t < k; ++t) {
          const double w = std::exp(-(offsets[static_cast<size_t>(t)] - anchor).squaredNorm() * inv_bw2);
          weights.at3(static_cast<int>(row), km, t) = w;
          total += w;
        }
        weight_sums.at2(static_cast<int>(row), km) = total;
      }
    }
  });
  const int weights_node = tape.input(std::move(weights));

  // Flat row gather: feature rows of neighbor t at the same group index.
  std::vector<int> gather_index(static_cast<size_t>(n) * order * k);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < order; ++j) {
      for (int t = 0; t < k; ++t) {
        gather_index[(static_cast<size_t>(i) * order + j) * k + t] = neighbors(i, t) * order + j;
      }
    }
  }

  std::vector<int> layers;
  int previous = -1;
  for (size_t l = 0; l < cfg.layer_dims.size(); ++l) {
    const int layer_id = static_cast<int>(l) + 1;
    const int weight = tape.param(params, layer_param(layer_id, "weight"));
    const int bias = tape.param(params, layer_param(layer_id, "bias"));
    int mixed;
    if (l == 0) {
      mixed = tape.matmul(tape.input(weight_sums), weight);
    } else {
      const int d_prev = cfg.layer_dims[l - 1];
      const int flat_prev = tape.reshape(previous, {n * order, d_prev});
      const int gathered =
          tape.reshape(tape.gather_rows(flat_prev, gather_index), {n * order, k, d_prev});
      const int correlated = tape.matmul(weights_node, gathered);
      mixed = tape.matmul(tape.reshape(correlated, {n * order, m * d_prev}), weight);
    }
    const int activated = tape.leaky_relu(tape.add(mixed, bias), kLeakySlope);
    const int shaped = tape.reshape(activated, {n, order, cfg.layer_dims[l]});
    check_finite_activation(tape.val(shaped), layer_id);
    layers.push_back(shaped);
    previous = shaped;
  }
  return layers;
}

std::vector<EquivariantFeature> extract_features(const geom::PointCloud& cloud,
                                                 const BackboneConfig& cfg,
                                                 const diff::ParamStore& params) {
  diff::Tape tape;
  const std::vector<int> nodes = extract_feature_nodes(tape, cloud, cfg, params);
  std::vector<EquivariantFeature> out;
  for (size_t l = 0; l < nodes.size(); ++l) {
    out.push_back(EquivariantFeature{tape.val(nodes[l]), static_cast<int>(l) + 1});
  }
  return out;
}

diff::Tensor rotate_feature_values(const diff::Tensor& values, int g) {
  const auto& group = geom::icosahedral_group();
  if (g < 0 || g >= geom::RotationGroup::kOrder) {
    throw std::invalid_argument("group index out of range");
  }
  const int n = values.dim(0);
  const int order = values.dim(1);
  const int d = values.dim(2);
  const int g_inv = group.inverse(g);
  diff::Tensor out({n, order, d});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < order; ++j) {
      const int src = group.cayley(g_inv, j);
      const double* from = values.data() + (static_cast<size_t>(i) * order + src) * d;
      std::copy(from, from + d, out.data() + (static_cast<size_t>(i) * order + j) * d);
    }
  }
  return out;
}

EquivariantFeature rotate_feature(const EquivariantFeature& f, int g) {
  return EquivariantFeature{rotate_feature_values(f.values, g), f.layer_id};
}

}  // namespace mbse3::backbone
