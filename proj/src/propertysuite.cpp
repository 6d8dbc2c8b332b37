#include "mbse3/propertysuite.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>

#include "mbse3/backbone.hpp"
#include "mbse3/heads.hpp"
#include "mbse3/metrics.hpp"
#include "mbse3/rigidfit.hpp"
#include "mbse3/rng.hpp"
#include "mbse3/scenegen.hpp"
#include "mbse3/trainer.hpp"

namespace mbse3::propertysuite {

namespace {

std::string format_double(double v) {
  std::ostringstream out;
  out << std::setprecision(3) << v;
  return out.str();
}

geom::PointCloud random_cloud(int n, Rng& rng, double extent = 1.0) {
  geom::PointCloud cloud;
  cloud.points.resize(n, 3);
  for (int i = 0; i < n * 3; ++i) cloud.points.data()[i] = rng.uniform(-extent, extent);
  return cloud;
}

Eigen::Vector3d random_unit_vector(Rng& rng) {
  while (true) {
    Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
    const double norm = v.norm();
    if (norm > 1e-6) return v / norm;
  }
}

geom::Matrix3 random_rotation(Rng& rng) {
  return geom::axis_angle(random_unit_vector(rng), rng.uniform(0.0, 2.0 * std::numbers::pi));
}

double max_relative_gap(const diff::Tensor& a, const diff::Tensor& b) {
  double worst = 0.0;
  for (int i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a.at(i)), std::abs(b.at(i)), 1.0});
    worst = std::max(worst, std::abs(a.at(i) - b.at(i)) / denom);
  }
  return worst;
}

/// Small but structurally complete model: two layers, five kernel points.
trainer::TrainerConfig suite_config() {
  trainer::TrainerConfig cfg;
  cfg.backbone.layer_dims = {8, 16};
  cfg.backbone.neighbors_k = 6;
  const double r = 0.15;
  const double c = r / std::sqrt(3.0);
  cfg.backbone.kernel_points = {geom::Vector3(0, 0, 0), geom::Vector3(c, c, c),
                                geom::Vector3(c, -c, -c), geom::Vector3(-c, c, -c),
                                geom::Vector3(-c, -c, c)};
  cfg.backbone.kernel_radius = r;
  cfg.heads.slots = 4;
  cfg.heads.hidden = 16;
  return cfg;
}

diff::ParamStore suite_params(const trainer::TrainerConfig& cfg, uint64_t seed) {
  trainer::TrainerConfig seeded = cfg;
  seeded.seed = seed;
  diff::ParamStore params;
  trainer::register_model_params(params, seeded);
  return params;
}

template <typename Body>
PropertyResult timed_property(const std::string& name, Body&& body) {
  PropertyResult result;
  result.name = name;
  const auto start = std::chrono::steady_clock::now();
  body(result);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

PropertyResult check_group_closure() {
  return timed_property("group-closure", [](PropertyResult& r) {
    const geom::RotationGroup& group = geom::icosahedral_group();
    double worst = 0.0;
    worst = std::max(worst,
                     (group.element(0) - geom::Matrix3::Identity()).cwiseAbs().maxCoeff());
    for (int i = 0; i < geom::RotationGroup::kOrder; ++i) {
      for (int j = 0; j < geom::RotationGroup::kOrder; ++j) {
        const geom::Matrix3 product = group.element(i) * group.element(j);
        const geom::Matrix3& table = group.element(group.cayley(i, j));
        worst = std::max(worst, (product - table).cwiseAbs().maxCoeff());
      }
      const geom::Matrix3 inv = group.element(i) * group.element(group.inverse(i));
      worst = std::max(worst, (inv - geom::Matrix3::Identity()).cwiseAbs().maxCoeff());
    }
    r.pass = worst < 1e-9;
    r.detail = "3600 products + 60 inverses, max deviation " + format_double(worst);
  });
}

PropertyResult check_feature_equivariance(uint64_t seed) {
  return timed_property("feature-equivariance", [seed](PropertyResult& r) {
    const trainer::TrainerConfig cfg = suite_config();
    const diff::ParamStore params = suite_params(cfg, seed);
    const geom::RotationGroup& group = geom::icosahedral_group();
    Rng rng = Rng(seed).fork(11);
    double worst = 0.0;
    for (int trial = 0; trial < 2; ++trial) {
      const geom::PointCloud cloud = random_cloud(48, rng);
      const std::vector<backbone::EquivariantFeature> base =
          backbone::extract_features(cloud, cfg.backbone, params);
      for (int g = 0; g < geom::RotationGroup::kOrder; ++g) {
        geom::RigidTransform rot;
        rot.rotation = group.element(g);
        const geom::PointCloud turned = geom::apply_transform(rot, cloud);
        const std::vector<backbone::EquivariantFeature> actual =
            backbone::extract_features(turned, cfg.backbone, params);
        for (size_t l = 0; l < base.size(); ++l) {
          const backbone::EquivariantFeature expected = backbone::rotate_feature(base[l], g);
          worst = std::max(worst, max_relative_gap(actual[l].values, expected.values));
        }
      }
    }
    r.pass = worst < 1e-5;
    r.detail = "2 clouds x 60 rotations, max relative gap " + format_double(worst);
  });
}

PropertyResult check_translation_invariance(uint64_t seed) {
  return timed_property("translation-invariance", [seed](PropertyResult& r) {
    const trainer::TrainerConfig cfg = suite_config();
    const diff::ParamStore params = suite_params(cfg, seed);
    Rng rng = Rng(seed).fork(12);
    double worst = 0.0;
    for (int trial = 0; trial < 3; ++trial) {
      const geom::PointCloud cloud = random_cloud(48, rng);
      geom::RigidTransform shift;
      shift.translation = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
      const geom::PointCloud moved = geom::apply_transform(shift, cloud);
      const std::vector<backbone::EquivariantFeature> base =
          backbone::extract_features(cloud, cfg.backbone, params);
      const std::vector<backbone::EquivariantFeature> shifted =
          backbone::extract_features(moved, cfg.backbone, params);
      for (size_t l = 0; l < base.size(); ++l) {
        worst = std::max(worst, max_relative_gap(base[l].values, shifted[l].values));
      }
    }
    r.pass = worst < 1e-9;
    r.detail = "3 clouds, max relative gap " + format_double(worst);
  });
}

PropertyResult check_segmentation_invariance(uint64_t seed) {
  return timed_property("segmentation-invariance", [seed](PropertyResult& r) {
    const trainer::TrainerConfig cfg = suite_config();
    const diff::ParamStore params = suite_params(cfg, seed);
    const geom::RotationGroup& group = geom::icosahedral_group();
    Rng rng = Rng(seed).fork(13);
    double worst = 0.0;
    for (int trial = 0; trial < 3; ++trial) {
      const geom::PointCloud cloud = random_cloud(48, rng);
      geom::RigidTransform move;
      move.rotation = group.element(rng.uniform_index(geom::RotationGroup::kOrder));
      move.translation = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
      const geom::PointCloud moved = geom::apply_transform(move, cloud);
      const heads::SoftMask base =
          heads::segment(backbone::extract_features(cloud, cfg.backbone, params), params,
                         cfg.heads);
      const heads::SoftMask moved_mask =
          heads::segment(backbone::extract_features(moved, cfg.backbone, params), params,
                         cfg.heads);
      worst = std::max(worst, max_relative_gap(base.values, moved_mask.values));
    }
    r.pass = worst < 1e-5;
    r.detail = "3 rigidly moved clouds, max mask gap " + format_double(worst);
  });
}

PropertyResult check_kabsch_recovery(uint64_t seed, const rigidfit::FitOptions& options) {
  return timed_property("kabsch-recovery", [seed, &options](PropertyResult& r) {
    Rng rng = Rng(seed).fork(14);
    double worst = 0.0;
    for (int trial = 0; trial < 300; ++trial) {
      rigidfit::WeightedCorrespondence c;
      c.source.resize(50, 3);
      for (int i = 0; i < 150; ++i) c.source.data()[i] = rng.uniform(-1.0, 1.0);
      const geom::Matrix3 rot = random_rotation(rng);
      const geom::Vector3 t(rng.normal(), rng.normal(), rng.normal());
      c.target = (rot * c.source.transpose()).transpose().rowwise() + t.transpose();
      c.weights.resize(50);
      for (int i = 0; i < 50; ++i) c.weights(i) = rng.uniform(0.1, 2.0);
      const rigidfit::FitResult fit = rigidfit::weighted_kabsch(c, options);
      if (fit.degenerate || fit.ill_conditioned) {
        worst = std::max(worst, 1.0);
        continue;
      }
      worst = std::max(worst, (fit.transform.rotation - rot).cwiseAbs().maxCoeff());
      worst = std::max(worst, (fit.transform.translation - t).cwiseAbs().maxCoeff());
    }
    r.pass = worst < 1e-9;
    r.detail = "300 weighted problems (N=50), max deviation " + format_double(worst);
  });
}

PropertyResult check_kabsch_mirrored(uint64_t seed, const rigidfit::FitOptions& options) {
  return timed_property("kabsch-mirrored-points", [seed, &options](PropertyResult& r) {
    Rng rng = Rng(seed).fork(15);
    double min_det = 1.0;
    for (int trial = 0; trial < 50; ++trial) {
      rigidfit::WeightedCorrespondence c;
      c.source.resize(50, 3);
      for (int i = 0; i < 150; ++i) c.source.data()[i] = rng.uniform(-1.0, 1.0);
      c.target = c.source;
      c.target.col(2) *= -1.0;
      c.weights = Eigen::VectorXd::Constant(50, 1.0);
      const rigidfit::FitResult fit = rigidfit::weighted_kabsch(c, options);
      min_det = std::min(min_det, fit.transform.rotation.determinant());
    }
    r.pass = min_det > 0.0;
    r.detail = "50 reflected sets, min determinant " + format_double(min_det);
  });
}

PropertyResult check_loss_gradients(uint64_t seed) {
  return timed_property("loss-gradients", [seed](PropertyResult& r) {
    trainer::TrainerConfig cfg = suite_config();
    cfg.seed = seed;
    diff::ParamStore params;
    trainer::register_model_params(params, cfg);

    scenegen::SceneSpec spec;
    spec.min_parts = 2;
    spec.max_parts = 2;
    spec.points = 48;
    spec.min_points_per_part = 16;
    spec.seed = seed + 21;
    const scenegen::SceneSample scene = scenegen::generate_scene(spec, 0);
    const geom::PointCloud cloud_k{scene.points_k};
    const geom::PointCloud cloud_l{scene.points_l};
    const trainer::FlowState state = trainer::cold_start(scene);
    const geom::RotationGroup& group = geom::icosahedral_group();

    // The gate, the fitted transforms, and the bin targets enter the losses
    // as constants, so the finite-difference reference must hold them at
    // their unperturbed values.
    std::vector<geom::RigidTransform> kabsch;
    Eigen::MatrixXd beta;
    std::vector<bool> active;
    {
      diff::Tape tape;
      const std::vector<int> feats_k =
          backbone::extract_feature_nodes(tape, cloud_k, cfg.backbone, params);
      const int mask_node = heads::segment_node(tape, feats_k, params, cfg.heads);
      const Eigen::MatrixXd mask =
          Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
              tape.val(mask_node).data(), scene.size(), cfg.heads.slots);
      const rigidfit::MultibodyFit fit = rigidfit::fit_multibody(cloud_k, state.flow, mask);
      kabsch = fit.transforms();
      beta = trainer::consensus(cloud_k, state, kabsch, cfg.consensus_temperature);
      for (const rigidfit::FitResult& slot : fit.slots) active.push_back(!slot.degenerate);
    }

    auto build_loss = [&](diff::Tape& tape) {
      const std::vector<int> feats_k =
          backbone::extract_feature_nodes(tape, cloud_k, cfg.backbone, params);
      const std::vector<int> feats_l =
          backbone::extract_feature_nodes(tape, cloud_l, cfg.backbone, params);
      const int mask_node = heads::segment_node(tape, feats_k, params, cfg.heads);
      const int vk = heads::part_feature_node(tape, feats_k.back(), mask_node);
      const int vl = heads::part_feature_node(tape, feats_l.back(), mask_node);
      const int logits = heads::rotation_logit_node(tape, heads::correlate_node(tape, vk, vl));

      const int seg = trainer::segmentation_loss_node(tape, mask_node, cloud_k, state, kabsch, beta);
      const int mot = trainer::motion_loss_node(tape, logits, cfg.heads.motion_temperature, kabsch,
                                                active, group);
      const int sup = trainer::supervised_segmentation_loss_node(tape, mask_node, scene.mask);
      return tape.add(tape.add(tape.affine(seg, cfg.lambda_seg, 0.0),
                               tape.affine(mot, cfg.lambda_mot, 0.0)),
                      sup);
    };

    diff::Tape tape;
    const int loss = build_loss(tape);
    tape.backward(loss);
    const std::map<std::string, diff::Tensor> grads = tape.param_grads();

    const std::vector<std::string> names = params.names();
    Rng rng = Rng(seed).fork(16);
    double worst = 0.0;
    const double step = 1e-6;
    for (int probe = 0; probe < 30; ++probe) {
      const std::string& name = names[rng.uniform_index(names.size())];
      const diff::Tensor original = params.value(name);
      const std::vector<double> base_values(original.data(), original.data() + original.size());
      const int entry = static_cast<int>(rng.uniform_index(original.size()));

      auto eval_at = [&](double delta) {
        std::vector<double> values = base_values;
        values[static_cast<size_t>(entry)] += delta;
        params.set_value(name, diff::Tensor(original.shape(), std::move(values)));
        diff::Tape probe_tape;
        return probe_tape.val(build_loss(probe_tape)).value();
      };

      const double fd = (eval_at(step) - eval_at(-step)) / (2.0 * step);
      params.set_value(name, original);
      const auto it = grads.find(name);
      const double analytic = it == grads.end() ? 0.0 : it->second.at(entry);
      const double rel = std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-3});
      worst = std::max(worst, rel);
    }
    r.pass = worst < 1e-4;
    r.detail = "30 parameter entries, max relative gap " + format_double(worst);
  });
}

double pair_counting_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t n = a.size();
  if (n < 2) return 1.0;
  long agree = 0;
  long total = 0;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      ++total;
      if ((a[i] == a[j]) == (b[i] == b[j])) ++agree;
    }
  }
  return static_cast<double>(agree) / static_cast<double>(total);
}

double best_assignment_weight(const Eigen::MatrixXd& weight, int row, std::vector<bool>& used) {
  if (row == weight.rows()) return 0.0;
  double best = best_assignment_weight(weight, row + 1, used);  // leave this row unassigned
  for (int col = 0; col < weight.cols(); ++col) {
    if (used[static_cast<size_t>(col)]) continue;
    used[static_cast<size_t>(col)] = true;
    best = std::max(best, weight(row, col) + best_assignment_weight(weight, row + 1, used));
    used[static_cast<size_t>(col)] = false;
  }
  return best;
}

PropertyResult check_metric_oracles(uint64_t seed) {
  return timed_property("metric-oracles", [seed](PropertyResult& r) {
    Rng rng = Rng(seed).fork(17);
    double worst = 0.0;

    for (int trial = 0; trial < 30; ++trial) {
      const int n = 2 + static_cast<int>(rng.uniform_index(49));
      std::vector<int> a(static_cast<size_t>(n)), b(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) {
        a[static_cast<size_t>(i)] = static_cast<int>(rng.uniform_index(5));
        b[static_cast<size_t>(i)] = static_cast<int>(rng.uniform_index(4));
      }
      worst = std::max(worst, std::abs(metrics::rand_index(a, b) - pair_counting_rand_index(a, b)));
    }

    for (int trial = 0; trial < 30; ++trial) {
      const int rows = 2 + static_cast<int>(rng.uniform_index(5));
      const int cols = 2 + static_cast<int>(rng.uniform_index(5));
      Eigen::MatrixXd weight(rows, cols);
      for (int i = 0; i < rows * cols; ++i) weight.data()[i] = rng.uniform(0.0, 1.0);
      const std::vector<int> assignment = metrics::max_weight_assignment(weight);
      double got = 0.0;
      for (int row = 0; row < rows; ++row) {
        if (assignment[static_cast<size_t>(row)] >= 0) {
          got += weight(row, assignment[static_cast<size_t>(row)]);
        }
      }
      std::vector<bool> used(static_cast<size_t>(cols), false);
      worst = std::max(worst, std::abs(got - best_assignment_weight(weight, 0, used)));
    }

    scenegen::SceneSpec spec;
    spec.points = 96;
    spec.min_points_per_part = 24;
    spec.seed = seed + 23;
    const scenegen::SceneSample scene = scenegen::generate_scene(spec, 0);
    Eigen::MatrixXd one_hot = Eigen::MatrixXd::Zero(scene.size(), scene.parts());
    for (int i = 0; i < scene.size(); ++i) one_hot(i, scene.mask[static_cast<size_t>(i)]) = 1.0;
    const metrics::SegmentationEval perfect = metrics::segmentation_scores(one_hot, scene.mask);
    for (double score : {perfect.ap, perfect.pq, perfect.f1, perfect.pre, perfect.rec,
                         perfect.miou, perfect.ri}) {
      worst = std::max(worst, std::abs(score - 1.0));
    }

    r.pass = worst < 1e-9;
    r.detail = "30 partitions + 30 assignments + perfect scores, max deviation " +
               format_double(worst);
  });
}

PropertyResult check_scene_determinism(uint64_t seed) {
  return timed_property("scene-determinism", [seed](PropertyResult& r) {
    scenegen::SceneSpec spec;
    spec.points = 128;
    spec.min_points_per_part = 24;
    spec.flow_noise_sigma = 0.02;
    spec.outlier_fraction = 0.1;
    spec.seed = seed + 29;
    bool same = true;
    for (int index = 0; index < 3; ++index) {
      const scenegen::SceneSample first = scenegen::generate_scene(spec, index);
      const scenegen::SceneSample second = scenegen::generate_scene(spec, index);
      same = same && first.id == second.id && first.mask == second.mask;
      same = same && (first.points_k.array() == second.points_k.array()).all();
      same = same && (first.points_l.array() == second.points_l.array()).all();
      same = same && (first.flow_noisy.array() == second.flow_noisy.array()).all();
      for (size_t p = 0; same && p < first.transforms.size(); ++p) {
        same = (first.transforms[p].rotation.array() == second.transforms[p].rotation.array())
                   .all() &&
               (first.transforms[p].translation.array() ==
                second.transforms[p].translation.array())
                   .all();
      }
    }
    r.pass = same;
    r.detail = same ? "3 scenes regenerate bit-identically" : "regeneration differs";
  });
}

}  // namespace

std::vector<PropertyResult> run_property_suite(FaultMode fault, uint64_t seed) {
  rigidfit::FitOptions fit_options;
  fit_options.skip_determinant_fix = fault == FaultMode::kKabschReflection;

  std::vector<PropertyResult> results;
  results.push_back(check_group_closure());
  results.push_back(check_feature_equivariance(seed));
  results.push_back(check_translation_invariance(seed));
  results.push_back(check_segmentation_invariance(seed));
  results.push_back(check_kabsch_recovery(seed, fit_options));
  results.push_back(check_kabsch_mirrored(seed, fit_options));
  results.push_back(check_loss_gradients(seed));
  results.push_back(check_metric_oracles(seed));
  results.push_back(check_scene_determinism(seed));
  return results;
}

bool print_property_table(const std::vector<PropertyResult>& results, std::ostream& out) {
  size_t name_width = 8;
  for (const PropertyResult& r : results) name_width = std::max(name_width, r.name.size());

  bool all_pass = true;
  out << std::left << std::setw(static_cast<int>(name_width) + 2) << "property" << std::setw(8)
      << "status" << std::setw(10) << "time" << "detail\n";
  for (const PropertyResult& r : results) {
    all_pass = all_pass && r.pass;
    std::ostringstream time_text;
    time_text << std::fixed << std::setprecision(2) << r.seconds << "s";
    out << std::left << std::setw(static_cast<int>(name_width) + 2) << r.name << std::setw(8)
        << (r.pass ? "PASS" : "FAIL") << std::setw(10) << time_text.str() << r.detail << "\n";
  }
  out << (all_pass ? "all properties passed" : "some properties FAILED") << "\n";
  return all_pass;
}

}  // namespace mbse3::propertysuite
