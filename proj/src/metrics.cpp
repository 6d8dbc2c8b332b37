#include "mbse3/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace mbse3::metrics {
namespace {

constexpr double kIouThreshold = 0.5;

double intersection_over_union(const std::vector<int>& a, const std::vector<int>& b) {
  size_t ia = 0, ib = 0, common = 0;
  while (ia < a.size() && ib < b.size()) {
    if (a[ia] == b[ib]) {
      ++common;
      ++ia;
      ++ib;
    } else if (a[ia] < b[ib]) {
      ++ia;
    } else {
      ++ib;
    }
  }
  const size_t unions = a.size() + b.size() - common;
  return unions == 0 ? 0.0 : static_cast<double>(common) / static_cast<double>(unions);
}

/// Minimum-cost perfect assignment on a square matrix (Hungarian algorithm
/// with row/column potentials). Returns column assigned to each row.
std::vector<int> hungarian_min_assignment(const Eigen::MatrixXd& cost) {
  const int dim = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(dim) + 1, 0.0);
  std::vector<double> v(static_cast<size_t>(dim) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(dim) + 1, 0);
  std::vector<int> way(static_cast<size_t>(dim) + 1, 0);
  for (int i = 1; i <= dim; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(dim) + 1, inf);
    std::vector<char> used(static_cast<size_t>(dim) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = p[static_cast<size_t>(j0)];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= dim; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= dim; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<size_t>(dim), -1);
  for (int j = 1; j <= dim; ++j) {
    if (p[static_cast<size_t>(j)] >= 1) row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)]) - 1] = j - 1;
  }
  return row_to_col;
}

double average_precision(const std::vector<Instance>& pred, const std::vector<Instance>& gt) {
  std::vector<int> order(pred.size());
  for (size_t i = 0; i < order.size(); ++i) order[static_cast<size_t>(i)] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return pred[static_cast<size_t>(a)].confidence > pred[static_cast<size_t>(b)].confidence;
  });

  std::vector<char> gt_taken(gt.size(), 0);
  double ap = 0.0;
  double prev_recall = 0.0;
  int true_positives = 0;
  for (size_t rank = 0; rank < order.size(); ++rank) {
    const Instance& inst = pred[static_cast<size_t>(order[rank])];
    int best_gt = -1;
    double best_iou = kIouThreshold;
    for (size_t g = 0; g < gt.size(); ++g) {
      if (gt_taken[g]) continue;
      const double iou = intersection_over_union(inst.points, gt[g].points);
      if (iou > best_iou) {
        best_iou = iou;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt < 0) continue;
    gt_taken[static_cast<size_t>(best_gt)] = 1;
    ++true_positives;
    const double recall = static_cast<double>(true_positives) / static_cast<double>(gt.size());
    const double precision = static_cast<double>(true_positives) / static_cast<double>(rank + 1);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

}  // namespace

std::vector<int> hard_mask(const Eigen::MatrixXd& soft_mask) {
  if (soft_mask.rows() == 0 || soft_mask.cols() == 0) {
    throw std::invalid_argument("hard_mask: empty soft mask");
  }
  std::vector<int> labels(static_cast<size_t>(soft_mask.rows()), 0);
  for (Eigen::Index i = 0; i < soft_mask.rows(); ++i) {
    int best = 0;
    for (Eigen::Index s = 1; s < soft_mask.cols(); ++s) {
      if (soft_mask(i, s) > soft_mask(i, best)) best = static_cast<int>(s);
    }
    labels[static_cast<size_t>(i)] = best;
  }
  return labels;
}

std::vector<Instance> predicted_instances(const Eigen::MatrixXd& soft_mask) {
  const std::vector<int> labels = hard_mask(soft_mask);
  std::vector<Instance> instances;
  for (Eigen::Index s = 0; s < soft_mask.cols(); ++s) {
    Instance inst;
    inst.label = static_cast<int>(s);
    double weight = 0.0;
    for (Eigen::Index i = 0; i < soft_mask.rows(); ++i) {
      if (labels[static_cast<size_t>(i)] != s) continue;
      inst.points.push_back(static_cast<int>(i));
      weight += soft_mask(i, s);
    }
    if (inst.points.empty()) continue;
    inst.confidence = weight / static_cast<double>(inst.points.size());
    instances.push_back(std::move(inst));
  }
  return instances;
}

std::vector<Instance> ground_truth_instances(const std::vector<int>& labels) {
  std::map<int, Instance> by_label;
  for (size_t i = 0; i < labels.size(); ++i) {
    Instance& inst = by_label[labels[i]];
    inst.label = labels[i];
    inst.points.push_back(static_cast<int>(i));
  }
  std::vector<Instance> instances;
  instances.reserve(by_label.size());
  for (auto& [label, inst] : by_label) instances.push_back(std::move(inst));
  return instances;
}

std::vector<int> max_weight_assignment(const Eigen::MatrixXd& weight) {
  const int rows = static_cast<int>(weight.rows());
  const int cols = static_cast<int>(weight.cols());
  if (rows == 0) return {};
  const int dim = std::max(rows, cols);
  Eigen::MatrixXd cost = Eigen::MatrixXd::Zero(dim, dim);
  cost.topLeftCorner(rows, cols) = -weight;
  std::vector<int> assignment = hungarian_min_assignment(cost);
  assignment.resize(static_cast<size_t>(rows));
  for (int& col : assignment) {
    if (col >= cols) col = -1;
  }
  return assignment;
}

MatchResult match_instances(const std::vector<Instance>& pred, const std::vector<Instance>& gt) {
  if (gt.empty()) throw std::invalid_argument("match_instances: empty ground truth");
  MatchResult result;
  result.pred_count = static_cast<int>(pred.size());
  result.gt_count = static_cast<int>(gt.size());
  if (pred.empty()) return result;

  Eigen::MatrixXd weight(result.pred_count, result.gt_count);
  for (int i = 0; i < result.pred_count; ++i) {
    for (int j = 0; j < result.gt_count; ++j) {
      weight(i, j) = intersection_over_union(pred[static_cast<size_t>(i)].points,
                                             gt[static_cast<size_t>(j)].points);
    }
  }
  const std::vector<int> assignment = max_weight_assignment(weight);
  for (int i = 0; i < result.pred_count; ++i) {
    const int j = assignment[static_cast<size_t>(i)];
    if (j < 0) continue;
    const double iou = weight(i, j);
    result.assignment_iou += iou;
    if (iou > kIouThreshold) result.matches.push_back({i, j, iou});
  }
  return result;
}

double rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("rand_index: labelings differ in length");
  const auto n = static_cast<double>(a.size());
  if (a.size() < 2) return 1.0;

  std::map<std::pair<int, int>, double> cells;
  std::map<int, double> row_sums;
  std::map<int, double> col_sums;
  for (size_t i = 0; i < a.size(); ++i) {
    cells[{a[i], b[i]}] += 1.0;
    row_sums[a[i]] += 1.0;
    col_sums[b[i]] += 1.0;
  }
  auto pairs = [](double x) { return x * (x - 1.0) / 2.0; };
  double same_same = 0.0;
  for (const auto& [key, count] : cells) same_same += pairs(count);
  double same_a = 0.0;
  for (const auto& [key, count] : row_sums) same_a += pairs(count);
  double same_b = 0.0;
  for (const auto& [key, count] : col_sums) same_b += pairs(count);
  const double total = pairs(n);
  const double agreements = total + 2.0 * same_same - same_a - same_b;
  return agreements / total;
}

SegmentationEval segmentation_scores(const Eigen::MatrixXd& soft_mask,
                                     const std::vector<int>& gt_labels) {
  if (static_cast<size_t>(soft_mask.rows()) != gt_labels.size()) {
    throw std::invalid_argument("segmentation_scores: mask and labels differ in length");
  }
  const std::vector<Instance> pred = predicted_instances(soft_mask);
  const std::vector<Instance> gt = ground_truth_instances(gt_labels);
  const MatchResult match = match_instances(pred, gt);

  SegmentationEval eval;
  const auto tp = static_cast<double>(match.matches.size());
  double matched_iou = 0.0;
  for (const InstanceMatch& m : match.matches) matched_iou += m.iou;

  eval.pre = tp / static_cast<double>(match.pred_count);
  eval.rec = tp / static_cast<double>(match.gt_count);
  eval.f1 = (eval.pre + eval.rec) > 0.0 ? 2.0 * eval.pre * eval.rec / (eval.pre + eval.rec) : 0.0;
  const double pq_denominator =
      tp + 0.5 * (match.pred_count - tp) + 0.5 * (match.gt_count - tp);
  eval.pq = pq_denominator > 0.0 ? matched_iou / pq_denominator : 0.0;
  eval.miou = matched_iou / static_cast<double>(match.gt_count);
  eval.ap = average_precision(pred, gt);
  eval.ri = rand_index(hard_mask(soft_mask), gt_labels);
  return eval;
}

MotionEval motion_scores(const std::vector<geom::RigidTransform>& slot_transforms,
                         const Eigen::MatrixXd& flow_pred, const Eigen::MatrixXd& soft_mask,
                         const scenegen::SceneSample& gt) {
  if (flow_pred.rows() != gt.flow_clean.rows() || flow_pred.cols() != 3) {
    throw std::invalid_argument("motion_scores: flow size does not match the scene");
  }
  if (static_cast<Eigen::Index>(slot_transforms.size()) != soft_mask.cols()) {
    throw std::invalid_argument("motion_scores: one transform per mask slot required");
  }

  MotionEval eval;
  eval.epe3d = (flow_pred - gt.flow_clean).rowwise().norm().mean();

  const std::vector<Instance> pred = predicted_instances(soft_mask);
  const std::vector<Instance> gt_inst = ground_truth_instances(gt.mask);
  const MatchResult match = match_instances(pred, gt_inst);
  if (match.matches.empty()) return eval;

  double angular = 0.0;
  double translation = 0.0;
  for (const InstanceMatch& m : match.matches) {
    const int slot = pred[static_cast<size_t>(m.pred)].label;
    const int part = gt_inst[static_cast<size_t>(m.gt)].label;
    const geom::RigidTransform& estimate = slot_transforms[static_cast<size_t>(slot)];
    const geom::RigidTransform& truth = gt.transforms[static_cast<size_t>(part)];
    angular += geom::geodesic_angle_deg(estimate.rotation, truth.rotation);
    translation += (estimate.translation - truth.translation).norm();
  }
  const auto matched = static_cast<double>(match.matches.size());
  eval.angular_error_deg = angular / matched;
  eval.translation_error = translation / matched;
  return eval;
}

MotionEval motion_scores(const heads::PartMotionSet& motion, const Eigen::MatrixXd& flow_pred,
                         const Eigen::MatrixXd& soft_mask, const scenegen::SceneSample& gt) {
  std::vector<geom::RigidTransform> transforms;
  transforms.reserve(motion.slots.size());
  for (const heads::PartMotion& part : motion.slots) transforms.push_back(part.transform);
  return motion_scores(transforms, flow_pred, soft_mask, gt);
}

}  // namespace mbse3::metrics
