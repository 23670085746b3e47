#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "ralf/place_recognition.hpp"

namespace ralf {

struct RecallReport {
  std::vector<int> k_values;
  std::vector<double> recall_at_k;
  double distance_threshold = 3.0;
};

struct PoseErrorRecord {
  Pose2 predicted, ground_truth;
  double dx = 0.0, dy = 0.0, dtheta_deg = 0.0;  // absolute, GT-local frame
};

struct PoseErrorReport {
  double mean_abs_dx = 0.0;    // meters
  double mean_abs_dy = 0.0;    // meters
  double mean_abs_dtheta = 0.0;  // degrees
  std::vector<PoseErrorRecord> per_query;
};

struct EvalQuery {
  GlobalDescriptor descriptor;
  Pose2 gt_pose;
};

/// Fraction of queries whose top-k retrievals contain a record within
/// `threshold` meters of the query's ground-truth pose.
inline RecallReport recall_at_k(const std::vector<EvalQuery>& queries,
                                const SubmapDatabase& db,
                                std::vector<int> k_values, double threshold) {
  if (db.empty()) throw EmptyDatabase();
  if (queries.empty()) throw std::invalid_argument("no queries");
  std::sort(k_values.begin(), k_values.end());
  RecallReport report;
  report.k_values = k_values;
  report.distance_threshold = threshold;
  const int k_max = k_values.empty() ? 0 : k_values.back();
  std::vector<int> hits(k_values.size(), 0);
  for (const auto& q : queries) {
    const auto top = db.query_k(q.descriptor, static_cast<std::size_t>(k_max));
    // rank of the first correct retrieval, if any
    int first_correct = -1;
    for (std::size_t r = 0; r < top.size(); ++r) {
      if (translation_distance(top[r]->pose, q.gt_pose) <= threshold) {
        first_correct = static_cast<int>(r) + 1;
        break;
      }
    }
    if (first_correct < 0) continue;
    for (std::size_t i = 0; i < k_values.size(); ++i)
      if (first_correct <= k_values[i]) ++hits[i];
  }
  for (std::size_t i = 0; i < k_values.size(); ++i)
    report.recall_at_k.push_back(static_cast<double>(hits[i]) /
                                 static_cast<double>(queries.size()));
  return report;
}

/// Mean absolute translation components in the ground-truth local frame and
/// mean absolute wrapped heading error in degrees.
inline PoseErrorReport pose_errors(
    const std::vector<std::pair<Pose2, Pose2>>& pred_gt) {
  if (pred_gt.empty()) throw std::invalid_argument("no pose pairs");
  PoseErrorReport report;
  for (const auto& [pred, gt] : pred_gt) {
    const Pose2 rel = between(gt, pred);  // expressed in the GT frame
    PoseErrorRecord rec;
    rec.predicted = pred;
    rec.ground_truth = gt;
    rec.dx = std::abs(rel.x);
    rec.dy = std::abs(rel.y);
    rec.dtheta_deg = std::abs(rel.theta) * 180.0 / kPi;
    report.mean_abs_dx += rec.dx;
    report.mean_abs_dy += rec.dy;
    report.mean_abs_dtheta += rec.dtheta_deg;
    report.per_query.push_back(rec);
  }
  const double n = static_cast<double>(pred_gt.size());
  report.mean_abs_dx /= n;
  report.mean_abs_dy /= n;
  report.mean_abs_dtheta /= n;
  return report;
}

}  // namespace ralf
