#pragma once

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ralf/geometry.hpp"

namespace ralf {

struct NoPositive : std::runtime_error {
  NoPositive() : std::runtime_error("no positive sample within tau_p") {}
};
struct NoNegative : std::runtime_error {
  NoNegative() : std::runtime_error("no sample farther than tau_n") {}
};

struct TripletConfig {
  double margin = 0.5;
  double tau_p = 2.0;   // meters
  double tau_n = 80.0;  // meters

  void check() const {
    if (!(margin > 0.0) || !(tau_p > 0.0) || !(tau_p < tau_n))
      throw std::invalid_argument("invalid TripletConfig");
  }
};

struct AugmentSpec {
  double max_rot_deg = 30.0;
  double max_trans = 5.0;  // meters

  void check() const {
    if (max_rot_deg < 0.0 || max_trans < 0.0)
      throw std::invalid_argument("invalid AugmentSpec");
  }
};

/// One observation: ground-truth pose, radar BEV and the LiDAR scan
/// (sensor frame) it was taken with.
struct Frame {
  int id = 0;
  Pose2 pose;
  BevImage radar;
  PointCloud2 lidar_cloud;
};

/// Pose-anchored aggregation of map points within a radius, in its own frame.
struct Submap {
  int id = 0;
  Pose2 pose;
  PointCloud2 cloud;  // submap frame
  BevImage bev;
};

/// One submap per `spacing` meters of traveled distance, aggregating all
/// LiDAR points within `radius` of its center.
inline std::vector<Submap> build_submaps(const std::vector<Frame>& frames,
                                         double spacing, double radius,
                                         const BevConfig& cfg,
                                         BevMode mode = BevMode::occupancy) {
  if (frames.empty()) throw std::invalid_argument("no frames");
  if (spacing <= 0.0 || radius <= 0.0)
    throw std::invalid_argument("spacing and radius must be positive");

  // map-frame points with their source position (for the radius test)
  std::vector<Point2> map_points;
  for (const auto& f : frames) {
    const auto world = transform_cloud(f.pose, f.lidar_cloud);
    map_points.insert(map_points.end(), world.points.begin(), world.points.end());
  }

  std::vector<Submap> submaps;
  double traveled = 0.0, next_at = 0.0;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (i > 0)
      traveled += translation_distance(frames[i].pose, frames[i - 1].pose);
    if (traveled + 1e-9 < next_at) continue;
    next_at = traveled + spacing;

    Submap sm;
    sm.id = static_cast<int>(submaps.size());
    sm.pose = frames[i].pose;
    const Pose2 inv = inverse(sm.pose);
    for (const auto& p : map_points) {
      if (std::hypot(p.x - sm.pose.x, p.y - sm.pose.y) > radius) continue;
      auto [lx, ly] = inv.apply(p.x, p.y);
      sm.cloud.points.push_back({lx, ly, p.intensity});
    }
    if (sm.cloud.empty()) continue;
    sm.bev = project_bev(sm.cloud, cfg, mode, Modality::lidar);
    submaps.push_back(std::move(sm));
  }
  return submaps;
}

/// Uniformly pick a pool entry whose pose lies within tau_p of the anchor.
/// `PoseOf` maps a pool element to its Pose2.
template <typename Elem, typename PoseOf>
const Elem& sample_positive(const Pose2& anchor_pose,
                            const std::vector<Elem>& pool, PoseOf pose_of,
                            const TripletConfig& cfg, std::mt19937_64& rng,
                            const Elem* exclude = nullptr) {
  std::vector<const Elem*> eligible;
  for (const auto& e : pool) {
    if (exclude && &e == exclude) continue;
    if (translation_distance(anchor_pose, pose_of(e)) <= cfg.tau_p)
      eligible.push_back(&e);
  }
  if (eligible.empty()) throw NoPositive();
  std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
  return *eligible[pick(rng)];
}

/// Hardest in-batch negative: argmin descriptor L2 distance among samples
/// with pose distance > tau_n from the anchor.
inline std::size_t mine_hardest_negative(const std::vector<float>& anchor_desc,
                                         const Pose2& anchor_pose,
                                         const std::vector<std::vector<float>>& batch_descs,
                                         const std::vector<Pose2>& batch_poses,
                                         const TripletConfig& cfg) {
  if (batch_descs.size() != batch_poses.size())
    throw std::invalid_argument("descriptor/pose count mismatch");
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_idx = batch_descs.size();
  for (std::size_t i = 0; i < batch_descs.size(); ++i) {
    if (translation_distance(anchor_pose, batch_poses[i]) <= cfg.tau_n) continue;
    const auto& d = batch_descs[i];
    if (d.size() != anchor_desc.size())
      throw std::invalid_argument("descriptor length mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < d.size(); ++k) {
      const double diff = static_cast<double>(anchor_desc[k]) - d[k];
      s += diff * diff;
    }
    if (s < best) {
      best = s;
      best_idx = i;
    }
  }
  if (best_idx == batch_descs.size()) throw NoNegative();
  return best_idx;
}

/// Uniform perturbation: delta-theta in +-max_rot, delta-x/y in +-max_trans,
/// composed onto the ground-truth pose.
inline Pose2 perturb_pose(const Pose2& gt, const AugmentSpec& spec,
                          std::mt19937_64& rng) {
  spec.check();
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  const double dx = spec.max_trans * unif(rng);
  const double dy = spec.max_trans * unif(rng);
  const double dt = spec.max_rot_deg * kPi / 180.0 * unif(rng);
  return compose(gt, Pose2(dx, dy, dt));
}

}  // namespace ralf
