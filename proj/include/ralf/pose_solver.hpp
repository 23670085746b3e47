#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "ralf/flow_head.hpp"
#include "ralf/geometry.hpp"

namespace ralf {

struct InsufficientInliers : std::runtime_error {
  InsufficientInliers() : std::runtime_error("too few RANSAC inliers") {}
};

/// Pairs of (source in submap frame, target in radar frame), meters.
struct CorrespondenceSet {
  struct Pair {
    double sx, sy;  // source
    double tx, ty;  // target
  };
  std::vector<Pair> pairs;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

struct RansacConfig {
  double inlier_threshold = 0.75;  // meters (1.5 * default resolution)
  int max_iterations = 1000;
  int min_inliers = 10;
  std::uint64_t rng_seed = 0;
  double confidence = 0.999;  // adaptive early termination
};

/// One correspondence per non-zero, flow-valid pixel of the LiDAR BEV:
/// source is the metric pixel center, target follows the flow vector.
inline CorrespondenceSet flow_to_correspondences(const BevImage& lidar_bev,
                                                 const FlowMap& flow,
                                                 const BevConfig& cfg) {
  if (lidar_bev.config.height != cfg.height ||
      lidar_bev.config.width != cfg.width ||
      flow.config.height != cfg.height || flow.config.width != cfg.width)
    throw std::invalid_argument("flow/image/config dims disagree");
  CorrespondenceSet out;
  for (int u = 0; u < cfg.height; ++u) {
    for (int v = 0; v < cfg.width; ++v) {
      const std::size_t idx = flow.index(u, v);
      if (lidar_bev.at(u, v) <= 0.0f || !flow.valid[idx]) continue;
      auto [sx, sy] = pixel_to_world(u + 0.5, v + 0.5, cfg);
      auto [tx, ty] = pixel_to_world(u + 0.5 + flow.u_flow[idx],
                                     v + 0.5 + flow.v_flow[idx], cfg);
      out.pairs.push_back({sx, sy, tx, ty});
    }
  }
  return out;
}

/// Forward splat to rounded target pixels; collisions keep the max value.
inline BevImage warp_image(const BevImage& img, const FlowMap& flow) {
  if (img.config.height != flow.config.height ||
      img.config.width != flow.config.width)
    throw std::invalid_argument("warp dims disagree");
  BevImage out(img.config, img.modality);
  for (int u = 0; u < img.config.height; ++u) {
    for (int v = 0; v < img.config.width; ++v) {
      const float val = img.at(u, v);
      if (val <= 0.0f) continue;
      const std::size_t idx = flow.index(u, v);
      const int tu = static_cast<int>(std::lround(u + flow.u_flow[idx]));
      const int tv = static_cast<int>(std::lround(v + flow.v_flow[idx]));
      if (!out.inside(tu, tv)) continue;
      out.at(tu, tv) = std::max(out.at(tu, tv), val);
    }
  }
  return out;
}

namespace detail {

/// Closed-form least-squares rigid 2D fit over the given pair indices:
/// cross-covariance angle plus centroid alignment.
inline Pose2 fit_rigid(const CorrespondenceSet& c,
                       const std::vector<int>& idx) {
  double sx = 0, sy = 0, tx = 0, ty = 0;
  for (int i : idx) {
    sx += c.pairs[static_cast<std::size_t>(i)].sx;
    sy += c.pairs[static_cast<std::size_t>(i)].sy;
    tx += c.pairs[static_cast<std::size_t>(i)].tx;
    ty += c.pairs[static_cast<std::size_t>(i)].ty;
  }
  const double n = static_cast<double>(idx.size());
  sx /= n; sy /= n; tx /= n; ty /= n;
  double a = 0.0, b = 0.0;  // sum of dot and cross terms
  for (int i : idx) {
    const auto& p = c.pairs[static_cast<std::size_t>(i)];
    const double px = p.sx - sx, py = p.sy - sy;
    const double qx = p.tx - tx, qy = p.ty - ty;
    a += px * qx + py * qy;
    b += px * qy - py * qx;
  }
  const double theta = std::atan2(b, a);
  const double cth = std::cos(theta), sth = std::sin(theta);
  return Pose2(tx - (cth * sx - sth * sy), ty - (sth * sx + cth * sy), theta);
}

inline double sq_residual(const CorrespondenceSet::Pair& p, const Pose2& t,
                          double cth, double sth) {
  const double rx = cth * p.sx - sth * p.sy + t.x - p.tx;
  const double ry = sth * p.sx + cth * p.sy + t.y - p.ty;
  return rx * rx + ry * ry;
}

}  // namespace detail

/// RANSAC with a 2-point minimal rigid solver and a least-squares refit on
/// the best inlier set. Deterministic given cfg.rng_seed.
inline std::pair<Pose2, int> estimate_pose(const CorrespondenceSet& c,
                                           const RansacConfig& cfg) {
  if (c.pairs.size() < 2)
    throw std::invalid_argument("need at least 2 correspondences");
  std::mt19937_64 rng(cfg.rng_seed);
  std::uniform_int_distribution<std::size_t> pick(0, c.pairs.size() - 1);
  const double thr2 = cfg.inlier_threshold * cfg.inlier_threshold;

  int best_count = -1;
  Pose2 best_pose;
  int iters = cfg.max_iterations;
  for (int it = 0; it < iters; ++it) {
    const std::size_t i = pick(rng), j = pick(rng);
    if (i == j) continue;
    const auto& p0 = c.pairs[i];
    const auto& p1 = c.pairs[j];
    const double dsx = p1.sx - p0.sx, dsy = p1.sy - p0.sy;
    const double dtx = p1.tx - p0.tx, dty = p1.ty - p0.ty;
    if (dsx * dsx + dsy * dsy < 1e-18) continue;  // degenerate sample
    const double theta =
        std::atan2(dty, dtx) - std::atan2(dsy, dsx);
    const double cth = std::cos(theta), sth = std::sin(theta);
    // translation from the first pair
    const Pose2 hyp(p0.tx - (cth * p0.sx - sth * p0.sy),
                    p0.ty - (sth * p0.sx + cth * p0.sy), theta);
    int count = 0;
    for (const auto& p : c.pairs)
      if (detail::sq_residual(p, hyp, cth, sth) <= thr2) ++count;
    if (count > best_count) {
      best_count = count;
      best_pose = hyp;
      // standard adaptive termination
      const double w = static_cast<double>(count) / static_cast<double>(c.pairs.size());
      const double denom = std::log1p(-std::min(w * w, 1.0 - 1e-12));
      if (denom < 0.0) {
        const int needed = static_cast<int>(
            std::ceil(std::log1p(-cfg.confidence) / denom));
        iters = std::min(iters, std::max(it + 1, needed));
      }
    }
  }
  if (best_count < std::max(cfg.min_inliers, 2)) throw InsufficientInliers();

  // refit on the best hypothesis' inliers
  std::vector<int> inliers;
  {
    const double cth = std::cos(best_pose.theta), sth = std::sin(best_pose.theta);
    for (std::size_t i = 0; i < c.pairs.size(); ++i)
      if (detail::sq_residual(c.pairs[i], best_pose, cth, sth) <= thr2)
        inliers.push_back(static_cast<int>(i));
  }
  const Pose2 refined = detail::fit_rigid(c, inliers);
  {
    const double cth = std::cos(refined.theta), sth = std::sin(refined.theta);
    int count = 0;
    for (const auto& p : c.pairs)
      if (detail::sq_residual(p, refined, cth, sth) <= thr2) ++count;
    best_count = std::max(best_count, count);
  }
  return {refined, best_count};
}

}  // namespace ralf
