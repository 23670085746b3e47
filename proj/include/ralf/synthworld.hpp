#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "ralf/geometry.hpp"

namespace ralf::synth {

struct Segment {
  double x0, y0, x1, y1;
};

struct World {
  double extent = 0.0;  // square side, centered at the origin
  std::vector<Segment> walls;
  std::vector<Point2> poles;
};

struct WorldSpec {
  std::uint64_t seed = 0;
  double extent = 200.0;
  int n_walls = 40;
  int n_poles = 60;
  std::vector<Pose2> trajectory;
};

struct SensorNoise {
  double lidar_dropout = 0.0;   // per-beam drop probability
  double lidar_jitter = 0.0;    // range jitter sigma, meters
  double radar_speckle = 0.0;   // multiplicative sigma
  double radar_blur = 0.0;      // polar-image gaussian sigma, pixels
  double radar_ghost_prob = 0.0;
};

constexpr int kLidarBeams = 900;
constexpr double kMaxRange = 60.0;
constexpr double kPoleRadius = 0.2;

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t pose_hash(std::uint64_t seed, const Pose2& p) {
  std::uint64_t h = mix64(seed);
  auto bits = [](double d) {
    std::uint64_t b;
    std::memcpy(&b, &d, 8);
    return b;
  };
  h = mix64(h ^ bits(p.x));
  h = mix64(h ^ bits(p.y));
  h = mix64(h ^ bits(p.theta));
  return h;
}

/// Distance along a ray (origin o, unit dir d) to a segment, if any.
inline std::optional<double> ray_segment(double ox, double oy, double dx,
                                         double dy, const Segment& s) {
  const double ex = s.x1 - s.x0, ey = s.y1 - s.y0;
  const double denom = dx * ey - dy * ex;
  if (std::abs(denom) < 1e-12) return std::nullopt;
  const double qx = s.x0 - ox, qy = s.y0 - oy;
  const double t = (qx * ey - qy * ex) / denom;   // along ray
  const double u = (qx * dy - qy * dx) / denom;   // along segment
  if (t <= 1e-9 || u < 0.0 || u > 1.0) return std::nullopt;
  return t;
}

/// Distance along a ray to a circle of radius r at (cx, cy), if any.
inline std::optional<double> ray_circle(double ox, double oy, double dx,
                                        double dy, double cx, double cy,
                                        double r) {
  const double fx = ox - cx, fy = oy - cy;
  const double b = fx * dx + fy * dy;
  const double c = fx * fx + fy * fy - r * r;
  const double disc = b * b - c;
  if (disc < 0.0) return std::nullopt;
  const double t = -b - std::sqrt(disc);
  if (t <= 1e-9) return std::nullopt;
  return t;
}

inline double cast_ray(const World& world, double ox, double oy, double angle) {
  const double dx = std::cos(angle), dy = std::sin(angle);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : world.walls)
    if (auto t = ray_segment(ox, oy, dx, dy, s))
      best = std::min(best, *t);
  for (const auto& p : world.poles)
    if (auto t = ray_circle(ox, oy, dx, dy, p.x, p.y, kPoleRadius))
      best = std::min(best, *t);
  return best;
}

inline void gaussian_blur_polar(std::vector<float>& img, int n_az, int n_rng,
                                double sigma) {
  if (sigma <= 0.0) return;
  const int rad = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kern(2 * rad + 1);
  double ksum = 0.0;
  for (int i = -rad; i <= rad; ++i) {
    kern[i + rad] = std::exp(-0.5 * i * i / (sigma * sigma));
    ksum += kern[i + rad];
  }
  for (auto& k : kern) k /= ksum;
  std::vector<float> tmp(img.size());
  // along range
  for (int a = 0; a < n_az; ++a)
    for (int r = 0; r < n_rng; ++r) {
      double acc = 0.0;
      for (int i = -rad; i <= rad; ++i) {
        const int rr = r + i;
        if (rr < 0 || rr >= n_rng) continue;
        acc += kern[i + rad] * img[static_cast<std::size_t>(a) * n_rng + rr];
      }
      tmp[static_cast<std::size_t>(a) * n_rng + r] = static_cast<float>(acc);
    }
  // along azimuth (wraps)
  for (int a = 0; a < n_az; ++a)
    for (int r = 0; r < n_rng; ++r) {
      double acc = 0.0;
      for (int i = -rad; i <= rad; ++i) {
        const int aa = (a + i % n_az + n_az) % n_az;
        acc += kern[i + rad] * tmp[static_cast<std::size_t>(aa) * n_rng + r];
      }
      img[static_cast<std::size_t>(a) * n_rng + r] = static_cast<float>(acc);
    }
}

}  // namespace detail

inline World generate_world(const WorldSpec& spec) {
  if (spec.extent <= 0.0) throw std::invalid_argument("extent must be positive");
  if (spec.n_walls + spec.n_poles == 0)
    throw std::invalid_argument("world needs at least one landmark");
  std::mt19937_64 rng(detail::mix64(spec.seed));
  std::uniform_real_distribution<double> pos(-spec.extent / 2.0, spec.extent / 2.0);
  std::uniform_real_distribution<double> ang(0.0, kPi);
  std::uniform_real_distribution<double> len(5.0, 20.0);
  World world;
  world.extent = spec.extent;
  for (int i = 0; i < spec.n_walls; ++i) {
    const double cx = pos(rng), cy = pos(rng);
    const double a = ang(rng), half = 0.5 * len(rng);
    world.walls.push_back({cx - half * std::cos(a), cy - half * std::sin(a),
                           cx + half * std::cos(a), cy + half * std::sin(a)});
  }
  for (int i = 0; i < spec.n_poles; ++i)
    world.poles.push_back({pos(rng), pos(rng), 1.0f});
  return world;
}

/// Smooth random walk with bounded curvature, 1 m steps, steered back toward
/// the center when approaching the boundary.
inline std::vector<Pose2> make_trajectory(std::uint64_t seed, double extent,
                                          int n_frames, double step = 1.0,
                                          double max_turn = 0.12) {
  std::mt19937_64 rng(detail::mix64(seed ^ 0x7261ULL));
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  const double margin = std::min(10.0, extent / 4.0);
  const double h = extent / 2.0 - margin;
  double x = 0.25 * extent * unif(rng);
  double y = 0.25 * extent * unif(rng);
  double heading = kPi * unif(rng);
  std::vector<Pose2> traj;
  traj.reserve(static_cast<std::size_t>(std::max(0, n_frames)));
  for (int i = 0; i < n_frames; ++i) {
    traj.emplace_back(x, y, heading);
    heading = wrap_angle(heading + max_turn * unif(rng));
    double nx = x + step * std::cos(heading);
    double ny = y + step * std::sin(heading);
    if (std::abs(nx) > h || std::abs(ny) > h) {
      // turn toward the center until the step stays inside
      const double to_center = std::atan2(-y, -x);
      heading = to_center + 0.3 * unif(rng);
      nx = x + step * std::cos(heading);
      ny = y + step * std::sin(heading);
    }
    x = nx;
    y = ny;
  }
  return traj;
}

inline void check_pose_inside(const World& world, const Pose2& pose) {
  const double h = world.extent / 2.0;
  if (std::abs(pose.x) > h || std::abs(pose.y) > h)
    throw std::invalid_argument("pose outside world extent");
}

/// 360 degree 2D ray casting; returns hit points in the sensor frame.
inline PointCloud2 render_lidar(const World& world, const Pose2& pose,
                                const SensorNoise& noise,
                                std::uint64_t seed = 0, int beams = kLidarBeams,
                                double max_range = kMaxRange) {
  check_pose_inside(world, pose);
  std::mt19937_64 rng(detail::pose_hash(seed ^ 0x11daULL, pose));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  PointCloud2 cloud;
  for (int b = 0; b < beams; ++b) {
    const double local = 2.0 * kPi * b / beams;
    double r = detail::cast_ray(world, pose.x, pose.y, pose.theta + local);
    const double drop = unif(rng);
    const double jit = gauss(rng);
    if (r > max_range || !std::isfinite(r)) continue;
    if (drop < noise.lidar_dropout) continue;
    if (noise.lidar_jitter > 0.0) r = std::max(0.1, r + noise.lidar_jitter * jit);
    cloud.points.push_back({r * std::cos(local), r * std::sin(local), 1.0f});
  }
  return cloud;
}

/// Polar power render of the same geometry, with speckle, ghosts and azimuth
/// blur, resampled bilinearly to a cartesian BEV.
inline BevImage render_radar(const World& world, const Pose2& pose,
                             const SensorNoise& noise, const BevConfig& cfg,
                             std::uint64_t seed = 0, int az_bins = kLidarBeams,
                             double max_range = kMaxRange) {
  check_pose_inside(world, pose);
  cfg.check();
  std::mt19937_64 rng(detail::pose_hash(seed ^ 0x4ada4ULL, pose));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double rng_res = cfg.resolution / 2.0;
  const int n_rng = static_cast<int>(std::ceil(max_range / rng_res));
  std::vector<float> polar(static_cast<std::size_t>(az_bins) * n_rng, 0.0f);

  for (int a = 0; a < az_bins; ++a) {
    const double local = 2.0 * kPi * a / az_bins;
    const double r = detail::cast_ray(world, pose.x, pose.y, pose.theta + local);
    if (r <= max_range && std::isfinite(r)) {
      const int bin = std::min(n_rng - 1, static_cast<int>(r / rng_res));
      polar[static_cast<std::size_t>(a) * n_rng + bin] = 1.0f;
    }
    if (unif(rng) < noise.radar_ghost_prob) {
      const int bin = static_cast<int>(unif(rng) * n_rng) % n_rng;
      polar[static_cast<std::size_t>(a) * n_rng + bin] =
          std::max(polar[static_cast<std::size_t>(a) * n_rng + bin], 0.6f);
    }
  }
  if (noise.radar_speckle > 0.0) {
    for (auto& v : polar)
      if (v > 0.0f)
        v = std::max(0.0f, v * static_cast<float>(
                               1.0 + noise.radar_speckle * gauss(rng)));
  }
  detail::gaussian_blur_polar(polar, az_bins, n_rng, noise.radar_blur);

  BevImage img(cfg, Modality::radar);
  float vmax = 0.0f;
  for (int u = 0; u < cfg.height; ++u) {
    for (int v = 0; v < cfg.width; ++v) {
      auto [px, py] = pixel_to_world(u + 0.5, v + 0.5, cfg);
      const double r = std::hypot(px, py);
      if (r >= max_range || r < 1e-9) continue;
      double phi = std::atan2(py, px);
      if (phi < 0.0) phi += 2.0 * kPi;
      const double af = phi / (2.0 * kPi) * az_bins;
      const double rf = r / rng_res - 0.5;
      const int a0 = static_cast<int>(std::floor(af));
      const int r0 = static_cast<int>(std::floor(rf));
      const double wa = af - a0, wr = rf - r0;
      double acc = 0.0;
      for (int da = 0; da <= 1; ++da) {
        const int a = (a0 + da) % az_bins;
        for (int dr = 0; dr <= 1; ++dr) {
          const int rr = r0 + dr;
          if (rr < 0 || rr >= n_rng) continue;
          const double w = (da ? wa : 1.0 - wa) * (dr ? wr : 1.0 - wr);
          acc += w * polar[static_cast<std::size_t>(a) * n_rng + rr];
        }
      }
      img.at(u, v) = static_cast<float>(acc);
      vmax = std::max(vmax, img.at(u, v));
    }
  }
  if (vmax > 0.0f)
    for (auto& v : img.pixels) v /= vmax;
  return img;
}

}  // namespace ralf::synth
