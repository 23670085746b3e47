#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

namespace ralf {

constexpr double kPi = 3.14159265358979323846;

/// Wrap an angle into (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

/// 3-DoF rigid transform (x, y, theta) in the map frame.
struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;  // radians, wrapped into (-pi, pi]

  Pose2() = default;
  Pose2(double x_, double y_, double t_) : x(x_), y(y_), theta(wrap_angle(t_)) {}

  static Pose2 identity() { return {}; }

  std::pair<double, double> apply(double px, double py) const {
    const double c = std::cos(theta), s = std::sin(theta);
    return {c * px - s * py + x, s * px + c * py + y};
  }
};

inline Pose2 compose(const Pose2& a, const Pose2& b) {
  const double c = std::cos(a.theta), s = std::sin(a.theta);
  return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y,
               a.theta + b.theta);
}

inline Pose2 inverse(const Pose2& p) {
  const double c = std::cos(p.theta), s = std::sin(p.theta);
  return Pose2(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.theta);
}

/// Relative transform taking frame `a` to frame `b`: inverse(a) * b.
inline Pose2 between(const Pose2& a, const Pose2& b) {
  return compose(inverse(a), b);
}

inline double translation_distance(const Pose2& a, const Pose2& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  float intensity = 1.0f;
};

/// Planar point cloud; may be empty.
struct PointCloud2 {
  std::vector<Point2> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

inline PointCloud2 transform_cloud(const Pose2& t, const PointCloud2& cloud) {
  PointCloud2 out;
  out.points.reserve(cloud.points.size());
  const double c = std::cos(t.theta), s = std::sin(t.theta);
  for (const auto& p : cloud.points) {
    out.points.push_back(
        {c * p.x - s * p.y + t.x, s * p.x + c * p.y + t.y, p.intensity});
  }
  return out;
}

enum class Modality { radar, lidar };

/// BEV raster geometry: H x W pixels at `resolution` meters/pixel,
/// sensor at image center, +x up (decreasing row), +y right.
struct BevConfig {
  int height = 256;
  int width = 256;
  double resolution = 0.5;

  bool valid() const {
    return height > 0 && width > 0 && height % 2 == 0 && width % 2 == 0 &&
           resolution > 0.0;
  }
  void check() const {
    if (!valid()) throw std::invalid_argument("invalid BevConfig");
  }
  /// Half-extent of the raster in meters (short side).
  double half_extent() const {
    return 0.5 * resolution * std::min(height, width);
  }
};

/// Continuous (row, col) pixel coordinates of a metric point.
inline std::pair<double, double> world_to_pixel(double x, double y,
                                                const BevConfig& cfg) {
  return {cfg.height / 2.0 - x / cfg.resolution,
          cfg.width / 2.0 + y / cfg.resolution};
}

inline std::pair<double, double> pixel_to_world(double u, double v,
                                                const BevConfig& cfg) {
  return {(cfg.height / 2.0 - u) * cfg.resolution,
          (v - cfg.width / 2.0) * cfg.resolution};
}

/// Single-channel H x W raster with values in [0,1].
struct BevImage {
  BevConfig config;
  Modality modality = Modality::lidar;
  std::vector<float> pixels;  // row-major H*W

  BevImage() = default;
  BevImage(const BevConfig& cfg, Modality m)
      : config(cfg), modality(m),
        pixels(static_cast<std::size_t>(cfg.height) * cfg.width, 0.0f) {
    cfg.check();
  }

  float& at(int u, int v) { return pixels[static_cast<std::size_t>(u) * config.width + v]; }
  float at(int u, int v) const { return pixels[static_cast<std::size_t>(u) * config.width + v]; }
  bool inside(int u, int v) const {
    return u >= 0 && u < config.height && v >= 0 && v < config.width;
  }
};

enum class BevMode { occupancy, log_count };

/// Rasterize a point cloud into a BEV image. Out-of-raster points are
/// dropped; sub-pixel positions are floored.
inline BevImage project_bev(const PointCloud2& cloud, const BevConfig& cfg,
                            BevMode mode = BevMode::occupancy,
                            Modality modality = Modality::lidar) {
  cfg.check();
  BevImage img(cfg, modality);
  std::vector<int> counts(img.pixels.size(), 0);
  int n_max = 0;
  for (const auto& p : cloud.points) {
    auto [u, v] = world_to_pixel(p.x, p.y, cfg);
    const int ui = static_cast<int>(std::floor(u));
    const int vi = static_cast<int>(std::floor(v));
    if (!img.inside(ui, vi)) continue;
    int& c = counts[static_cast<std::size_t>(ui) * cfg.width + vi];
    ++c;
    n_max = std::max(n_max, c);
  }
  if (n_max == 0) return img;
  if (mode == BevMode::occupancy) {
    for (std::size_t i = 0; i < counts.size(); ++i)
      img.pixels[i] = counts[i] > 0 ? 1.0f : 0.0f;
  } else {
    const double denom = std::log1p(static_cast<double>(n_max));
    for (std::size_t i = 0; i < counts.size(); ++i)
      img.pixels[i] = counts[i] > 0
                          ? static_cast<float>(std::log1p(static_cast<double>(counts[i])) / denom)
                          : 0.0f;
  }
  return img;
}

/// View the raster from a sensor displaced by `rel` (new frame relative to
/// the image's own frame): out(u,v) samples in(f_bev(rel * world(u,v)))
/// bilinearly; regions leaving the raster become zero.
inline BevImage resample_bev(const BevImage& img, const Pose2& rel) {
  const BevConfig& cfg = img.config;
  BevImage out(cfg, img.modality);
  for (int u = 0; u < cfg.height; ++u) {
    for (int v = 0; v < cfg.width; ++v) {
      auto [x, y] = pixel_to_world(u + 0.5, v + 0.5, cfg);
      auto [sx, sy] = rel.apply(x, y);
      auto [su, sv] = world_to_pixel(sx, sy, cfg);
      su -= 0.5;
      sv -= 0.5;
      const int u0 = static_cast<int>(std::floor(su));
      const int v0 = static_cast<int>(std::floor(sv));
      const double fu = su - u0, fv = sv - v0;
      double acc = 0.0;
      for (int du = 0; du <= 1; ++du)
        for (int dv = 0; dv <= 1; ++dv) {
          const int uu = u0 + du, vv = v0 + dv;
          if (!img.inside(uu, vv)) continue;
          acc += (du ? fu : 1.0 - fu) * (dv ? fv : 1.0 - fv) * img.at(uu, vv);
        }
      out.at(u, v) = static_cast<float>(acc);
    }
  }
  return out;
}

}  // namespace ralf
