#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ralf/flow_head.hpp"
#include "ralf/io.hpp"

namespace ralf::viz {

namespace detail {
inline unsigned char to_u8(double v) {
  return static_cast<unsigned char>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
}

inline void hsv_to_rgb(double h, double s, double v, unsigned char* out) {
  const double c = v * s;
  const double hp = h / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  out[0] = to_u8(r + m);
  out[1] = to_u8(g + m);
  out[2] = to_u8(b + m);
}
}  // namespace detail

/// Direction-as-hue, magnitude-as-saturation flow rendering. Invalid pixels
/// are black.
inline std::vector<unsigned char> flow_to_rgb(const FlowMap& flow) {
  const int H = flow.config.height, W = flow.config.width;
  double max_mag = 1e-9;
  for (std::size_t i = 0; i < flow.u_flow.size(); ++i)
    if (flow.valid[i])
      max_mag = std::max(max_mag, std::hypot(static_cast<double>(flow.u_flow[i]),
                                             static_cast<double>(flow.v_flow[i])));
  std::vector<unsigned char> rgb(static_cast<std::size_t>(H) * W * 3, 0);
  for (std::size_t i = 0; i < flow.u_flow.size(); ++i) {
    if (!flow.valid[i]) continue;
    const double u = flow.u_flow[i], v = flow.v_flow[i];
    double hue = std::atan2(v, u) * 180.0 / kPi;
    if (hue < 0.0) hue += 360.0;
    detail::hsv_to_rgb(hue, std::hypot(u, v) / max_mag, 1.0, &rgb[3 * i]);
  }
  return rgb;
}

inline void write_flow_png(const std::filesystem::path& path, const FlowMap& flow) {
  io::write_png_rgb(path, flow.config.width, flow.config.height,
                    flow_to_rgb(flow));
}

/// Radar in red, LiDAR in green; alignment shows as yellow.
inline void write_overlay_png(const std::filesystem::path& path,
                              const BevImage& radar, const BevImage& lidar) {
  if (radar.pixels.size() != lidar.pixels.size())
    throw std::invalid_argument("overlay size mismatch");
  const int H = radar.config.height, W = radar.config.width;
  std::vector<unsigned char> rgb(static_cast<std::size_t>(H) * W * 3, 0);
  for (std::size_t i = 0; i < radar.pixels.size(); ++i) {
    rgb[3 * i] = detail::to_u8(radar.pixels[i]);
    rgb[3 * i + 1] = detail::to_u8(lidar.pixels[i]);
  }
  io::write_png_rgb(path, W, H, rgb);
}

/// Simple recall@k curve: axes plus a polyline over [0,1].
inline void write_recall_curve_png(const std::filesystem::path& path,
                                   const std::vector<int>& k_values,
                                   const std::vector<double>& recalls) {
  if (k_values.empty() || k_values.size() != recalls.size())
    throw std::invalid_argument("bad recall curve data");
  const int W = 480, H = 360, ml = 40, mb = 30, mt = 15, mr = 15;
  std::vector<unsigned char> rgb(static_cast<std::size_t>(W) * H * 3, 255);
  auto put = [&](int x, int y, unsigned char r, unsigned char g, unsigned char b) {
    if (x < 0 || x >= W || y < 0 || y >= H) return;
    const std::size_t i = (static_cast<std::size_t>(y) * W + x) * 3;
    rgb[i] = r; rgb[i + 1] = g; rgb[i + 2] = b;
  };
  // axes
  for (int x = ml; x < W - mr; ++x) put(x, H - mb, 0, 0, 0);
  for (int y = mt; y < H - mb; ++y) put(ml, y, 0, 0, 0);
  // horizontal gridlines every 0.25
  for (int g = 1; g <= 4; ++g) {
    const int y = H - mb - g * (H - mb - mt) / 4;
    for (int x = ml; x < W - mr; x += 4) put(x, y, 200, 200, 200);
  }
  const int k_max = *std::max_element(k_values.begin(), k_values.end());
  auto px = [&](int k) {
    return ml + static_cast<int>((W - ml - mr - 1) *
                                 (static_cast<double>(k) / std::max(1, k_max)));
  };
  auto py = [&](double r) {
    return H - mb - static_cast<int>((H - mb - mt - 1) * std::clamp(r, 0.0, 1.0));
  };
  auto line = [&](int x0, int y0, int x1, int y1) {
    const int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0)) + 1;
    for (int s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      put(static_cast<int>(std::lround(x0 + t * (x1 - x0))),
          static_cast<int>(std::lround(y0 + t * (y1 - y0))), 30, 60, 200);
    }
  };
  for (std::size_t i = 0; i + 1 < k_values.size(); ++i)
    line(px(k_values[i]), py(recalls[i]), px(k_values[i + 1]), py(recalls[i + 1]));
  for (std::size_t i = 0; i < k_values.size(); ++i) {
    const int x = px(k_values[i]), y = py(recalls[i]);
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx) put(x + dx, y + dy, 200, 40, 40);
  }
  io::write_png_rgb(path, W, H, rgb);
}

}  // namespace ralf::viz
