#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "ralf/geometry.hpp"

namespace ralf::io {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Point cloud container: little-endian, magic "RLFC", u32 count,
// count x (f32 x, f32 y, f32 z, f32 intensity).
// ---------------------------------------------------------------------------

// Height band (relative to sensor) kept when flattening clouds to 2D.
constexpr float kZBandMin = -1.0f;
constexpr float kZBandMax = 4.0f;

inline void write_rlfc(const std::filesystem::path& path,
                       const PointCloud2& cloud, float z = 0.0f) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path.string());
  f.write("RLFC", 4);
  const std::uint32_t n = static_cast<std::uint32_t>(cloud.points.size());
  f.write(reinterpret_cast<const char*>(&n), 4);
  for (const auto& p : cloud.points) {
    const float rec[4] = {static_cast<float>(p.x), static_cast<float>(p.y), z,
                          p.intensity};
    f.write(reinterpret_cast<const char*>(rec), 16);
  }
  if (!f) throw IoError("write failed: " + path.string());
}

inline PointCloud2 read_rlfc(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "RLFC", 4) != 0)
    throw IoError("bad magic in " + path.string());
  std::uint32_t n = 0;
  f.read(reinterpret_cast<char*>(&n), 4);
  PointCloud2 cloud;
  cloud.points.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    float rec[4];
    f.read(reinterpret_cast<char*>(rec), 16);
    if (!f) throw IoError("truncated cloud: " + path.string());
    if (rec[2] < kZBandMin || rec[2] > kZBandMax) continue;
    cloud.points.push_back({rec[0], rec[1], rec[3]});
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// 16-bit binary PGM for BEV rasters.
// ---------------------------------------------------------------------------

inline void write_pgm16(const std::filesystem::path& path, const BevImage& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path.string());
  f << "P5\n" << img.config.width << " " << img.config.height << "\n65535\n";
  std::vector<unsigned char> buf(img.pixels.size() * 2);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    float v = img.pixels[i];
    v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    const std::uint16_t q = static_cast<std::uint16_t>(v * 65535.0f + 0.5f);
    buf[2 * i] = static_cast<unsigned char>(q >> 8);  // big-endian per PGM
    buf[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
  }
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline BevImage read_pgm16(const std::filesystem::path& path,
                           double resolution, Modality modality) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 65535)
    throw IoError("expected 16-bit P5 PGM: " + path.string());
  f.get();  // single whitespace after header
  BevConfig cfg{h, w, resolution};
  BevImage img(cfg, modality);
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 2);
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("truncated PGM: " + path.string());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const std::uint16_t q =
        static_cast<std::uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]);
    img.pixels[i] = static_cast<float>(q) / 65535.0f;
  }
  return img;
}

// ---------------------------------------------------------------------------
// poses.csv: header "frame_id,x,y,theta".
// ---------------------------------------------------------------------------

struct PoseRecord {
  int frame_id = 0;
  Pose2 pose;
};

inline void write_poses_csv(const std::filesystem::path& path,
                            const std::vector<PoseRecord>& records) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for write: " + path.string());
  f << "frame_id,x,y,theta\n";
  f.precision(17);
  for (const auto& r : records)
    f << r.frame_id << "," << r.pose.x << "," << r.pose.y << "," << r.pose.theta
      << "\n";
}

inline std::vector<PoseRecord> read_poses_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path.string());
  std::string line;
  if (!std::getline(f, line)) throw IoError("empty poses file: " + path.string());
  std::vector<PoseRecord> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    PoseRecord r;
    double x, y, t;
    if (!(ss >> r.frame_id >> x >> y >> t))
      throw IoError("bad poses row: " + line);
    r.pose = Pose2(x, y, t);
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Minimal 8-bit RGB PNG writer (zlib deflate).
// ---------------------------------------------------------------------------

namespace detail {
inline void png_chunk(std::ofstream& f, const char type[4],
                      const std::vector<unsigned char>& data) {
  auto be32 = [](std::uint32_t v) {
    return std::array<unsigned char, 4>{
        static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  };
  auto len = be32(static_cast<std::uint32_t>(data.size()));
  f.write(reinterpret_cast<const char*>(len.data()), 4);
  std::vector<unsigned char> body(type, type + 4);
  body.insert(body.end(), data.begin(), data.end());
  f.write(reinterpret_cast<const char*>(body.data()),
          static_cast<std::streamsize>(body.size()));
  const std::uint32_t crc = static_cast<std::uint32_t>(
      ::crc32(0L, body.data(), static_cast<uInt>(body.size())));
  auto c = be32(crc);
  f.write(reinterpret_cast<const char*>(c.data()), 4);
}
}  // namespace detail

/// rgb: row-major H*W*3 bytes.
inline void write_png_rgb(const std::filesystem::path& path, int width,
                          int height, const std::vector<unsigned char>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3)
    throw IoError("rgb buffer size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path.string());
  static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  f.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<unsigned char> ihdr(13);
  auto put32 = [&](std::size_t off, std::uint32_t v) {
    ihdr[off] = static_cast<unsigned char>(v >> 24);
    ihdr[off + 1] = static_cast<unsigned char>(v >> 16);
    ihdr[off + 2] = static_cast<unsigned char>(v >> 8);
    ihdr[off + 3] = static_cast<unsigned char>(v);
  };
  put32(0, static_cast<std::uint32_t>(width));
  put32(4, static_cast<std::uint32_t>(height));
  ihdr[8] = 8;   // bit depth
  ihdr[9] = 2;   // color type RGB
  ihdr[10] = ihdr[11] = ihdr[12] = 0;
  detail::png_chunk(f, "IHDR", ihdr);

  std::vector<unsigned char> raw;
  raw.reserve((static_cast<std::size_t>(width) * 3 + 1) * height);
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter none
    const unsigned char* row = rgb.data() + static_cast<std::size_t>(y) * width * 3;
    raw.insert(raw.end(), row, row + static_cast<std::size_t>(width) * 3);
  }
  uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> comp(bound);
  if (::compress2(comp.data(), &bound, raw.data(), static_cast<uLong>(raw.size()),
                  6) != Z_OK)
    throw IoError("deflate failed");
  comp.resize(bound);
  detail::png_chunk(f, "IDAT", comp);
  detail::png_chunk(f, "IEND", {});
}

// ---------------------------------------------------------------------------
// Named-tensor archive: magic "RLFW", u32 manifest length, manifest JSON,
// u32 tensor count, then per tensor: u32 name length, name, u32 rank,
// u32 dims..., f32 data.
// ---------------------------------------------------------------------------

struct TensorBlob {
  std::vector<int> shape;
  std::vector<float> data;
};

inline void write_archive(const std::filesystem::path& path,
                          const std::string& manifest_json,
                          const std::map<std::string, TensorBlob>& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path.string());
  auto put_u32 = [&](std::uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
  };
  f.write("RLFW", 4);
  put_u32(static_cast<std::uint32_t>(manifest_json.size()));
  f.write(manifest_json.data(), static_cast<std::streamsize>(manifest_json.size()));
  put_u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, blob] : tensors) {
    put_u32(static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(static_cast<std::uint32_t>(blob.shape.size()));
    for (int d : blob.shape) put_u32(static_cast<std::uint32_t>(d));
    f.write(reinterpret_cast<const char*>(blob.data.data()),
            static_cast<std::streamsize>(blob.data.size() * 4));
  }
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::pair<std::string, std::map<std::string, TensorBlob>> read_archive(
    const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  auto get_u32 = [&]() {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw IoError("truncated archive: " + path.string());
    return v;
  };
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "RLFW", 4) != 0)
    throw IoError("bad archive magic: " + path.string());
  std::string manifest(get_u32(), '\0');
  f.read(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  const std::uint32_t count = get_u32();
  std::map<std::string, TensorBlob> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get_u32(), '\0');
    f.read(name.data(), static_cast<std::streamsize>(name.size()));
    TensorBlob blob;
    const std::uint32_t rank = get_u32();
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      blob.shape.push_back(static_cast<int>(get_u32()));
      numel *= static_cast<std::size_t>(blob.shape.back());
    }
    blob.data.resize(numel);
    f.read(reinterpret_cast<char*>(blob.data.data()),
           static_cast<std::streamsize>(numel * 4));
    if (!f) throw IoError("truncated archive: " + path.string());
    tensors.emplace(std::move(name), std::move(blob));
  }
  return {manifest, tensors};
}

}  // namespace ralf::io
