#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ralf/dataset.hpp"
#include "ralf/encoders.hpp"
#include "ralf/io.hpp"
#include "ralf/nn/layers.hpp"

namespace ralf {

struct EmptyDatabase : std::runtime_error {
  EmptyDatabase() : std::runtime_error("descriptor database is empty") {}
};

/// L2-normalized fixed-length embedding, comparable across modalities.
struct GlobalDescriptor {
  std::vector<float> v;

  double norm() const {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * x;
    return std::sqrt(s);
  }
};

inline double descriptor_distance(const GlobalDescriptor& a,
                                  const GlobalDescriptor& b) {
  if (a.v.size() != b.v.size())
    throw std::invalid_argument("descriptor length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    const double d = static_cast<double>(a.v[i]) - b.v[i];
    s += d * d;
  }
  return std::sqrt(s);
}

/// Eq.-style margin triplet on already-computed descriptors.
inline double triplet_loss(const GlobalDescriptor& a, const GlobalDescriptor& p,
                           const GlobalDescriptor& n, const TripletConfig& cfg) {
  return std::max(descriptor_distance(a, p) - descriptor_distance(a, n) +
                      cfg.margin,
                  0.0);
}

// ---------------------------------------------------------------------------
// Descriptor head: four stride-2 convolutions with batch norm + ReLU,
// global average pooling, then L2 normalization. Shared across modalities.
// ---------------------------------------------------------------------------

template <typename T>
class DescriptorHead {
 public:
  DescriptorHead() = default;
  DescriptorHead(const EncoderConfig& cfg, std::mt19937_64& rng) {
    const bool full = cfg.size == EncoderSize::full;
    const std::array<int, 4> widths =
        full ? std::array<int, 4>{256, 128, 128, 128}
             : std::array<int, 4>{128, 64, 64, 64};
    int in_ch = cfg.feature_dim;
    for (int i = 0; i < 4; ++i) {
      conv_[i] = nn::Conv2dLayer<T>(in_ch, widths[static_cast<std::size_t>(i)], 3, 2, 1, rng);
      norm_[i] = nn::BatchNorm2dLayer<T>(widths[static_cast<std::size_t>(i)]);
      in_ch = widths[static_cast<std::size_t>(i)];
    }
    out_dim_ = in_ch;
  }

  int descriptor_dim() const { return out_dim_; }

  /// (N,D,h,w) features -> (N,K) unit-norm descriptors.
  nn::Tensor<T> forward(const nn::Tensor<T>& features, bool training) const {
    auto y = features;
    for (int i = 0; i < 4; ++i)
      y = relu(norm_[i].forward(conv_[i].forward(y), training));
    return l2_normalize_rows(global_avg_pool(y));
  }

  void collect(const std::string& prefix, nn::ParamMap<T>& pm) const {
    for (int i = 0; i < 4; ++i) {
      conv_[i].collect(prefix + ".conv" + std::to_string(i), pm);
      norm_[i].collect(prefix + ".norm" + std::to_string(i), pm);
    }
  }

 private:
  nn::Conv2dLayer<T> conv_[4];
  nn::BatchNorm2dLayer<T> norm_[4];
  int out_dim_ = 0;
};

// ---------------------------------------------------------------------------
// Eight-term place recognition loss.
// ---------------------------------------------------------------------------

/// Modality combination of (anchor, positive, negative).
struct TripletCombo {
  Modality a, p, n;
};

inline std::array<TripletCombo, 8> all_triplet_combos() {
  using M = Modality;
  return {{{M::radar, M::radar, M::radar},
           {M::radar, M::lidar, M::lidar},
           {M::radar, M::lidar, M::radar},
           {M::radar, M::radar, M::lidar},
           {M::lidar, M::lidar, M::lidar},
           {M::lidar, M::radar, M::radar},
           {M::lidar, M::radar, M::lidar},
           {M::lidar, M::lidar, M::radar}}};
}

namespace detail {
template <typename T>
std::vector<std::vector<float>> rows_of(const nn::Tensor<T>& m) {
  const int N = m.dim(0), K = m.dim(1);
  std::vector<std::vector<float>> out(static_cast<std::size_t>(N));
  for (int n = 0; n < N; ++n) {
    out[static_cast<std::size_t>(n)].resize(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k)
      out[static_cast<std::size_t>(n)][static_cast<std::size_t>(k)] =
          static_cast<float>(m.data()[static_cast<std::size_t>(n) * K + k]);
  }
  return out;
}
}  // namespace detail

/// One combo term of the place recognition loss, averaged over anchors.
/// `radar_desc` / `lidar_desc` are (S,K) descriptor matrices over the same S
/// scenes; anchors[i] pairs with positives[i]. Negatives are mined online
/// (hardest in batch beyond tau_n), with the anchor scene excluded.
template <typename T>
nn::Tensor<T> pr_loss_term(const nn::Tensor<T>& radar_desc,
                           const nn::Tensor<T>& lidar_desc,
                           const std::vector<Pose2>& poses,
                           const std::vector<int>& anchors,
                           const std::vector<int>& positives,
                           const TripletConfig& cfg, const TripletCombo& combo) {
  cfg.check();
  if (anchors.size() != positives.size() || anchors.empty())
    throw std::invalid_argument("anchor/positive mismatch");
  const auto& a_desc = combo.a == Modality::radar ? radar_desc : lidar_desc;
  const auto& p_desc = combo.p == Modality::radar ? radar_desc : lidar_desc;
  const auto& n_desc = combo.n == Modality::radar ? radar_desc : lidar_desc;
  const auto n_rows = detail::rows_of(n_desc);
  const auto a_rows = detail::rows_of(a_desc);

  nn::Tensor<T> acc;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const int ai = anchors[i], pi = positives[i];
    const std::size_t ni = mine_hardest_negative(
        a_rows[static_cast<std::size_t>(ai)], poses[static_cast<std::size_t>(ai)],
        n_rows, poses, cfg);
    auto d_ap = row_l2_distance(a_desc, ai, p_desc, pi);
    auto d_an = row_l2_distance(a_desc, ai, n_desc, static_cast<int>(ni));
    auto term = relu(add_scalar(sub(d_ap, d_an), static_cast<T>(cfg.margin)));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return scale(acc, static_cast<T>(1.0 / static_cast<double>(anchors.size())));
}

/// Sum of the eight modality-combination triplet terms.
template <typename T>
nn::Tensor<T> pr_loss(const nn::Tensor<T>& radar_desc,
                      const nn::Tensor<T>& lidar_desc,
                      const std::vector<Pose2>& poses,
                      const std::vector<int>& anchors,
                      const std::vector<int>& positives,
                      const TripletConfig& cfg) {
  nn::Tensor<T> total;
  for (const auto& combo : all_triplet_combos()) {
    auto term = pr_loss_term(radar_desc, lidar_desc, poses, anchors, positives,
                             cfg, combo);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Submap descriptor database
// ---------------------------------------------------------------------------

struct DatabaseRecord {
  int submap_id = 0;
  Pose2 pose;
  GlobalDescriptor descriptor;
};

class SubmapDatabase {
 public:
  void add(DatabaseRecord rec) {
    for (const auto& r : records_)
      if (r.submap_id == rec.submap_id)
        throw std::invalid_argument("duplicate submap id");
    records_.push_back(std::move(rec));
  }

  const std::vector<DatabaseRecord>& records() const { return records_; }
  bool empty() const { return records_.empty(); }
  std::size_t size() const { return records_.size(); }

  /// Nearest record by descriptor L2 distance; ties break to the lowest id.
  const DatabaseRecord& query(const GlobalDescriptor& q) const {
    if (records_.empty()) throw EmptyDatabase();
    const DatabaseRecord* best = nullptr;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& r : records_) {
      const double d = descriptor_distance(q, r.descriptor);
      if (d < best_d || (d == best_d && best && r.submap_id < best->submap_id)) {
        best_d = d;
        best = &r;
      }
    }
    return *best;
  }

  /// k nearest records, ascending distance (ties by id).
  std::vector<const DatabaseRecord*> query_k(const GlobalDescriptor& q,
                                             std::size_t k) const {
    if (records_.empty()) throw EmptyDatabase();
    std::vector<std::pair<double, const DatabaseRecord*>> scored;
    scored.reserve(records_.size());
    for (const auto& r : records_)
      scored.emplace_back(descriptor_distance(q, r.descriptor), &r);
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first < b.first;
      return a.second->submap_id < b.second->submap_id;
    });
    std::vector<const DatabaseRecord*> out;
    for (std::size_t i = 0; i < std::min(k, scored.size()); ++i)
      out.push_back(scored[i].second);
    return out;
  }

  /// Layout: manifest.json + descriptors.bin (f32 row-major) + poses.csv.
  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    const int K = records_.empty() ? 0 : static_cast<int>(records_[0].descriptor.v.size());
    nlohmann::json manifest{{"format", "ralf-submap-db"},
                            {"count", records_.size()},
                            {"descriptor_dim", K}};
    std::ofstream mf(dir / "manifest.json");
    mf << manifest.dump(2) << "\n";

    std::ofstream df(dir / "descriptors.bin", std::ios::binary);
    std::vector<io::PoseRecord> poses;
    for (const auto& r : records_) {
      df.write(reinterpret_cast<const char*>(r.descriptor.v.data()),
               static_cast<std::streamsize>(r.descriptor.v.size() * 4));
      poses.push_back({r.submap_id, r.pose});
    }
    io::write_poses_csv(dir / "poses.csv", poses);
  }

  static SubmapDatabase load(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw io::IoError("missing manifest: " + dir.string());
    nlohmann::json manifest = nlohmann::json::parse(mf);
    const std::size_t count = manifest.at("count");
    const int K = manifest.at("descriptor_dim");
    auto poses = io::read_poses_csv(dir / "poses.csv");
    if (poses.size() != count) throw io::IoError("pose count mismatch");
    std::ifstream df(dir / "descriptors.bin", std::ios::binary);
    SubmapDatabase db;
    for (std::size_t i = 0; i < count; ++i) {
      DatabaseRecord rec;
      rec.submap_id = poses[i].frame_id;
      rec.pose = poses[i].pose;
      rec.descriptor.v.resize(static_cast<std::size_t>(K));
      df.read(reinterpret_cast<char*>(rec.descriptor.v.data()),
              static_cast<std::streamsize>(K) * 4);
      if (!df) throw io::IoError("truncated descriptors.bin");
      db.records_.push_back(std::move(rec));
    }
    return db;
  }

 private:
  std::vector<DatabaseRecord> records_;
};

}  // namespace ralf
