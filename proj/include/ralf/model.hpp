#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ralf/encoders.hpp"
#include "ralf/flow_head.hpp"
#include "ralf/io.hpp"
#include "ralf/place_recognition.hpp"

namespace ralf {

/// Full network: per-modality feature encoders, LiDAR context encoder,
/// shared descriptor head, and the recurrent flow update block.
template <typename T>
class RalfModel {
 public:
  RalfModel() = default;
  RalfModel(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.check();
    std::mt19937_64 rng(seed ^ 0x6d6f64656cULL);
    fnet_radar_ = RaftEncoder<T>(cfg, cfg.feature_dim, nn::NormKind::instance, rng);
    fnet_lidar_ = RaftEncoder<T>(cfg, cfg.feature_dim, nn::NormKind::instance, rng);
    cnet_ = RaftEncoder<T>(cfg, cfg.hidden_dim() + cfg.context_dim(),
                           nn::NormKind::batch, rng);
    head_ = DescriptorHead<T>(cfg, rng);
    update_ = UpdateBlock<T>(cfg, rng);
  }

  const EncoderConfig& config() const { return cfg_; }
  bool training() const { return training_; }
  void set_training(bool t) { training_ = t; }
  long step = 0;  // optimizer steps taken, persisted in checkpoints

  FeatureMap<T> encode_radar(const nn::Tensor<T>& x) const {
    return {fnet_radar_.forward(x, training_), Modality::radar};
  }
  FeatureMap<T> encode_lidar(const nn::Tensor<T>& x) const {
    return {fnet_lidar_.forward(x, training_), Modality::lidar};
  }
  FeatureMap<T> encode_radar(const BevImage& img) const {
    return encode_radar(bev_to_tensor<T>(img));
  }
  FeatureMap<T> encode_lidar(const BevImage& img) const {
    return encode_lidar(bev_to_tensor<T>(img));
  }

  /// Context encoder on the LiDAR BEV: returns (hidden, context), where the
  /// hidden state is tanh-bounded and the context part is ReLU-activated.
  std::pair<nn::Tensor<T>, nn::Tensor<T>> encode_context(
      const nn::Tensor<T>& x) const {
    auto y = cnet_.forward(x, training_);
    auto hidden = tanh_op(slice_channels(y, 0, cfg_.hidden_dim()));
    auto context = relu(slice_channels(y, cfg_.hidden_dim(),
                                       cfg_.hidden_dim() + cfg_.context_dim()));
    return {hidden, context};
  }

  /// (N,D,h,w) features -> (N,K) unit descriptors; shared across modalities.
  nn::Tensor<T> describe(const FeatureMap<T>& f) const {
    return head_.forward(f.values, training_);
  }

  GlobalDescriptor describe_one(const BevImage& img) const {
    auto feat = img.modality == Modality::radar ? encode_radar(img)
                                                : encode_lidar(img);
    auto desc = describe(feat);
    GlobalDescriptor g;
    g.v.reserve(desc.size());
    for (T v : desc.data()) g.v.push_back(static_cast<float>(v));
    return g;
  }

  /// Full flow prediction: all refinement iterates at full resolution.
  std::vector<nn::Tensor<T>> predict_flow(const nn::Tensor<T>& lidar,
                                          const nn::Tensor<T>& radar,
                                          const FlowLossConfig& cfg) const {
    auto f_l = encode_lidar(lidar);
    auto f_r = encode_radar(radar);
    auto pyr = correlation_pyramid(f_l, f_r);
    auto [hidden, context] = encode_context(lidar);
    return refine_flow(update_, pyr, hidden, context, cfg);
  }

  FlowMap predict_flow_final(const BevImage& lidar, const BevImage& radar,
                             const FlowLossConfig& cfg) const {
    auto outs = predict_flow(bev_to_tensor<T>(lidar), bev_to_tensor<T>(radar), cfg);
    return tensor_to_flow(outs.back(), lidar.config);
  }

  nn::ParamMap<T> params() const {
    nn::ParamMap<T> pm;
    fnet_radar_.collect("fnet_radar", pm);
    fnet_lidar_.collect("fnet_lidar", pm);
    cnet_.collect("cnet", pm);
    head_.collect("head", pm);
    update_.collect("update", pm);
    return pm;
  }

  void save(const std::filesystem::path& path,
            const nlohmann::json& metrics = {}) const {
    nlohmann::json manifest{
        {"format", "ralf-checkpoint"},
        {"config",
         {{"feature_dim", cfg_.feature_dim},
          {"size", cfg_.size == EncoderSize::full ? "full" : "small"},
          {"descriptor_dim", cfg_.descriptor_dim}}},
        {"step", step},
        {"metrics", metrics}};
    std::map<std::string, io::TensorBlob> blobs;
    auto pm = params();
    for (const auto& [name, t] : pm.params) {
      io::TensorBlob blob;
      blob.shape = t.shape();
      blob.data.reserve(t.size());
      for (T v : t.data()) blob.data.push_back(static_cast<float>(v));
      blobs.emplace(name, std::move(blob));
    }
    for (const auto& [name, buf] : pm.buffers) {
      io::TensorBlob blob;
      blob.shape = {static_cast<int>(buf->size())};
      blob.data.reserve(buf->size());
      for (T v : *buf) blob.data.push_back(static_cast<float>(v));
      blobs.emplace(name, std::move(blob));
    }
    io::write_archive(path, manifest.dump(), blobs);
  }

  static RalfModel load(const std::filesystem::path& path) {
    auto [manifest_str, blobs] = io::read_archive(path);
    nlohmann::json manifest = nlohmann::json::parse(manifest_str);
    if (manifest.value("format", "") != "ralf-checkpoint")
      throw io::IoError("not a checkpoint: " + path.string());
    EncoderConfig cfg;
    const auto& jc = manifest.at("config");
    cfg.feature_dim = jc.at("feature_dim");
    cfg.size = jc.at("size") == "full" ? EncoderSize::full : EncoderSize::small;
    cfg.descriptor_dim = jc.at("descriptor_dim");
    RalfModel model(cfg, 0);
    model.step = manifest.value("step", 0L);
    auto pm = model.params();
    for (auto& [name, t] : pm.params) {
      auto it = blobs.find(name);
      if (it == blobs.end()) throw io::IoError("missing tensor: " + name);
      if (it->second.data.size() != t.size())
        throw io::IoError("tensor size mismatch: " + name);
      auto& dst = t.data();
      for (std::size_t i = 0; i < dst.size(); ++i)
        dst[i] = static_cast<T>(it->second.data[i]);
    }
    for (auto& [name, buf] : pm.buffers) {
      auto it = blobs.find(name);
      if (it == blobs.end()) throw io::IoError("missing buffer: " + name);
      for (std::size_t i = 0; i < buf->size(); ++i)
        (*buf)[i] = static_cast<T>(it->second.data[i]);
    }
    return model;
  }

 private:
  EncoderConfig cfg_;
  RaftEncoder<T> fnet_radar_, fnet_lidar_, cnet_;
  DescriptorHead<T> head_;
  UpdateBlock<T> update_;
  bool training_ = false;
};

}  // namespace ralf
