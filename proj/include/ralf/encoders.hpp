#pragma once

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ralf/geometry.hpp"
#include "ralf/nn/layers.hpp"

namespace ralf {

enum class EncoderSize { full, small };

struct EncoderConfig {
  int feature_dim = 256;  // D; correlation feature channels
  EncoderSize size = EncoderSize::full;
  bool shared = false;  // must stay false: one encoder per modality
  int descriptor_dim = 128;

  static EncoderConfig full() { return {}; }
  static EncoderConfig small() {
    EncoderConfig c;
    c.feature_dim = 128;
    c.size = EncoderSize::small;
    c.descriptor_dim = 64;
    return c;
  }

  void check() const {
    if (feature_dim <= 0 || feature_dim % 2 != 0)
      throw std::invalid_argument("feature_dim must be positive and even");
    if (shared)
      throw std::invalid_argument(
          "shared encoders are not supported: one encoder per modality");
  }

  int stem_ch() const { return size == EncoderSize::full ? 64 : 32; }
  int stage1_ch() const { return size == EncoderSize::full ? 64 : 32; }
  int stage2_ch() const { return size == EncoderSize::full ? 96 : 64; }
  int stage3_ch() const { return size == EncoderSize::full ? 128 : 96; }
  int hidden_dim() const { return feature_dim / 2; }
  int context_dim() const { return feature_dim / 2; }
};

/// Dense feature map at 1/8 input resolution.
template <typename T>
struct FeatureMap {
  nn::Tensor<T> values;  // (N, D, H/8, W/8)
  Modality source_modality = Modality::lidar;

  int batch() const { return values.dim(0); }
  int channels() const { return values.dim(1); }
  int height() const { return values.dim(2); }
  int width() const { return values.dim(3); }
};

/// Convert BEV images to an (N,1,H,W) input tensor.
template <typename T>
nn::Tensor<T> bev_batch_to_tensor(const std::vector<const BevImage*>& imgs) {
  if (imgs.empty()) throw std::invalid_argument("empty image batch");
  const int H = imgs[0]->config.height, W = imgs[0]->config.width;
  std::vector<T> data;
  data.reserve(imgs.size() * static_cast<std::size_t>(H) * W);
  for (const auto* img : imgs) {
    if (img->config.height != H || img->config.width != W)
      throw std::invalid_argument("mixed image sizes in batch");
    for (float v : img->pixels) data.push_back(static_cast<T>(v));
  }
  return nn::Tensor<T>::from(std::move(data),
                             {static_cast<int>(imgs.size()), 1, H, W});
}

template <typename T>
nn::Tensor<T> bev_to_tensor(const BevImage& img) {
  return bev_batch_to_tensor<T>({&img});
}

/// Strided convolutional trunk: 7x7 stride-2 stem, six residual units with
/// downsampling after the second and fourth, then a 1x1 projection to the
/// output width. Output is 1/8 of the input resolution.
template <typename T>
class RaftEncoder {
 public:
  RaftEncoder() = default;
  RaftEncoder(const EncoderConfig& cfg, int out_dim, nn::NormKind norm,
              std::mt19937_64& rng)
      : norm_kind_(norm) {
    stem_ = nn::Conv2dLayer<T>(1, cfg.stem_ch(), 7, 2, 3, rng);
    stem_norm_ = nn::Norm2d<T>(norm, cfg.stem_ch());
    res_[0] = nn::ResidualBlock<T>(cfg.stem_ch(), cfg.stage1_ch(), 1, norm, rng);
    res_[1] = nn::ResidualBlock<T>(cfg.stage1_ch(), cfg.stage1_ch(), 1, norm, rng);
    res_[2] = nn::ResidualBlock<T>(cfg.stage1_ch(), cfg.stage2_ch(), 2, norm, rng);
    res_[3] = nn::ResidualBlock<T>(cfg.stage2_ch(), cfg.stage2_ch(), 1, norm, rng);
    res_[4] = nn::ResidualBlock<T>(cfg.stage2_ch(), cfg.stage3_ch(), 2, norm, rng);
    res_[5] = nn::ResidualBlock<T>(cfg.stage3_ch(), cfg.stage3_ch(), 1, norm, rng);
    out_ = nn::Conv2dLayer<T>(cfg.stage3_ch(), out_dim, 1, 1, 0, rng);
  }

  nn::Tensor<T> forward(const nn::Tensor<T>& x, bool training) const {
    if (x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0)
      throw std::invalid_argument("encoder input dims must be divisible by 8");
    auto y = relu(stem_norm_.forward(stem_.forward(x), training));
    for (const auto& block : res_) y = block.forward(y, training);
    return out_.forward(y);
  }

  void collect(const std::string& prefix, nn::ParamMap<T>& pm) const {
    stem_.collect(prefix + ".stem", pm);
    stem_norm_.collect(prefix + ".stem_norm", pm);
    for (int i = 0; i < 6; ++i)
      res_[i].collect(prefix + ".res" + std::to_string(i), pm);
    out_.collect(prefix + ".out", pm);
  }

 private:
  nn::NormKind norm_kind_ = nn::NormKind::instance;
  nn::Conv2dLayer<T> stem_;
  nn::Norm2d<T> stem_norm_;
  nn::ResidualBlock<T> res_[6];
  nn::Conv2dLayer<T> out_;
};

}  // namespace ralf
