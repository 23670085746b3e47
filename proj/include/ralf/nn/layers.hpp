#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "ralf/nn/ops.hpp"
#include "ralf/nn/tensor.hpp"

namespace ralf::nn {

/// Named parameter/buffer registry used for the optimizer and checkpoints.
template <typename T>
struct ParamMap {
  std::vector<std::pair<std::string, Tensor<T>>> params;
  std::vector<std::pair<std::string, std::shared_ptr<std::vector<T>>>> buffers;

  void add_param(const std::string& name, const Tensor<T>& t) {
    params.emplace_back(name, t);
  }
  void add_buffer(const std::string& name,
                  const std::shared_ptr<std::vector<T>>& b) {
    buffers.emplace_back(name, b);
  }
  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params) n += t.size();
    return n;
  }
  void zero_grad() {
    for (auto& [_, t] : params) {
      auto& g = t.grad();
      std::fill(g.begin(), g.end(), T(0));
    }
  }
};

enum class NormKind { none, instance, batch };

template <typename T>
Tensor<T> kaiming_conv_weight(int out_ch, int in_ch, int kh, int kw,
                              std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(in_ch) * kh * kw;
  const double bound = std::sqrt(2.0) / std::sqrt(fan_in);
  std::uniform_real_distribution<double> unif(-bound, bound);
  std::vector<T> w(static_cast<std::size_t>(out_ch) * in_ch * kh * kw);
  for (auto& v : w) v = static_cast<T>(unif(rng));
  return Tensor<T>::from(std::move(w), {out_ch, in_ch, kh, kw}, true);
}

template <typename T>
struct Conv2dLayer {
  Tensor<T> w, b;
  int stride = 1, pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(int in_ch, int out_ch, int k, int stride_, int pad_,
              std::mt19937_64& rng, bool bias = true)
      : stride(stride_), pad(pad_) {
    w = kaiming_conv_weight<T>(out_ch, in_ch, k, k, rng);
    if (bias) b = Tensor<T>::zeros({out_ch}, true);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv2d(x, w, b, stride, pad);
  }
  void collect(const std::string& prefix, ParamMap<T>& pm) const {
    pm.add_param(prefix + ".w", w);
    if (b.defined()) pm.add_param(prefix + ".b", b);
  }
};

template <typename T>
struct BatchNorm2dLayer {
  Tensor<T> gamma, beta;
  std::shared_ptr<std::vector<T>> running_mean, running_var;

  BatchNorm2dLayer() = default;
  explicit BatchNorm2dLayer(int ch) {
    gamma = Tensor<T>::from(std::vector<T>(static_cast<std::size_t>(ch), T(1)),
                            {ch}, true);
    beta = Tensor<T>::zeros({ch}, true);
    running_mean = std::make_shared<std::vector<T>>(ch, T(0));
    running_var = std::make_shared<std::vector<T>>(ch, T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, training);
  }
  void collect(const std::string& prefix, ParamMap<T>& pm) const {
    pm.add_param(prefix + ".gamma", gamma);
    pm.add_param(prefix + ".beta", beta);
    pm.add_buffer(prefix + ".running_mean", running_mean);
    pm.add_buffer(prefix + ".running_var", running_var);
  }
};

/// Norm dispatch shared by the residual blocks.
template <typename T>
struct Norm2d {
  NormKind kind = NormKind::none;
  BatchNorm2dLayer<T> bn;

  Norm2d() = default;
  Norm2d(NormKind k, int ch) : kind(k) {
    if (k == NormKind::batch) bn = BatchNorm2dLayer<T>(ch);
  }
  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    switch (kind) {
      case NormKind::instance:
        return instance_norm2d(x);
      case NormKind::batch:
        return bn.forward(x, training);
      default:
        return x;
    }
  }
  void collect(const std::string& prefix, ParamMap<T>& pm) const {
    if (kind == NormKind::batch) bn.collect(prefix + ".bn", pm);
  }
};

/// Two 3x3 convolutions with pre-activation-free ResNet wiring; a 1x1
/// projection joins the skip path when shape changes.
template <typename T>
struct ResidualBlock {
  Conv2dLayer<T> conv1, conv2;
  Norm2d<T> norm1, norm2, norm_skip;
  Conv2dLayer<T> proj;
  bool has_proj = false;

  ResidualBlock() = default;
  ResidualBlock(int in_ch, int out_ch, int stride, NormKind norm,
                std::mt19937_64& rng) {
    conv1 = Conv2dLayer<T>(in_ch, out_ch, 3, stride, 1, rng);
    conv2 = Conv2dLayer<T>(out_ch, out_ch, 3, 1, 1, rng);
    norm1 = Norm2d<T>(norm, out_ch);
    norm2 = Norm2d<T>(norm, out_ch);
    if (stride != 1 || in_ch != out_ch) {
      has_proj = true;
      proj = Conv2dLayer<T>(in_ch, out_ch, 1, stride, 0, rng);
      norm_skip = Norm2d<T>(norm, out_ch);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    auto y = relu(norm1.forward(conv1.forward(x), training));
    y = relu(norm2.forward(conv2.forward(y), training));
    auto skip = has_proj ? norm_skip.forward(proj.forward(x), training) : x;
    return relu(add(y, skip));
  }
  void collect(const std::string& prefix, ParamMap<T>& pm) const {
    conv1.collect(prefix + ".conv1", pm);
    conv2.collect(prefix + ".conv2", pm);
    norm1.collect(prefix + ".norm1", pm);
    norm2.collect(prefix + ".norm2", pm);
    if (has_proj) {
      proj.collect(prefix + ".proj", pm);
      norm_skip.collect(prefix + ".norm_skip", pm);
    }
  }
};

}  // namespace ralf::nn
