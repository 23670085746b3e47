#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "ralf/encoders.hpp"
#include "ralf/geometry.hpp"
#include "ralf/nn/layers.hpp"

namespace ralf {

struct EmptyMask : std::runtime_error {
  EmptyMask() : std::runtime_error("flow loss mask has no valid pixels") {}
};

/// Dense per-pixel 2-vector field (units: pixels) with a validity mask.
struct FlowMap {
  BevConfig config;
  std::vector<float> u_flow, v_flow;   // H*W
  std::vector<std::uint8_t> valid;     // H*W

  FlowMap() = default;
  explicit FlowMap(const BevConfig& cfg) : config(cfg) {
    cfg.check();
    const std::size_t n = static_cast<std::size_t>(cfg.height) * cfg.width;
    u_flow.assign(n, 0.0f);
    v_flow.assign(n, 0.0f);
    valid.assign(n, 0);
  }
  std::size_t index(int u, int v) const {
    return static_cast<std::size_t>(u) * config.width + v;
  }
};

struct FlowLossConfig {
  double gamma = 0.8;
  int iterations = 8;  // training default; evaluation typically uses 12

  void check() const {
    if (!(gamma > 0.0 && gamma <= 1.0) || iterations < 1)
      throw std::invalid_argument("invalid FlowLossConfig");
  }
};

constexpr int kCorrLevels = 4;
constexpr int kCorrRadius = 4;

// ---------------------------------------------------------------------------
// All-pairs correlation volume
// ---------------------------------------------------------------------------

/// Level 0 holds the raw inner-product volume <f_l(i,j), f_r(k,l)> / sqrt(D)
/// stored as (S, 1, h, w) with S = h*w source positions; each further level
/// average-pools the target grid by two.
template <typename T>
struct CorrelationPyramid {
  int h = 0, w = 0;  // source grid (1/8 resolution)
  std::vector<nn::Tensor<T>> levels;
};

template <typename T>
CorrelationPyramid<T> correlation_pyramid(const FeatureMap<T>& f_l,
                                          const FeatureMap<T>& f_r,
                                          int n_levels = kCorrLevels) {
  const auto& a = f_l.values;
  const auto& b = f_r.values;
  if (a.shape() != b.shape())
    throw std::invalid_argument("correlation feature shape mismatch");
  const int D = a.dim(1), h = a.dim(2), w = a.dim(3);
  CorrelationPyramid<T> pyr;
  pyr.h = h;
  pyr.w = w;
  auto rows_l = chw_to_rows(a);  // (S,D)
  auto rows_r = chw_to_rows(b);
  auto vol = scale(matmul_nt(rows_l, rows_r),
                   static_cast<T>(1.0 / std::sqrt(static_cast<double>(D))));
  auto level = reshape(vol, {h * w, 1, h, w});
  pyr.levels.push_back(level);
  for (int l = 1; l < n_levels; ++l) {
    level = avg_pool2x2(level);
    pyr.levels.push_back(level);
  }
  return pyr;
}

/// Sample each pyramid level in a (2r+1)^2 window around the flow target of
/// every source position. Coordinates are treated as constants; gradients
/// flow into the volume values only.
template <typename T>
nn::Tensor<T> corr_lookup(const CorrelationPyramid<T>& pyr,
                          const std::vector<T>& flow_u,
                          const std::vector<T>& flow_v, int radius = kCorrRadius) {
  const int h = pyr.h, w = pyr.w;
  const int S = h * w;
  const int win = 2 * radius + 1;
  const int L = static_cast<int>(pyr.levels.size());
  const int C = L * win * win;
  if (flow_u.size() != static_cast<std::size_t>(S) ||
      flow_v.size() != static_cast<std::size_t>(S))
    throw std::invalid_argument("corr_lookup flow size mismatch");

  auto out = [&] {
    auto n = std::make_shared<nn::Node<T>>();
    n->shape = {1, C, h, w};
    n->value.assign(static_cast<std::size_t>(C) * S, T(0));
    for (const auto& lvl : pyr.levels) {
      n->parents.push_back(lvl.node());
      n->requires_grad = n->requires_grad || lvl.requires_grad();
    }
    return nn::Tensor<T>(std::move(n));
  }();
  auto* on = out.node().get();

  struct Tap {
    std::size_t idx;  // index into level value array
    T weight;
  };
  // per output element up to 4 taps; record for backward
  auto taps = std::make_shared<std::vector<std::vector<Tap>>>(
      static_cast<std::size_t>(C) * S);

  for (int l = 0; l < L; ++l) {
    auto* ln = pyr.levels[static_cast<std::size_t>(l)].node().get();
    const int lh = ln->shape[2], lw = ln->shape[3];
    const double scale_l = 1.0 / static_cast<double>(1 << l);
    for (int p = 0; p < S; ++p) {
      const int pi = p / w, pj = p % w;
      const double cu = (pi + static_cast<double>(flow_u[static_cast<std::size_t>(p)])) * scale_l;
      const double cv = (pj + static_cast<double>(flow_v[static_cast<std::size_t>(p)])) * scale_l;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          const int c = l * win * win + (dy + radius) * win + (dx + radius);
          const std::size_t out_idx =
              static_cast<std::size_t>(c) * S + static_cast<std::size_t>(p);
          const double y = cu + dy, x = cv + dx;
          const int y0 = static_cast<int>(std::floor(y));
          const int x0 = static_cast<int>(std::floor(x));
          const double fy = y - y0, fx = x - x0;
          T acc = T(0);
          auto& tp = (*taps)[out_idx];
          for (int ddy = 0; ddy <= 1; ++ddy)
            for (int ddx = 0; ddx <= 1; ++ddx) {
              const int yy = y0 + ddy, xx = x0 + ddx;
              if (yy < 0 || yy >= lh || xx < 0 || xx >= lw) continue;
              const T wgt = static_cast<T>((ddy ? fy : 1.0 - fy) *
                                           (ddx ? fx : 1.0 - fx));
              const std::size_t src =
                  (static_cast<std::size_t>(p) * lh + yy) * lw + xx;
              acc += wgt * ln->value[src];
              tp.push_back({src, wgt});
            }
          on->value[out_idx] = acc;
        }
      }
    }
  }
  if (on->requires_grad) {
    std::vector<nn::Node<T>*> level_nodes;
    for (const auto& lvl : pyr.levels) level_nodes.push_back(lvl.node().get());
    const int win2 = win * win;
    on->backward_fn = [on, taps, level_nodes, S, win2]() {
      for (std::size_t out_idx = 0; out_idx < on->grad.size(); ++out_idx) {
        const T g = on->grad[out_idx];
        if (g == T(0)) continue;
        const int c = static_cast<int>(out_idx / static_cast<std::size_t>(S));
        auto* ln = level_nodes[static_cast<std::size_t>(c / win2)];
        for (const auto& tap : (*taps)[out_idx]) ln->grad[tap.idx] += g * tap.weight;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Recurrent update block (ConvGRU)
// ---------------------------------------------------------------------------

template <typename T>
class UpdateBlock {
 public:
  UpdateBlock() = default;
  UpdateBlock(const EncoderConfig& cfg, std::mt19937_64& rng) {
    const bool full = cfg.size == EncoderSize::full;
    const int corr_ch = kCorrLevels * (2 * kCorrRadius + 1) * (2 * kCorrRadius + 1);
    const int mc1 = full ? 256 : 96, mc2 = full ? 192 : 96;
    const int fc1 = full ? 128 : 64, fc2 = full ? 64 : 32;
    motion_dim_ = full ? 128 : 64;
    hidden_dim_ = cfg.hidden_dim();
    const int fh = full ? 256 : 96;

    convc1_ = nn::Conv2dLayer<T>(corr_ch, mc1, 1, 1, 0, rng);
    convc2_ = nn::Conv2dLayer<T>(mc1, mc2, 3, 1, 1, rng);
    convf1_ = nn::Conv2dLayer<T>(2, fc1, 7, 1, 3, rng);
    convf2_ = nn::Conv2dLayer<T>(fc1, fc2, 3, 1, 1, rng);
    conv_merge_ = nn::Conv2dLayer<T>(mc2 + fc2, motion_dim_ - 2, 3, 1, 1, rng);

    const int gru_in = hidden_dim_ + cfg.context_dim() + motion_dim_;
    convz_ = nn::Conv2dLayer<T>(gru_in, hidden_dim_, 3, 1, 1, rng);
    convr_ = nn::Conv2dLayer<T>(gru_in, hidden_dim_, 3, 1, 1, rng);
    convq_ = nn::Conv2dLayer<T>(gru_in, hidden_dim_, 3, 1, 1, rng);

    head1_ = nn::Conv2dLayer<T>(hidden_dim_, fh, 3, 1, 1, rng);
    head2_ = nn::Conv2dLayer<T>(fh, 2, 3, 1, 1, rng);
  }

  int hidden_dim() const { return hidden_dim_; }

  /// One GRU step: (hidden, context, corr features, current flow) ->
  /// (new hidden, flow update).
  std::pair<nn::Tensor<T>, nn::Tensor<T>> step(const nn::Tensor<T>& hidden,
                                               const nn::Tensor<T>& context,
                                               const nn::Tensor<T>& corr_feat,
                                               const nn::Tensor<T>& flow) const {
    auto c = relu(convc2_.forward(relu(convc1_.forward(corr_feat))));
    auto f = relu(convf2_.forward(relu(convf1_.forward(flow))));
    auto motion = concat_channels(relu(conv_merge_.forward(concat_channels(c, f))), flow);
    auto x = concat_channels(context, motion);

    auto hx = concat_channels(hidden, x);
    auto z = sigmoid(convz_.forward(hx));
    auto r = sigmoid(convr_.forward(hx));
    auto q = tanh_op(convq_.forward(concat_channels(mul(r, hidden), x)));
    // h' = (1-z) h + z q
    auto one_minus_z = add_scalar(scale(z, T(-1)), T(1));
    auto h_new = add(mul(one_minus_z, hidden), mul(z, q));

    auto delta = head2_.forward(relu(head1_.forward(h_new)));
    return {h_new, delta};
  }

  void collect(const std::string& prefix, nn::ParamMap<T>& pm) const {
    convc1_.collect(prefix + ".convc1", pm);
    convc2_.collect(prefix + ".convc2", pm);
    convf1_.collect(prefix + ".convf1", pm);
    convf2_.collect(prefix + ".convf2", pm);
    conv_merge_.collect(prefix + ".conv_merge", pm);
    convz_.collect(prefix + ".convz", pm);
    convr_.collect(prefix + ".convr", pm);
    convq_.collect(prefix + ".convq", pm);
    head1_.collect(prefix + ".head1", pm);
    head2_.collect(prefix + ".head2", pm);
  }

 private:
  nn::Conv2dLayer<T> convc1_, convc2_, convf1_, convf2_, conv_merge_;
  nn::Conv2dLayer<T> convz_, convr_, convq_;
  nn::Conv2dLayer<T> head1_, head2_;
  int motion_dim_ = 0, hidden_dim_ = 0;
};

/// Iterative refinement: start from zero flow at 1/8 resolution, apply the
/// GRU `iterations` times; every iterate is upsampled x8 (values scaled x8)
/// to full resolution. Returns the full-resolution flow tensors (1,2,H,W).
template <typename T>
std::vector<nn::Tensor<T>> refine_flow(const UpdateBlock<T>& update,
                                       const CorrelationPyramid<T>& pyr,
                                       const nn::Tensor<T>& hidden_init,
                                       const nn::Tensor<T>& context,
                                       const FlowLossConfig& cfg) {
  cfg.check();
  const int h = pyr.h, w = pyr.w;
  auto flow = nn::Tensor<T>::zeros({1, 2, h, w});
  auto hidden = hidden_init;
  std::vector<nn::Tensor<T>> outputs;
  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<T> fu(static_cast<std::size_t>(h) * w), fv(fu.size());
    const auto& fd = flow.data();
    std::copy_n(fd.begin(), fu.size(), fu.begin());
    std::copy_n(fd.begin() + static_cast<std::ptrdiff_t>(fu.size()), fv.size(),
                fv.begin());
    auto corr_feat = corr_lookup(pyr, fu, fv);
    auto [h_new, delta] = update.step(hidden, context, corr_feat, flow);
    hidden = h_new;
    flow = add(flow, delta);
    outputs.push_back(scale(bilinear_upsample(flow, 8), T(8)));
  }
  return outputs;
}

// ---------------------------------------------------------------------------
// Ground-truth flow and sequence loss
// ---------------------------------------------------------------------------

/// Flow written at each map point's projection under T_init (in the
/// T_init-centered frame), pointing to its projection under T_GT.
/// Pixel collisions keep the point nearest the sensor.
inline FlowMap gt_flow(const PointCloud2& map_cloud, const Pose2& t_init,
                       const Pose2& t_gt, const BevConfig& cfg) {
  cfg.check();
  FlowMap flow(cfg);
  std::vector<double> depth(flow.u_flow.size(),
                            std::numeric_limits<double>::infinity());
  const Pose2 inv_init = inverse(t_init);
  const Pose2 inv_gt = inverse(t_gt);
  for (const auto& m : map_cloud.points) {
    auto [xi, yi] = inv_init.apply(m.x, m.y);
    auto [ui, vi] = world_to_pixel(xi, yi, cfg);
    const int u = static_cast<int>(std::floor(ui));
    const int v = static_cast<int>(std::floor(vi));
    if (u < 0 || u >= cfg.height || v < 0 || v >= cfg.width) continue;
    const double d = std::hypot(xi, yi);
    const std::size_t idx = flow.index(u, v);
    if (d >= depth[idx]) continue;
    depth[idx] = d;
    auto [xg, yg] = inv_gt.apply(m.x, m.y);
    auto [ug, vg] = world_to_pixel(xg, yg, cfg);
    flow.u_flow[idx] = static_cast<float>(ug - ui);
    flow.v_flow[idx] = static_cast<float>(vg - vi);
    flow.valid[idx] = 1;
  }
  return flow;
}

/// Mean over valid pixels of |du| + |dv| for one prediction.
inline double flow_epe_l1(const FlowMap& pred, const FlowMap& gt) {
  if (pred.u_flow.size() != gt.u_flow.size())
    throw std::invalid_argument("flow map size mismatch");
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < gt.valid.size(); ++i) {
    if (!gt.valid[i]) continue;
    acc += std::abs(static_cast<double>(pred.u_flow[i]) - gt.u_flow[i]) +
           std::abs(static_cast<double>(pred.v_flow[i]) - gt.v_flow[i]);
    ++count;
  }
  if (count == 0) throw EmptyMask();
  return acc / static_cast<double>(count);
}

/// Exponentially weighted sequence loss over the refinement iterates.
inline double flow_loss(const std::vector<FlowMap>& preds, const FlowMap& gt,
                        const FlowLossConfig& cfg) {
  cfg.check();
  if (preds.empty()) throw std::invalid_argument("no flow predictions");
  const int N = static_cast<int>(preds.size());
  double total = 0.0;
  for (int i = 1; i <= N; ++i)
    total += std::pow(cfg.gamma, N - i) * flow_epe_l1(preds[static_cast<std::size_t>(i - 1)], gt);
  return total;
}

/// Differentiable counterpart of flow_epe_l1 for a (1,2,H,W) prediction.
template <typename T>
nn::Tensor<T> flow_epe_l1_t(const nn::Tensor<T>& pred, const FlowMap& gt) {
  const int H = pred.dim(2), W = pred.dim(3);
  if (static_cast<std::size_t>(H) * W != gt.valid.size())
    throw std::invalid_argument("flow map size mismatch");
  std::size_t count = 0;
  for (auto v : gt.valid) count += v ? 1 : 0;
  if (count == 0) throw EmptyMask();

  auto out = nn::make_result<T>({1}, {pred});
  auto* on = out.node().get();
  auto* pn = pred.node().get();
  const std::size_t hw = gt.valid.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < hw; ++i) {
    if (!gt.valid[i]) continue;
    acc += std::abs(static_cast<double>(pn->value[i]) - gt.u_flow[i]);
    acc += std::abs(static_cast<double>(pn->value[hw + i]) - gt.v_flow[i]);
  }
  on->value[0] = static_cast<T>(acc / static_cast<double>(count));
  if (on->requires_grad) {
    auto gt_u = gt.u_flow;
    auto gt_v = gt.v_flow;
    auto mask = gt.valid;
    on->backward_fn = [on, pn, gt_u, gt_v, mask, hw, count]() {
      const T g = on->grad[0] / static_cast<T>(count);
      for (std::size_t i = 0; i < hw; ++i) {
        if (!mask[i]) continue;
        const T du = pn->value[i] - static_cast<T>(gt_u[i]);
        const T dv = pn->value[hw + i] - static_cast<T>(gt_v[i]);
        pn->grad[i] += g * (du > T(0) ? T(1) : (du < T(0) ? T(-1) : T(0)));
        pn->grad[hw + i] += g * (dv > T(0) ? T(1) : (dv < T(0) ? T(-1) : T(0)));
      }
    };
  }
  return out;
}

template <typename T>
nn::Tensor<T> flow_loss_t(const std::vector<nn::Tensor<T>>& preds,
                          const FlowMap& gt, const FlowLossConfig& cfg) {
  cfg.check();
  if (preds.empty()) throw std::invalid_argument("no flow predictions");
  const int N = static_cast<int>(preds.size());
  nn::Tensor<T> total;
  for (int i = 1; i <= N; ++i) {
    auto term = scale(flow_epe_l1_t(preds[static_cast<std::size_t>(i - 1)], gt),
                      static_cast<T>(std::pow(cfg.gamma, N - i)));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

inline double total_loss(double pr, double flow) { return pr + flow; }

template <typename T>
nn::Tensor<T> total_loss_t(const nn::Tensor<T>& pr, const nn::Tensor<T>& flow) {
  return add(pr, flow);
}

/// Extract a plain FlowMap (all pixels valid) from a (1,2,H,W) tensor.
template <typename T>
FlowMap tensor_to_flow(const nn::Tensor<T>& t, const BevConfig& cfg) {
  FlowMap f(cfg);
  const std::size_t hw = f.u_flow.size();
  for (std::size_t i = 0; i < hw; ++i) {
    f.u_flow[i] = static_cast<float>(t.data()[i]);
    f.v_flow[i] = static_cast<float>(t.data()[hw + i]);
    f.valid[i] = 1;
  }
  return f;
}

}  // namespace ralf
