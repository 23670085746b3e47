#pragma once

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "ralf/nn/tensor.hpp"

namespace ralf::nn {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatRM<T>>;

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T, class F, class DF>
Tensor<T> unary_op(const Tensor<T>& x, F f, DF dfdx) {
  auto out = make_result<T>(x.shape(), {x});
  auto* on = out.node().get();
  auto* xn = x.node().get();
  for (std::size_t i = 0; i < xn->value.size(); ++i)
    on->value[i] = f(xn->value[i]);
  if (on->requires_grad)
    on->backward_fn = [on, xn, dfdx]() {
      for (std::size_t i = 0; i < xn->value.size(); ++i)
        xn->grad[i] += on->grad[i] * dfdx(xn->value[i], on->value[i]);
    };
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return unary_op(
      x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <typename T, class F, class DA, class DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, F f, DA dfda,
                    DB dfdb) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("binary op shape mismatch");
  auto out = make_result<T>(a.shape(), {a, b});
  auto* on = out.node().get();
  auto* an = a.node().get();
  auto* bn = b.node().get();
  for (std::size_t i = 0; i < an->value.size(); ++i)
    on->value[i] = f(an->value[i], bn->value[i]);
  if (on->requires_grad)
    on->backward_fn = [on, an, bn, dfda, dfdb]() {
      for (std::size_t i = 0; i < an->value.size(); ++i) {
        const T g = on->grad[i];
        an->grad[i] += g * dfda(an->value[i], bn->value[i]);
        bn->grad[i] += g * dfdb(an->value[i], bn->value[i]);
      }
    };
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return unary_op(
      x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride,
            int pad, int Ho, int Wo, T* col) {
  // col layout: (C*kh*kw) x (Ho*Wo), row-major
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* dst = col + (static_cast<std::size_t>(c) * kh * kw + ki * kw + kj) *
                           (static_cast<std::size_t>(Ho) * Wo);
        for (int i = 0; i < Ho; ++i) {
          const int yi = i * stride - pad + ki;
          if (yi < 0 || yi >= H) {
            std::fill(dst, dst + Wo, T(0));
            dst += Wo;
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * H + yi) * W;
          for (int j = 0; j < Wo; ++j) {
            const int xj = j * stride - pad + kj;
            *dst++ = (xj < 0 || xj >= W) ? T(0) : src[xj];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride,
                int pad, int Ho, int Wo, T* gx) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* src = col + (static_cast<std::size_t>(c) * kh * kw + ki * kw + kj) *
                                 (static_cast<std::size_t>(Ho) * Wo);
        for (int i = 0; i < Ho; ++i) {
          const int yi = i * stride - pad + ki;
          if (yi < 0 || yi >= H) continue;
          T* dst = gx + (static_cast<std::size_t>(c) * H + yi) * W;
          for (int j = 0; j < Wo; ++j) {
            const int xj = j * stride - pad + kj;
            if (xj >= 0 && xj < W) dst[xj] += src[i * Wo + j];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// x: (N,C,H,W), w: (O,C,kh,kw), b: (O) or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int pad) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C) throw std::invalid_argument("conv2d channel mismatch");
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d output empty");

  auto out = b.defined() ? make_result<T>({N, O, Ho, Wo}, {x, w, b})
                         : make_result<T>({N, O, Ho, Wo}, {x, w});
  auto* on = out.node().get();
  auto* xn = x.node().get();
  auto* wn = w.node().get();
  auto* bn = b.defined() ? b.node().get() : nullptr;

  const std::size_t ckk = static_cast<std::size_t>(C) * kh * kw;
  const std::size_t hw = static_cast<std::size_t>(Ho) * Wo;
  std::vector<T> col(ckk * hw);
  CMapM<T> wm(wn->value.data(), O, static_cast<Eigen::Index>(ckk));
  for (int n = 0; n < N; ++n) {
    detail::im2col(xn->value.data() + static_cast<std::size_t>(n) * C * H * W, C,
                   H, W, kh, kw, stride, pad, Ho, Wo, col.data());
    CMapM<T> cm(col.data(), static_cast<Eigen::Index>(ckk),
                static_cast<Eigen::Index>(hw));
    MapM<T> ym(on->value.data() + static_cast<std::size_t>(n) * O * hw, O,
               static_cast<Eigen::Index>(hw));
    ym.noalias() = wm * cm;
    if (bn)
      for (int o = 0; o < O; ++o)
        ym.row(o).array() += bn->value[static_cast<std::size_t>(o)];
  }

  if (on->requires_grad)
    on->backward_fn = [on, xn, wn, bn, N, C, H, W, O, kh, kw, stride, pad, Ho,
                       Wo, ckk, hw]() {
      std::vector<T> col(ckk * hw), gcol(ckk * hw);
      CMapM<T> wm(wn->value.data(), O, static_cast<Eigen::Index>(ckk));
      MapM<T> gwm(wn->grad.data(), O, static_cast<Eigen::Index>(ckk));
      const bool need_gx = xn->requires_grad;
      for (int n = 0; n < N; ++n) {
        CMapM<T> gym(on->grad.data() + static_cast<std::size_t>(n) * O * hw, O,
                     static_cast<Eigen::Index>(hw));
        if (wn->requires_grad) {
          detail::im2col(xn->value.data() + static_cast<std::size_t>(n) * C * H * W,
                         C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
          CMapM<T> cm(col.data(), static_cast<Eigen::Index>(ckk),
                      static_cast<Eigen::Index>(hw));
          gwm.noalias() += gym * cm.transpose();
        }
        if (bn && bn->requires_grad)
          for (int o = 0; o < O; ++o)
            bn->grad[static_cast<std::size_t>(o)] += gym.row(o).sum();
        if (need_gx) {
          MapM<T> gcm(gcol.data(), static_cast<Eigen::Index>(ckk),
                      static_cast<Eigen::Index>(hw));
          gcm.noalias() = wm.transpose() * gym;
          detail::col2im_add(gcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                             xn->grad.data() + static_cast<std::size_t>(n) * C * H * W);
        }
      }
    };
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-(sample, channel) normalization over spatial dims; no affine part.
template <typename T>
Tensor<T> instance_norm2d(const Tensor<T>& x, T eps = T(1e-5)) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  auto out = make_result<T>(x.shape(), {x});
  auto* on = out.node().get();
  auto* xn = x.node().get();
  auto stats = std::make_shared<std::vector<T>>(
      static_cast<std::size_t>(N) * C);  // inverse stddev per group
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* xp = xn->value.data() + (static_cast<std::size_t>(n) * C + c) * hw;
      T* yp = on->value.data() + (static_cast<std::size_t>(n) * C + c) * hw;
      T mean = T(0);
      for (std::size_t i = 0; i < hw; ++i) mean += xp[i];
      mean /= static_cast<T>(hw);
      T var = T(0);
      for (std::size_t i = 0; i < hw; ++i) {
        const T d = xp[i] - mean;
        var += d * d;
      }
      var /= static_cast<T>(hw);
      const T istd = T(1) / std::sqrt(var + eps);
      (*stats)[static_cast<std::size_t>(n) * C + c] = istd;
      for (std::size_t i = 0; i < hw; ++i) yp[i] = (xp[i] - mean) * istd;
    }
  if (on->requires_grad)
    on->backward_fn = [on, xn, stats, N, C, hw]() {
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
          const T istd = (*stats)[static_cast<std::size_t>(n) * C + c];
          const T* y = on->value.data() + base;
          const T* gy = on->grad.data() + base;
          T* gx = xn->grad.data() + base;
          T gmean = T(0), gdot = T(0);
          for (std::size_t i = 0; i < hw; ++i) {
            gmean += gy[i];
            gdot += gy[i] * y[i];
          }
          gmean /= static_cast<T>(hw);
          gdot /= static_cast<T>(hw);
          for (std::size_t i = 0; i < hw; ++i)
            gx[i] += istd * (gy[i] - gmean - y[i] * gdot);
        }
    };
  return out;
}

/// Batch norm with affine parameters and running statistics.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma,
                       const Tensor<T>& beta,
                       const std::shared_ptr<std::vector<T>>& running_mean,
                       const std::shared_ptr<std::vector<T>>& running_var,
                       bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const std::size_t cnt = static_cast<std::size_t>(N) * hw;
  auto out = make_result<T>(x.shape(), {x, gamma, beta});
  auto* on = out.node().get();
  auto* xn = x.node().get();
  auto* gn = gamma.node().get();
  auto* bn = beta.node().get();
  auto mean = std::make_shared<std::vector<T>>(C);
  auto istd = std::make_shared<std::vector<T>>(C);

  for (int c = 0; c < C; ++c) {
    T m, v;
    if (training) {
      m = T(0);
      for (int n = 0; n < N; ++n) {
        const T* xp = xn->value.data() + (static_cast<std::size_t>(n) * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) m += xp[i];
      }
      m /= static_cast<T>(cnt);
      v = T(0);
      for (int n = 0; n < N; ++n) {
        const T* xp = xn->value.data() + (static_cast<std::size_t>(n) * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T d = xp[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<T>(cnt);
      (*running_mean)[c] = (T(1) - momentum) * (*running_mean)[c] + momentum * m;
      (*running_var)[c] = (T(1) - momentum) * (*running_var)[c] + momentum * v;
    } else {
      m = (*running_mean)[c];
      v = (*running_var)[c];
    }
    (*mean)[c] = m;
    (*istd)[c] = T(1) / std::sqrt(v + eps);
    const T g = gn->value[static_cast<std::size_t>(c)];
    const T b = bn->value[static_cast<std::size_t>(c)];
    for (int n = 0; n < N; ++n) {
      const T* xp = xn->value.data() + (static_cast<std::size_t>(n) * C + c) * hw;
      T* yp = on->value.data() + (static_cast<std::size_t>(n) * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i)
        yp[i] = (xp[i] - m) * (*istd)[c] * g + b;
    }
  }
  if (on->requires_grad)
    on->backward_fn = [on, xn, gn, bn, mean, istd, N, C, hw, cnt, training]() {
      for (int c = 0; c < C; ++c) {
        const T m = (*mean)[c], is = (*istd)[c];
        const T g = gn->value[static_cast<std::size_t>(c)];
        T sum_gy = T(0), sum_gy_xhat = T(0);
        for (int n = 0; n < N; ++n) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
          const T* gy = on->grad.data() + base;
          const T* xp = xn->value.data() + base;
          for (std::size_t i = 0; i < hw; ++i) {
            sum_gy += gy[i];
            sum_gy_xhat += gy[i] * (xp[i] - m) * is;
          }
        }
        gn->grad[static_cast<std::size_t>(c)] += sum_gy_xhat;
        bn->grad[static_cast<std::size_t>(c)] += sum_gy;
        if (!xn->requires_grad) continue;
        const T inv_cnt = T(1) / static_cast<T>(cnt);
        for (int n = 0; n < N; ++n) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
          const T* gy = on->grad.data() + base;
          const T* xp = xn->value.data() + base;
          T* gx = xn->grad.data() + base;
          for (std::size_t i = 0; i < hw; ++i) {
            const T xhat = (xp[i] - m) * is;
            if (training)
              gx[i] += g * is *
                       (gy[i] - sum_gy * inv_cnt - xhat * sum_gy_xhat * inv_cnt);
            else
              gx[i] += g * is * gy[i];
          }
        }
      }
    };
  return out;
}

// ---------------------------------------------------------------------------
// Shape / pooling / resampling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  if (b.dim(0) != N || b.dim(2) != H || b.dim(3) != W)
    throw std::invalid_argument("concat_channels spatial mismatch");
  auto out = make_result<T>({N, Ca + Cb, H, W}, {a, b});
  auto* on = out.node().get();
  auto* an = a.node().get();
  auto* bnn = b.node().get();
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    std::copy_n(an->value.data() + static_cast<std::size_t>(n) * Ca * hw, Ca * hw,
                on->value.data() + static_cast<std::size_t>(n) * (Ca + Cb) * hw);
    std::copy_n(bnn->value.data() + static_cast<std::size_t>(n) * Cb * hw, Cb * hw,
                on->value.data() + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * hw);
  }
  if (on->requires_grad)
    on->backward_fn = [on, an, bnn, N, Ca, Cb, hw]() {
      for (int n = 0; n < N; ++n) {
        const T* g = on->grad.data() + static_cast<std::size_t>(n) * (Ca + Cb) * hw;
        T* ga = an->grad.data() + static_cast<std::size_t>(n) * Ca * hw;
        T* gb = bnn->grad.data() + static_cast<std::size_t>(n) * Cb * hw;
        for (std::size_t i = 0; i < Ca * hw; ++i) ga[i] += g[i];
        for (std::size_t i = 0; i < Cb * hw; ++i) gb[i] += g[Ca * hw + i];
      }
    };
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (c0 < 0 || c1 > C || c0 >= c1)
    throw std::invalid_argument("bad channel slice");
  const int Cs = c1 - c0;
  auto out = make_result<T>({N, Cs, H, W}, {x});
  auto* on = out.node().get();
  auto* xn = x.node().get();
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n)
    std::copy_n(xn->value.data() + (static_cast<std::size_t>(n) * C + c0) * hw,
                static_cast<std::size_t>(Cs) * hw,
                on->value.data() + static_cast<std::size_t>(n) * Cs * hw);
  if (on->requires_grad)
    on->backward_fn = [on, xn, N, C, c0, Cs, hw]() {
      for (int n = 0; n < N; ++n) {
        const T* g = on->grad.data() + static_cast<std::size_t>(n) * Cs * hw;
        T* gx = xn->grad.data() + (static_cast<std::size_t>(n) * C + c0) * hw;
        for (std::size_t i = 0; i < static_cast<std::size_t>(Cs) * hw; ++i)
          gx[i] += g[i];
      }
    };
  return out;
}

/// Select one sample of a batch as a (1,C,H,W) tensor.
template <typename T>
Tensor<T> select_sample(const Tensor<T>& x, int n) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (n < 0 || n >= N) throw std::invalid_argument("sample index out of range");
  auto out = make_result<T>({1, C, H, W}, {x});
  auto* on = out.node().get();
  auto* xn = x.node().get();
  const std::size_t chw = static_cast<std::size_t>(C) * H * W;
  std::copy_n(xn->value.data() + static_cast<std::size_t>(n) * chw, chw,
              on->value.data());
  if (on->requires_grad)
    on->backward_fn = [on, xn, n, chw]() {
      T* gx = xn->grad.data() + static_cast<std::size_t>(n) * chw;
      for (std::size_t i = 0; i < chw; ++i) gx[i] += on->grad[i];
    };
  return out;
}

template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H / 2, Wo = W / 2;
  if (Ho == 0 || Wo == 0) throw std::invalid_argument("avg_pool2x2 too small");
  auto out = make_result<T>({N, C, Ho, Wo}, {x});
  auto* on = out.node().get();
  auto* xn = x.node().get();
  for (int nc = 0; nc < N * C; ++nc) {
    const T* xp = xn->value.data() + static_cast<std::size_t>(nc) * H * W;
    T* yp = on->value.data() + static_cast<std::size_t>(nc) * Ho * Wo;
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j)
        yp[i * Wo + j] = T(0.25) * (xp[(2 * i) * W + 2 * j] +
                                    xp[(2 * i) * W + 2 * j + 1] +
                                    xp[(2 * i + 1) * W + 2 * j] +
                                    xp[(2 * i + 1) * W + 2 * j + 1]);
  }
  if (on->requires_grad)
    on->backward_fn = [on, xn, N, C, H, W, Ho, Wo]() {
      for (int nc = 0; nc < N * C; ++nc) {
        const T* g = on->grad.data() + static_cast<std::size_t>(nc) * Ho * Wo;
        T* gx = xn->grad.data() + static_cast<std::size_t>(nc) * H * W;
        for (int i = 0; i < Ho; ++i)
          for (int j = 0; j < Wo; ++j) {
            const T v = T(0.25) * g[i * Wo + j];
            gx[(2 * i) * W + 2 * j] += v;
            gx[(2 * i) * W + 2 * j + 1] += v;
            gx[(2 * i + 1) * W + 2 * j] += v;
            gx[(2 * i + 1) * W + 2 * j + 1] += v;
          }
      }
    };
  return out;
}

/// (N,C,H,W) -> (N,C) spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  auto out = make_result<T>({N, C}, {x});
  auto* on = out.node().get();
  auto* xn = x.node().get();
  for (int nc = 0; nc < N * C; ++nc) {
    const T* xp = xn->value.data() + static_cast<std::size_t>(nc) * hw;
    T acc = T(0);
    for (std::size_t i = 0; i < hw; ++i) acc += xp[i];
    on->value[static_cast<std::size_t>(nc)] = acc / static_cast<T>(hw);
  }
  if (on->requires_grad)
    on->backward_fn = [on, xn, N, C, hw]() {
      for (int nc = 0; nc < N * C; ++nc) {
        const T g = on->grad[static_cast<std::size_t>(nc)] / static_cast<T>(hw);
        T* gx = xn->grad.data() + static_cast<std::size_t>(nc) * hw;
        for (std::size_t i = 0; i < hw; ++i) gx[i] += g;
      }
    };
  return out;
}

/// Bilinear upsampling by an integer factor (half-pixel-center mapping).
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int factor) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H * factor, Wo = W * factor;
  auto out = make_result<T>({N, C, Ho, Wo}, {x});
  auto* on = out.node().get();
  auto* xn = x.node().get();

  struct Tap {
    int i0, i1;
    T w0, w1;
  };
  auto taps = [&](int size_in, int size_out) {
    std::vector<Tap> t(static_cast<std::size_t>(size_out));
    for (int o = 0; o < size_out; ++o) {
      const double src = (o + 0.5) / factor - 0.5;
      int i0 = static_cast<int>(std::floor(src));
      const double f = src - i0;
      int i1 = i0 + 1;
      i0 = std::clamp(i0, 0, size_in - 1);
      i1 = std::clamp(i1, 0, size_in - 1);
      t[static_cast<std::size_t>(o)] = {i0, i1, static_cast<T>(1.0 - f),
                                        static_cast<T>(f)};
    }
    return t;
  };
  auto ty = std::make_shared<std::vector<Tap>>(taps(H, Ho));
  auto tx = std::make_shared<std::vector<Tap>>(taps(W, Wo));

  for (int nc = 0; nc < N * C; ++nc) {
    const T* xp = xn->value.data() + static_cast<std::size_t>(nc) * H * W;
    T* yp = on->value.data() + static_cast<std::size_t>(nc) * Ho * Wo;
    for (int i = 0; i < Ho; ++i) {
      const Tap& a = (*ty)[static_cast<std::size_t>(i)];
      for (int j = 0; j < Wo; ++j) {
        const Tap& b = (*tx)[static_cast<std::size_t>(j)];
        yp[i * Wo + j] = a.w0 * (b.w0 * xp[a.i0 * W + b.i0] + b.w1 * xp[a.i0 * W + b.i1]) +
                         a.w1 * (b.w0 * xp[a.i1 * W + b.i0] + b.w1 * xp[a.i1 * W + b.i1]);
      }
    }
  }
  if (on->requires_grad)
    on->backward_fn = [on, xn, ty, tx, N, C, H, W, Ho, Wo]() {
      for (int nc = 0; nc < N * C; ++nc) {
        const T* g = on->grad.data() + static_cast<std::size_t>(nc) * Ho * Wo;
        T* gx = xn->grad.data() + static_cast<std::size_t>(nc) * H * W;
        for (int i = 0; i < Ho; ++i) {
          const Tap& a = (*ty)[static_cast<std::size_t>(i)];
          for (int j = 0; j < Wo; ++j) {
            const Tap& b = (*tx)[static_cast<std::size_t>(j)];
            const T gv = g[i * Wo + j];
            gx[a.i0 * W + b.i0] += a.w0 * b.w0 * gv;
            gx[a.i0 * W + b.i1] += a.w0 * b.w1 * gv;
            gx[a.i1 * W + b.i0] += a.w1 * b.w0 * gv;
            gx[a.i1 * W + b.i1] += a.w1 * b.w1 * gv;
          }
        }
      }
    };
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra / reductions on 2-D tensors
// ---------------------------------------------------------------------------

/// a: (M,K), b: (N,K) -> a * b^T : (M,N)
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  const int M = a.dim(0), K = a.dim(1), N = b.dim(0);
  if (b.dim(1) != K) throw std::invalid_argument("matmul_nt inner mismatch");
  auto out = make_result<T>({M, N}, {a, b});
  auto* on = out.node().get();
  auto* an = a.node().get();
  auto* bn = b.node().get();
  CMapM<T> am(an->value.data(), M, K);
  CMapM<T> bm(bn->value.data(), N, K);
  MapM<T> ym(on->value.data(), M, N);
  ym.noalias() = am * bm.transpose();
  if (on->requires_grad)
    on->backward_fn = [on, an, bn, M, K, N]() {
      CMapM<T> gm(on->grad.data(), M, N);
      CMapM<T> am(an->value.data(), M, K);
      CMapM<T> bm(bn->value.data(), N, K);
      if (an->requires_grad) {
        MapM<T> ga(an->grad.data(), M, K);
        ga.noalias() += gm * bm;
      }
      if (bn->requires_grad) {
        MapM<T> gb(bn->grad.data(), N, K);
        gb.noalias() += gm.transpose() * am;
      }
    };
  return out;
}

/// Row-wise L2 normalization of a (N,K) matrix.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12)) {
  const int N = x.dim(0), K = x.dim(1);
  auto out = make_result<T>(x.shape(), {x});
  auto* on = out.node().get();
  auto* xn = x.node().get();
  auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N));
  for (int n = 0; n < N; ++n) {
    const T* xp = xn->value.data() + static_cast<std::size_t>(n) * K;
    T* yp = on->value.data() + static_cast<std::size_t>(n) * K;
    T s = T(0);
    for (int k = 0; k < K; ++k) s += xp[k] * xp[k];
    const T r = std::sqrt(s) + eps;
    (*norms)[static_cast<std::size_t>(n)] = r;
    for (int k = 0; k < K; ++k) yp[k] = xp[k] / r;
  }
  if (on->requires_grad)
    on->backward_fn = [on, xn, norms, N, K]() {
      for (int n = 0; n < N; ++n) {
        const std::size_t base = static_cast<std::size_t>(n) * K;
        const T r = (*norms)[static_cast<std::size_t>(n)];
        const T* y = on->value.data() + base;
        const T* gy = on->grad.data() + base;
        T* gx = xn->grad.data() + base;
        T dot = T(0);
        for (int k = 0; k < K; ++k) dot += gy[k] * y[k];
        for (int k = 0; k < K; ++k) gx[k] += (gy[k] - y[k] * dot) / r;
      }
    };
  return out;
}

/// L2 distance between row i of a and row j of b; zero-distance subgradient 0.
template <typename T>
Tensor<T> row_l2_distance(const Tensor<T>& a, int i, const Tensor<T>& b, int j) {
  const int K = a.dim(1);
  if (b.dim(1) != K) throw std::invalid_argument("row distance dim mismatch");
  auto out = make_result<T>({1}, {a, b});
  auto* on = out.node().get();
  auto* an = a.node().get();
  auto* bn = b.node().get();
  const std::size_t ia = static_cast<std::size_t>(i) * K;
  const std::size_t jb = static_cast<std::size_t>(j) * K;
  T s = T(0);
  for (int k = 0; k < K; ++k) {
    const T d = an->value[ia + k] - bn->value[jb + k];
    s += d * d;
  }
  on->value[0] = std::sqrt(s);
  if (on->requires_grad)
    on->backward_fn = [on, an, bn, ia, jb, K]() {
      const T d = on->value[0];
      if (d < T(1e-12)) return;
      const T g = on->grad[0] / d;
      for (int k = 0; k < K; ++k) {
        const T diff = an->value[ia + k] - bn->value[jb + k];
        an->grad[ia + k] += g * diff;
        bn->grad[jb + k] -= g * diff;
      }
    };
  return out;
}

/// Same data, new shape (copying).
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (numel(shape) != x.size()) throw std::invalid_argument("reshape size mismatch");
  auto out = make_result<T>(shape, {x});
  auto* on = out.node().get();
  auto* xn = x.node().get();
  on->value = xn->value;
  if (on->requires_grad)
    on->backward_fn = [on, xn]() {
      for (std::size_t i = 0; i < xn->grad.size(); ++i)
        xn->grad[i] += on->grad[i];
    };
  return out;
}

/// (1,C,H,W) -> (H*W, C): one row per spatial position.
template <typename T>
Tensor<T> chw_to_rows(const Tensor<T>& x) {
  if (x.dim(0) != 1) throw std::invalid_argument("chw_to_rows expects batch 1");
  const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  auto out = make_result<T>({H * W, C}, {x});
  auto* on = out.node().get();
  auto* xn = x.node().get();
  for (int c = 0; c < C; ++c)
    for (std::size_t p = 0; p < hw; ++p)
      on->value[p * C + static_cast<std::size_t>(c)] =
          xn->value[static_cast<std::size_t>(c) * hw + p];
  if (on->requires_grad)
    on->backward_fn = [on, xn, C, hw]() {
      for (int c = 0; c < C; ++c)
        for (std::size_t p = 0; p < hw; ++p)
          xn->grad[static_cast<std::size_t>(c) * hw + p] +=
              on->grad[p * C + static_cast<std::size_t>(c)];
    };
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  auto out = make_result<T>({1}, {x});
  auto* on = out.node().get();
  auto* xn = x.node().get();
  T acc = T(0);
  for (T v : xn->value) acc += v;
  const T inv = T(1) / static_cast<T>(xn->value.size());
  on->value[0] = acc * inv;
  if (on->requires_grad)
    on->backward_fn = [on, xn, inv]() {
      for (std::size_t i = 0; i < xn->grad.size(); ++i)
        xn->grad[i] += on->grad[0] * inv;
    };
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto out = make_result<T>({1}, {x});
  auto* on = out.node().get();
  auto* xn = x.node().get();
  T acc = T(0);
  for (T v : xn->value) acc += v;
  on->value[0] = acc;
  if (on->requires_grad)
    on->backward_fn = [on, xn]() {
      for (std::size_t i = 0; i < xn->grad.size(); ++i)
        xn->grad[i] += on->grad[0];
    };
  return out;
}

}  // namespace ralf::nn
