#pragma once

#include <cmath>
#include <vector>

#include "ralf/nn/layers.hpp"

namespace ralf::nn {

/// One-cycle schedule: linear warmup for `warmup_frac` of the run, then
/// cosine annealing from the peak rate down to peak/25.
struct OneCycleSchedule {
  double peak_lr = 5e-4;
  double warmup_frac = 0.1;
  long total_steps = 200000;

  double lr_at(long step) const {
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    const double floor_lr = peak_lr / 25.0;
    if (t >= 1.0) return floor_lr;
    if (t < warmup_frac) return floor_lr + (peak_lr - floor_lr) * (t / warmup_frac);
    const double s = (t - warmup_frac) / (1.0 - warmup_frac);
    return floor_lr + 0.5 * (peak_lr - floor_lr) * (1.0 + std::cos(3.14159265358979323846 * s));
  }
};

/// AdamW with decoupled weight decay and global-norm gradient clipping.
template <typename T>
class AdamW {
 public:
  AdamW(ParamMap<T>& params, OneCycleSchedule schedule, double weight_decay = 1e-4,
        double clip_norm = 1.0, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : params_(params), schedule_(schedule), weight_decay_(weight_decay),
        clip_norm_(clip_norm), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& [_, t] : params_.params) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  long step_count() const { return step_; }
  double current_lr() const { return schedule_.lr_at(step_); }

  void step() {
    // global-norm clip
    double sq = 0.0;
    for (auto& [_, t] : params_.params)
      for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    const double clip =
        (clip_norm_ > 0.0 && norm > clip_norm_) ? clip_norm_ / norm : 1.0;

    const double lr = schedule_.lr_at(step_);
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t p = 0; p < params_.params.size(); ++p) {
      auto& t = params_.params[p].second;
      auto& val = t.data();
      auto& grad = t.grad();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < val.size(); ++i) {
        const double g = static_cast<double>(grad[i]) * clip;
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double x = static_cast<double>(val[i]);
        x -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * x);
        val[i] = static_cast<T>(x);
      }
    }
  }

 private:
  ParamMap<T>& params_;
  OneCycleSchedule schedule_;
  double weight_decay_, clip_norm_, beta1_, beta2_, eps_;
  long step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace ralf::nn
