#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "landiff/common.hpp"
#include "landiff/tensor.hpp"

namespace landiff {

// Linear warmup to peak_lr, then cosine decay ending at final_factor * peak_lr
// when step == total_steps.
inline double warmup_cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps,
                               double peak_lr, double final_factor = 0.1) {
  if (total_steps <= 0 || warmup_steps < 0 || warmup_steps > total_steps)
    throw config_error("warmup_cosine_lr: invalid step counts");
  if (step < 0) throw config_error("warmup_cosine_lr: negative step");
  if (step < warmup_steps) return peak_lr * double(step + 1) / double(warmup_steps);
  const double final_lr = final_factor * peak_lr;
  if (total_steps == warmup_steps) return final_lr;
  double progress = double(step - warmup_steps) / double(total_steps - warmup_steps);
  progress = std::min(progress, 1.0);
  return final_lr + (peak_lr - final_lr) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// In-place AdamW update on a raw parameter buffer. Weight decay is decoupled
// (applied to the value, not the gradient); t is the 1-based step count.
inline void adamw_update(std::vector<real>& value, const std::vector<real>& grad,
                         std::vector<real>& m, std::vector<real>& v, int64_t t, double lr,
                         double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8) {
  const double bc1 = 1.0 - std::pow(beta1, double(t));
  const double bc2 = 1.0 - std::pow(beta2, double(t));
  for (size_t i = 0; i < value.size(); ++i) {
    const double g = double(grad[i]);
    if (!std::isfinite(g)) throw numeric_error("adamw_update: non-finite gradient");
    const double mi = beta1 * double(m[i]) + (1.0 - beta1) * g;
    const double vi = beta2 * double(v[i]) + (1.0 - beta2) * g * g;
    m[i] = real(mi);
    v[i] = real(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    value[i] = real(double(value[i]) - lr * (mhat / (std::sqrt(vhat) + eps) +
                                             weight_decay * double(value[i])));
  }
}

struct AdamWConfig {
  double peak_lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t total_steps = 1000;
  int64_t warmup_steps = 50;
  double final_lr_factor = 0.1;
};

// Owns first/second-moment state for a fixed parameter list. Parameters are
// Tensor handles sharing their buffers with the model.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      if (!p.requires_grad || !p.grad)
        throw config_error("AdamW: parameter without gradient buffer");
      m_.emplace_back(p.numel(), real(0));
      v_.emplace_back(p.numel(), real(0));
    }
  }

  int64_t step_count() const { return step_; }
  double current_lr() const {
    return warmup_cosine_lr(std::min(step_, cfg_.total_steps), cfg_.total_steps,
                            cfg_.warmup_steps, cfg_.peak_lr, cfg_.final_lr_factor);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // Applies one update using the schedule at the current step, then advances.
  void step() {
    const double lr = warmup_cosine_lr(step_, cfg_.total_steps, cfg_.warmup_steps, cfg_.peak_lr,
                                       cfg_.final_lr_factor);
    ++step_;
    for (size_t i = 0; i < params_.size(); ++i)
      adamw_update(*params_[i].data, *params_[i].grad, m_[i], v_[i], step_, lr,
                   cfg_.weight_decay, cfg_.beta1, cfg_.beta2, cfg_.eps);
  }

 private:
  std::vector<Tensor> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<real>> m_, v_;
  int64_t step_ = 0;
};

}  // namespace landiff
