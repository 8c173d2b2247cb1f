#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "vmscan/tensor.hpp"

namespace vmscan {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Per-parameter first/second moment accumulators plus the step count.
struct OptimizerState {
  long step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  void init(const std::vector<Tensor*>& params) {
    step = 0;
    m.clear();
    v.clear();
    for (const Tensor* p : params) {
      m.emplace_back(p->shape());
      v.emplace_back(p->shape());
    }
  }
};

/// Linear warmup into polynomial decay. The warmup fraction mirrors the
/// reference schedule (1500 of 30000 iterations) scaled to any run length.
inline double poly_warmup_lr(long step, long total_steps, double base_lr,
                             double warmup_frac = 0.05, double power = 1.0) {
  if (total_steps < 1) return base_lr;
  const long warmup = std::max<long>(1, static_cast<long>(warmup_frac * static_cast<double>(total_steps)));
  if (step < warmup)
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double t = static_cast<double>(step - warmup) /
                   std::max(1.0, static_cast<double>(total_steps - warmup));
  return base_lr * std::pow(std::max(0.0, 1.0 - t), power);
}

/// One decoupled-weight-decay Adam update. lr overrides cfg.lr so a
/// schedule can drive it; pass cfg.lr for a constant rate.
inline void adamw_step(const std::vector<Tensor*>& params,
                       const std::vector<const Tensor*>& grads,
                       OptimizerState& state, const AdamWConfig& cfg, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adamw_step: params/grads/state size mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    if (!p.same_shape(m))
      throw std::invalid_argument("adamw_step: state shape mismatch");
    const bool has_grad = grads[i] && grads[i]->size() > 0;
    if (has_grad && !grads[i]->same_shape(p))
      throw std::invalid_argument("adamw_step: grad shape mismatch");
    for (long j = 0; j < p.size(); ++j) {
      const double g = has_grad ? (*grads[i])[j] : 0.0;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p[j]);
    }
  }
}

}  // namespace vmscan
