#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "g3dk/tensor.hpp"

namespace g3dk {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

/// First/second moment buffers, one pair per parameter, plus the step count.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step = 0;
};

/// One AdamW update over a parameter list. `grads[i]` must match
/// `params[i]` in size. Throws std::runtime_error naming the step index if
/// any gradient is non-finite. `lr_scale` multiplies cfg.lr (for schedules).
void adam_step(AdamState& state, const AdamConfig& cfg, std::span<Tensor*> params,
               std::span<const std::vector<double>*> grads, double lr_scale = 1.0);

/// Linear warmup to base lr over warmup_ratio * total steps, then cosine
/// decay to zero. `step` is 0-based.
double warmup_cosine_lr(std::int64_t step, std::int64_t total_steps, double warmup_ratio);

}  // namespace g3dk
