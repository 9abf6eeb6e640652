#include "g3dk/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace g3dk {

void adam_step(AdamState& state, const AdamConfig& cfg, std::span<Tensor*> params,
               std::span<const std::vector<double>*> grads, double lr_scale) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: params/grads count mismatch");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i]->data.size(), 0.0);
      state.v[i].assign(params[i]->data.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match params");

  state.step += 1;
  const double lr = cfg.lr * lr_scale;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const std::vector<double>& g = *grads[i];
    if (g.size() != p.data.size()) throw std::invalid_argument("adam_step: grad size mismatch at param " + std::to_string(i));
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw std::runtime_error("non-finite gradient at step " + std::to_string(state.step) + ", param " +
                                 std::to_string(i) + ", index " + std::to_string(j));
      }
      if (cfg.weight_decay != 0.0) p.data[j] -= lr * cfg.weight_decay * p.data[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.data[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double warmup_cosine_lr(std::int64_t step, std::int64_t total_steps, double warmup_ratio) {
  if (total_steps <= 0) return 1.0;
  const auto warmup = static_cast<std::int64_t>(warmup_ratio * static_cast<double>(total_steps));
  if (warmup > 0 && step < warmup) {
    return static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  const double denom = static_cast<double>(std::max<std::int64_t>(1, total_steps - warmup));
  const double progress = static_cast<double>(step - warmup) / denom;
  return 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(1.0, progress)));
}

}  // namespace g3dk
