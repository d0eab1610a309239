#include "twinseg/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace twinseg {

void adam_step(ParameterStore& params, AdamState& state) {
  for (const auto& [name, e] : params)
    if (e.kind == EntryKind::trainable && !e.tensor.has_grad())
      throw std::logic_error("adam_step: trainable parameter '" + name + "' has no gradient");

  const auto& cfg = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, e] : params) {
    if (e.kind != EntryKind::trainable) continue;
    auto& m = state.m[name];
    auto& v = state.v[name];
    const std::size_t n = e.tensor.numel();
    if (m.size() != n) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    }
    auto p = e.tensor.mutable_values();
    auto g = e.tensor.mutable_grad();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      g[i] = 0.0;
    }
  }
}

}  // namespace twinseg
