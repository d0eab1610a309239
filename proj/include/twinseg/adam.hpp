#pragma once

#include "twinseg/parameter_store.hpp"

#include <map>
#include <string>
#include <vector>

namespace twinseg {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers keyed by parameter name.
struct AdamState {
  explicit AdamState(AdamConfig config = {}) : config(config) {}

  AdamConfig config;
  std::size_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

/// One bias-corrected Adam update of every trainable entry; gradients are
/// zeroed afterwards. Throws if a trainable entry has no gradient buffer.
void adam_step(ParameterStore& params, AdamState& state);

}  // namespace twinseg
