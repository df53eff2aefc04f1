#pragma once

#include "voxfuse/tensor.hpp"

#include <cstdint>
#include <vector>

namespace vf {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  NamedTensors first_moment;
  NamedTensors second_moment;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update over every tensor in `params`, all sharing one step counter.
/// A parameter without an entry in `grads` is updated with a zero gradient.
void adam_step(std::span<ParameterSet* const> params, const NamedTensors& grads, AdamState& state);

inline void adam_step(ParameterSet& params, const NamedTensors& grads, AdamState& state) {
  ParameterSet* sets[] = {&params};
  adam_step(sets, grads, state);
}

}  // namespace vf
