#pragma once

#include <cstdint>
#include <vector>

#include "storm/autodiff.hpp"

namespace storm::num {

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Decoupled (AdamW) decay of matrix parameters; 0 is plain Adam.
  double weight_decay = 0.0;
};

struct OptimizerState {
  std::uint64_t step_count = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  AdamConfig config;
};

OptimizerState make_adam_state(const ParamSet& params, AdamConfig config = {});

// One bias-corrected Adam update from the gradients held in `params`.
//
// Gradients are validated before anything is touched; a non-finite entry
// aborts the step with a Numeric error naming the parameter. A tensor whose
// gradient is identically zero keeps its value bit-for-bit while its moments
// decay. Values are checked finite after the update.
void adam_step(ParamSet& params, OptimizerState& state);

// Rescales all gradients so their global L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_grad_norm(ParamSet& params, double max_norm);

}  // namespace storm::num
