#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dsbn/tensor.hpp"

namespace dsbn {

// Adam moments for an ordered parameter list. Moments are sized on the first
// step; later steps must pass the same parameter list.
struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// One bias-corrected Adam update, in place. Non-trainable parameters and
// parameters without an accumulated gradient are left untouched.
void adam_step(std::span<const Parameter> params, OptimizerState& state, double lr);

void zero_grads(std::span<const Parameter> params);

}  // namespace dsbn
