#pragma once

#include <cstdint>

namespace dsbn {

struct ScheduleParams {
  double gamma_adapt = 10.0;  // steepness of the adaptation-factor ramp
  double eta0 = 1e-4;         // initial learning rate
  double alpha_lr = 10.0;
  double beta_lr = 0.75;
  std::int64_t max_iters = 3000;
};

// Training progress step / max_iters in [0, 1].
double training_progress(std::int64_t step, std::int64_t max_iters);

// 2 / (1 + exp(-gamma * p)) - 1. p outside [0, 1] is clamped with a warning.
double lambda_schedule(double p, double gamma_adapt);

// eta0 / (1 + alpha * p)^beta
double lr_schedule(double p, const ScheduleParams& params);

}  // namespace dsbn
