#include "dsbn/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "dsbn/errors.hpp"

namespace dsbn {

double training_progress(std::int64_t step, std::int64_t max_iters) {
  if (max_iters <= 0) throw ConfigError("max_iters must be positive");
  return std::clamp(static_cast<double>(step) / static_cast<double>(max_iters), 0.0, 1.0);
}

double lambda_schedule(double p, double gamma_adapt) {
  if (!(p >= 0.0 && p <= 1.0)) {
    std::cerr << "warning: progress " << p << " outside [0, 1]; clamped\n";
    p = std::isnan(p) ? 0.0 : std::clamp(p, 0.0, 1.0);
  }
  return 2.0 / (1.0 + std::exp(-gamma_adapt * p)) - 1.0;
}

double lr_schedule(double p, const ScheduleParams& params) {
  return params.eta0 / std::pow(1.0 + params.alpha_lr * p, params.beta_lr);
}

}  // namespace dsbn
