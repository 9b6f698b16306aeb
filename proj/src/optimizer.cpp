#include "dsbn/optimizer.hpp"

#include <cmath>

#include "dsbn/errors.hpp"
#include "dsbn/kernels.hpp"

namespace dsbn {

void adam_step(std::span<const Parameter> params, OptimizerState& state, double lr) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.tensor.size(), 0.0);
      state.second_moment.emplace_back(p.tensor.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size())
    throw DimensionError("optimizer state tracks " +
                         std::to_string(state.first_moment.size()) +
                         " parameters, given " + std::to_string(params.size()));
  ++state.step;
  const auto t = static_cast<double>(state.step);
  const kernels::AdamCoefficients coeff{lr,
                                        state.beta1,
                                        state.beta2,
                                        state.eps,
                                        1.0 - std::pow(state.beta1, t),
                                        1.0 - std::pow(state.beta2, t)};
  const auto& k = kernels::active();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor tensor = params[i].tensor;
    if (state.first_moment[i].size() != tensor.size())
      throw DimensionError("optimizer moment shape drifted for parameter " +
                           std::to_string(i));
    if (!params[i].trainable || !tensor.has_grad()) continue;
    k.adam_update(coeff, tensor.mutable_values(), tensor.grad(), state.first_moment[i],
                  state.second_moment[i]);
  }
}

void zero_grads(std::span<const Parameter> params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

}  // namespace dsbn
