#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "equitempo/numerics/tensor.hpp"

namespace equitempo {

// Adam with bias correction. Moment buffers are created lazily on the first
// step and stay aligned with the parameter list by position; step_count
// increments once per adam_step call.
template <typename Scalar>
struct AdamState {
  Scalar learning_rate = Scalar(0.001);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar epsilon = Scalar(1e-8);
  std::int64_t step_count = 0;
  std::vector<ArrayX<Scalar>> first_moment;
  std::vector<ArrayX<Scalar>> second_moment;
};

// One optimizer update over all parameters. Gradients must be populated
// (caller runs backward first) and are left untouched so the caller decides
// when to zero them.
template <typename Scalar>
void adam_step(std::vector<Tensor<Scalar>>& params, AdamState<Scalar>& state) {
  if (state.first_moment.empty()) {
    state.first_moment.resize(params.size());
    state.second_moment.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first_moment[i] = ArrayX<Scalar>::Zero(params[i].numel());
      state.second_moment[i] = ArrayX<Scalar>::Zero(params[i].numel());
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw TensorError("adam_step: state tracks " +
                      std::to_string(state.first_moment.size()) + " parameters, got " +
                      std::to_string(params.size()));
  }
  for (auto& p : params) {
    if (!p.has_grad()) {
      throw TensorError("adam_step: parameter '" + p.name() + "' has no gradient");
    }
  }

  state.step_count += 1;
  const Scalar c1 =
      Scalar(1) - std::pow(state.beta1, static_cast<Scalar>(state.step_count));
  const Scalar c2 =
      Scalar(1) - std::pow(state.beta2, static_cast<Scalar>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = params[i].grad();
    if (m.size() != g.size()) {
      throw TensorError("adam_step: parameter '" + params[i].name() +
                        "' changed size under the optimizer");
    }
    m = state.beta1 * m + (Scalar(1) - state.beta1) * g;
    v = state.beta2 * v + (Scalar(1) - state.beta2) * g * g;
    params[i].values() -=
        state.learning_rate * (m / c1) / ((v / c2).sqrt() + state.epsilon);
  }
}

}  // namespace equitempo
