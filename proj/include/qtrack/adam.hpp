#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "qtrack/autodiff.hpp"

namespace qtrack {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment estimates, one pair per parameter, plus the step counter.
template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  std::int64_t step = 0;

  explicit AdamState(const ParameterSet<T>& params, AdamConfig cfg = {}) : config(cfg) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      first_moment.emplace_back(params.value(i).shape());
      second_moment.emplace_back(params.value(i).shape());
    }
  }
};

/// One bias-corrected Adam update in place.
template <typename T>
void adam_step(ParameterSet<T>& params, const Gradients<T>& grads, AdamState<T>& state, double lr) {
  if (!(lr > 0.0)) throw Error("adam_step: learning rate must be positive, got " + std::to_string(lr));
  if (grads.size() != params.size() || state.first_moment.size() != params.size()) {
    throw DimensionError("adam_step: parameter/gradient/state counts disagree");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params.value(i).shape() || state.first_moment[i].shape() != params.value(i).shape()) {
      throw DimensionError("adam_step: shape mismatch for parameter " + params.name(i));
    }
  }
  ++state.step;
  const double b1 = state.config.beta1, b2 = state.config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const T step_size = static_cast<T>(lr / c1);
  const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
  const T eps = static_cast<T>(state.config.epsilon);
  const T tb1 = static_cast<T>(b1), tb2 = static_cast<T>(b2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params.value(i).data();
    const T* g = grads[i].data();
    T* m = state.first_moment[i].data();
    T* v = state.second_moment[i].data();
    const std::size_t n = grads[i].size();
    for (std::size_t j = 0; j < n; ++j) {
      m[j] = tb1 * m[j] + (T{1} - tb1) * g[j];
      v[j] = tb2 * v[j] + (T{1} - tb2) * g[j] * g[j];
      p[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_c2 + eps);
    }
  }
}

}  // namespace qtrack
