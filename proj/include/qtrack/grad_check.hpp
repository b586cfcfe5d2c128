#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>

#include "qtrack/autodiff.hpp"

namespace qtrack {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates sampled per parameter; 0 checks every coordinate.
  std::size_t coords_per_param = 0;
  std::uint64_t seed = 0;
  /// Lower bound on the relative-error denominator so gradients that are zero up to
  /// roundoff do not report spurious huge errors.
  double denominator_floor = 1e-6;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// (f(x+eps) - f(x-eps)) / 2eps. The closure must be deterministic (no dropout).
template <typename T>
GradCheckResult grad_check(ParameterSet<T>& params, const std::function<Var<T>(Tape<T>&)>& loss_fn,
                           const GradCheckOptions& opts = {}) {
  auto evaluate = [&]() {
    Tape<T> tape(params);
    return static_cast<double>(loss_fn(tape).value().item());
  };

  Gradients<T> analytic;
  double base = 0.0;
  {
    Tape<T> tape(params);
    Var<T> loss = loss_fn(tape);
    base = static_cast<double>(loss.value().item());
    analytic = tape.backward(loss);
  }
  if (evaluate() != base) throw Error("grad_check: loss closure is not deterministic");

  std::mt19937_64 rng(opts.seed);
  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<T>& value = params.value(p);
    std::vector<std::size_t> coords(value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.coords_per_param && coords.size() > opts.coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.coords_per_param);
    }
    for (std::size_t idx : coords) {
      const T saved = value[idx];
      value[idx] = static_cast<T>(saved + opts.eps);
      const double plus = evaluate();
      value[idx] = static_cast<T>(saved - opts.eps);
      const double minus = evaluate();
      value[idx] = saved;
      const double numeric = (plus - minus) / (2.0 * opts.eps);
      const double a = static_cast<double>(analytic[p][idx]);
      const double err = relative_error(a, numeric, opts.denominator_floor);
      ++result.coords_checked;
      if (result.worst_param.empty() || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = params.name(p);
        result.worst_index = idx;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace qtrack
