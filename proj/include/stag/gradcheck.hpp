#pragma once

// Central-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stag/errors.hpp"
#include "stag/numkit.hpp"

namespace stag {

struct ValueAndGrad {
  double value = 0.0;
  RealVector grad;
};

using DifferentiableFn = std::function<ValueAndGrad(std::span<const double>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// |a - n| / max(|a|, |n|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Compares fn's analytic gradient at `point` with central differences of its
/// value, one coordinate at a time.
inline GradCheckResult grad_check(const DifferentiableFn& fn, std::span<const double> point, double step = 1e-5) {
  const ValueAndGrad at = fn(point);
  if (!std::isfinite(at.value) || !all_finite(at.grad)) {
    throw NumericalError("non-finite value or gradient at the check point");
  }
  require_same_length(at.grad.size(), point.size(), "grad_check gradient");
  RealVector x(point.begin(), point.end());
  GradCheckResult result;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double plus = fn(x).value;
    x[i] = saved - step;
    const double minus = fn(x).value;
    x[i] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NumericalError("non-finite value while perturbing coordinate " + std::to_string(i));
    }
    const double numeric = (plus - minus) / (2.0 * step);
    const double err = relative_error(at.grad[i], numeric);
    if (i == 0 || err > result.max_rel_error) result = GradCheckResult{err, i, at.grad[i], numeric};
  }
  return result;
}

}  // namespace stag
