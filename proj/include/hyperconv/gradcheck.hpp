#pragma once

#include <functional>
#include <vector>

#include "hyperconv/autodiff.hpp"

namespace hconv {

using ScalarFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::int64_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares backward() against central differences for every element of every
/// input. Relative error is |a - n| / max(|a|, |n|, 1e-8). `fn` must be pure.
GradCheckReport grad_check_report(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs, double eps = 1e-3);

inline double grad_check(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs, double eps = 1e-3) {
  return grad_check_report(fn, inputs, eps).max_relative_error;
}

}  // namespace hconv
