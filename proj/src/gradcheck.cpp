#include "hyperconv/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace hconv {

namespace {

double evaluate(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs) {
  NoGradGuard guard;
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.emplace_back(t, false);
  const auto out = fn(vars);
  if (out.value().size() != 1) throw ShapeError("grad_check: function must return a scalar");
  return out.value()[0];
}

}  // namespace

GradCheckReport grad_check_report(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs, double eps) {
  std::vector<Var<double>> params;
  params.reserve(inputs.size());
  for (const auto& t : inputs) params.push_back(Var<double>::parameter(t));
  const auto loss = fn(params);
  if (loss.value().size() != 1) throw ShapeError("grad_check: function must return a scalar");
  backward(loss);

  GradCheckReport rep;
  auto probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = params[k].grad();
    for (std::int64_t i = 0; i < probe[k].size(); ++i) {
      const double orig = probe[k][i];
      probe[k][i] = orig + eps;
      const double up = evaluate(fn, probe);
      probe[k][i] = orig - eps;
      const double down = evaluate(fn, probe);
      probe[k][i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > rep.max_relative_error) {
        rep = {rel, k, i, a, numeric};
      }
    }
  }
  return rep;
}

}  // namespace hconv
