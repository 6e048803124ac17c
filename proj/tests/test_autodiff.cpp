#include <cmath>
#include <limits>

#include "doctest.h"
#include "hyperconv/autodiff.hpp"
#include "hyperconv/gradcheck.hpp"
#include "hyperconv/ops.hpp"
#include "hyperconv/optim.hpp"

using namespace hconv;

namespace {
Var<double> leaf(std::vector<double> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Var<double>::parameter(Tensor<double>(Shape{n}, std::move(v)));
}
}  // namespace

TEST_CASE("tape records execution order and runs in reverse") {
  auto x = leaf({1.0, 2.0});
  auto y = square(x);
  auto z = scale(y, 3.0);
  auto loss = sum(z);
  auto tape = Tape<double>::record(loss);
  REQUIRE(tape.size() == 4);
  CHECK(tape.nodes()[0] == x.node());
  CHECK(tape.nodes()[1] == y.node());
  CHECK(tape.nodes()[3] == loss.node());
  for (std::size_t i = 1; i < tape.size(); ++i) CHECK(tape.nodes()[i - 1]->seq < tape.nodes()[i]->seq);
  tape.backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  CHECK(x.grad()[1] == doctest::Approx(12.0));
}

TEST_CASE("shared subexpressions accumulate both paths") {
  auto x = leaf({3.0});
  auto y = mul(x, x);             // x^2
  auto loss = sum(add(y, mul(y, x)));  // x^2 + x^3
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2 * 3.0 + 3 * 9.0));
}

TEST_CASE("leaf gradients accumulate until zeroed") {
  auto x = leaf({1.0, -1.0});
  backward(sum(scale(x, 2.0)));
  backward(sum(scale(x, 2.0)));
  CHECK(x.grad()[0] == doctest::Approx(4.0));
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("backward rejects non-scalar and detached losses") {
  auto x = leaf({1.0, 2.0});
  CHECK_THROWS(backward(square(x)));
  CHECK_THROWS(backward(sum(x.detach())));
}

TEST_CASE("no-grad guard builds no graph") {
  auto x = leaf({1.0});
  Var<double> y;
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    y = square(x);
  }
  CHECK(grad_enabled());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("non-finite forward values raise a numerical error") {
  auto x = leaf({std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(square(x), NumericalError);
}

TEST_CASE("adam matches a hand-unrolled update") {
  // Two steps on f(w) = sum(w^2), w0 = [1, -2].
  auto w = leaf({1.0, -2.0});
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam<double> opt({w}, cfg);
  double ref[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 2; ++t) {
    opt.zero_grad();
    backward(sum(square(w)));
    opt.step();
    for (int i = 0; i < 2; ++i) {
      const double g = 2 * ref[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  CHECK(w.value()[0] == doctest::Approx(ref[0]).epsilon(1e-12));
  CHECK(w.value()[1] == doctest::Approx(ref[1]).epsilon(1e-12));
}

TEST_CASE("grad_check flags a wrong backward rule") {
  auto bad = [](const std::vector<Var<double>>& in) {
    Tensor<double> v = in[0].value();
    for (auto& e : v.storage()) e = e * e;
    auto y = make_op<double>("bad_square", std::move(v), {in[0]}, [](Node<double>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.parents[0]->value[i];  // missing factor 2
    });
    return sum(y);
  };
  CHECK(grad_check(bad, {Tensor<double>(Shape{3}, std::vector<double>{0.5, 1.0, 2.0})}) > 0.1);
}
