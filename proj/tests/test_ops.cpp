#include <cmath>

#include "doctest.h"
#include "hyperconv/gradcheck.hpp"
#include "hyperconv/ops.hpp"
#include "hyperconv/parallel.hpp"
#include "oracles.hpp"

using namespace hconv;
using oracle::random_tensor;

namespace {
constexpr double kGradTol = 1e-4;

double check1(const std::function<Var<double>(const Var<double>&)>& f, Tensor<double> x) {
  return grad_check([&](const std::vector<Var<double>>& in) { return f(in[0]); }, {std::move(x)});
}
}  // namespace

TEST_CASE("conv2d matches direct summation") {
  Rng rng(11);
  int cases = 0;
  for (int k : {1, 3, 5})
    for (int d : {1, 2})
      for (int s : {1, 2})
        for (int hw : {4, 7, 8}) {
          if (d * (k - 1) + 1 > hw) continue;
          for (bool same : {true, false}) {
            auto x = random_tensor(Shape{2, 3, hw, hw + 1}, rng);
            auto w = random_tensor(Shape{4, 3, k, k}, rng);
            auto b = random_tensor(Shape{4}, rng);
            Conv2dOptions o{s, d, same ? Padding::Same : Padding::Valid};
            auto y = conv2d(Var<double>(x), Var<double>(w), Var<double>(b), o);
            auto ref = oracle::conv2d_direct(x, w, &b, s, d, same);
            REQUIRE(y.shape() == ref.shape());
            CHECK(oracle::max_rel_diff(y.value(), ref) < 1e-12);
            ++cases;
          }
        }
  CHECK(cases > 50);
}

TEST_CASE("conv2d with a centered delta kernel is the identity") {
  Rng rng(2);
  auto x = random_tensor(Shape{1, 1, 6, 6}, rng);
  Tensor<double> w(Shape{1, 1, 5, 5});
  w.at({0, 0, 2, 2}) = 1.0;
  auto y = conv2d(Var<double>(x), Var<double>(w), Var<double>(), {1, 2, Padding::Same});
  CHECK(y.value() == x);
}

TEST_CASE("conv2d rejects bad shapes") {
  Var<double> x(Tensor<double>(Shape{1, 2, 5, 5}));
  CHECK_THROWS_AS(conv2d(x, Var<double>(Tensor<double>(Shape{1, 3, 3, 3})), Var<double>()), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Var<double>(Tensor<double>(Shape{1, 2, 2, 2})), Var<double>()), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Var<double>(Tensor<double>(Shape{1, 2, 7, 7})), Var<double>(), {1, 1, Padding::Valid}), ShapeError);
}

TEST_CASE("conv2d gradients") {
  Rng rng(5);
  for (int d : {1, 2})
    for (int s : {1, 2}) {
      auto x = random_tensor(Shape{2, 2, 6, 5}, rng);
      auto w = random_tensor(Shape{3, 2, 3, 3}, rng);
      auto b = random_tensor(Shape{3}, rng);
      auto proj = random_tensor(Shape{2, 3, (6 + s - 1) / s, (5 + s - 1) / s}, rng);
      const double err = grad_check(
          [&](const std::vector<Var<double>>& in) {
            return sum(mul(conv2d(in[0], in[1], in[2], {s, d, Padding::Same}), Var<double>(proj)));
          },
          {x, w, b});
      CHECK(err < kGradTol);
    }
}

TEST_CASE("conv2d is bit-identical across thread counts") {
  Rng rng(8);
  auto x = random_tensor(Shape{4, 3, 9, 9}, rng);
  auto w = random_tensor(Shape{5, 3, 3, 3}, rng);
  auto run = [&](int threads) {
    set_num_threads(threads);
    auto wv = Var<double>::parameter(w);
    auto xv = Var<double>::parameter(x);
    backward(sum(square(conv2d(xv, wv, Var<double>()))));
    return std::pair{wv.grad(), xv.grad()};
  };
  auto a = run(1);
  auto b = run(3);
  set_num_threads(1);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("elementwise and matrix primitive gradients") {
  Rng rng(9);
  auto a = random_tensor(Shape{3, 4}, rng);
  auto b = random_tensor(Shape{3, 4}, rng);
  auto c = random_tensor(Shape{4, 2}, rng);
  CHECK(grad_check([](const auto& in) { return sum(mul(add(in[0], in[1]), sub(in[0], in[1]))); }, {a, b}) < kGradTol);
  CHECK(grad_check([](const auto& in) { return mean(square(scale(in[0], 1.5))); }, {a}) < kGradTol);
  CHECK(grad_check([](const auto& in) { return sum(square(matmul(in[0], in[1]))); }, {a, c}) < kGradTol);
  CHECK(check1([](const auto& x) { return sum(square(transpose2d(x))); }, a) < kGradTol);
  CHECK(check1([](const auto& x) { return sum(square(reshape(x, Shape{2, 6}))); }, a) < kGradTol);
  auto w = random_tensor(Shape{5, 4}, rng);
  auto bias = random_tensor(Shape{5}, rng);
  CHECK(grad_check([](const auto& in) { return sum(square(linear(in[0], in[1], in[2]))); }, {a, w, bias}) < kGradTol);

  auto p = random_tensor(Shape{2, 3, 4}, rng);
  auto q = random_tensor(Shape{2, 3, 5}, rng);
  auto r = random_tensor(Shape{2, 4, 5}, rng);
  CHECK(grad_check([](const auto& in) { return sum(square(bmm(in[0], in[1], true, false))); }, {p, q}) < kGradTol);
  CHECK(grad_check([](const auto& in) { return sum(square(bmm(in[0], in[1], false, true))); }, {q, r}) < kGradTol);
}

TEST_CASE("activation gradients") {
  Rng rng(10);
  // Keep samples away from the kink at zero.
  auto x = random_tensor(Shape{10}, rng, 0.1, 1.0);
  for (int i = 0; i < 10; i += 2) x[i] = -x[i];
  auto proj = random_tensor(Shape{10}, rng);
  auto weighted = [&](Var<double> y) { return sum(mul(y, Var<double>(proj))); };
  CHECK(check1([&](const auto& v) { return weighted(leaky_relu(v, 0.1)); }, x) < kGradTol);
  CHECK(check1([&](const auto& v) { return weighted(relu(v)); }, x) < kGradTol);
  CHECK(check1([&](const auto& v) { return weighted(sigmoid(v)); }, x) < kGradTol);
  auto m = random_tensor(Shape{3, 5}, rng);
  auto pm = random_tensor(Shape{3, 5}, rng);
  CHECK(check1([&](const auto& v) { return sum(mul(softmax_lastdim(v), Var<double>(pm))); }, m) < kGradTol);
  CHECK_THROWS(leaky_relu(Var<double>(x), 1.5));
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  Tensor<double> x(Shape{2, 3}, std::vector<double>{1000, 1001, 1002, -5, 0, 5});
  auto y = softmax_lastdim(Var<double>(x)).value();
  CHECK(y[0] + y[1] + y[2] == doctest::Approx(1.0));
  CHECK(y[2] == doctest::Approx(std::exp(2.0) / (1 + std::exp(1.0) + std::exp(2.0))));
}

TEST_CASE("max pool matches a window-max oracle and routes gradients") {
  Rng rng(12);
  auto x = random_tensor(Shape{2, 3, 6, 8}, rng);
  auto y = max_pool2x2(Var<double>(x)).value();
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int r = 0; r < 3; ++r)
        for (int q = 0; q < 4; ++q) {
          double m = -1e9;
          for (int u = 0; u < 2; ++u)
            for (int v = 0; v < 2; ++v) m = std::max(m, x.at({n, c, 2 * r + u, 2 * q + v}));
          CHECK(y.at({n, c, r, q}) == m);
        }
  // Distinct, well-separated values so finite differences never cross a tie.
  auto spaced = x;
  for (std::int64_t i = 0; i < spaced.size(); ++i) spaced[i] = 0.01 * static_cast<double>((i * 37) % spaced.size());
  CHECK(check1([](const auto& v) { return sum(square(max_pool2x2(v))); }, spaced) < kGradTol);
  CHECK_THROWS_AS(max_pool2x2(Var<double>(Tensor<double>(Shape{1, 1, 5, 4}))), ShapeError);
}

TEST_CASE("upsample and concat") {
  Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  auto u = upsample2x_nearest(Var<double>(x)).value();
  CHECK(u.shape() == Shape{1, 1, 4, 4});
  CHECK(u.at({0, 0, 1, 1}) == 1.0);
  CHECK(u.at({0, 0, 3, 2}) == 4.0);
  Rng rng(13);
  auto a = random_tensor(Shape{2, 2, 3, 3}, rng);
  auto b = random_tensor(Shape{2, 1, 3, 3}, rng);
  auto cat = concat_channels(Var<double>(a), Var<double>(b)).value();
  CHECK(cat.at({1, 2, 2, 1}) == b.at({1, 0, 2, 1}));
  CHECK(cat.at({1, 1, 0, 2}) == a.at({1, 1, 0, 2}));
  auto pa = random_tensor(Shape{2, 3, 6, 6}, rng);
  CHECK(grad_check([&](const auto& in) { return sum(mul(upsample2x_nearest(concat_channels(in[0], in[1])), Var<double>(pa))); },
                   {a, b}) < kGradTol);
  CHECK_THROWS_AS(concat_channels(Var<double>(a), Var<double>(Tensor<double>(Shape{2, 1, 2, 3}))), ShapeError);
}

TEST_CASE("batch norm normalizes in train mode and uses running stats in eval") {
  Rng rng(14);
  auto x = random_tensor(Shape{4, 2, 3, 3}, rng, 2.0, 6.0);
  Var<double> gamma(Tensor<double>(Shape{2}, 1.0)), beta(Tensor<double>(Shape{2}, 0.0));
  BatchNormState<double> st(2);
  auto y = batch_norm2d(Var<double>(x), gamma, beta, st, Mode::Train).value();
  for (int c = 0; c < 2; ++c) {
    double m = 0, v = 0, xm = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 9; ++i) {
        const double e = y[(n * 2 + c) * 9 + i];
        m += e;
        v += e * e;
        xm += x[(n * 2 + c) * 9 + i];
      }
    CHECK(m / 36 == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(v / 36 == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(st.running_mean[c] == doctest::Approx(0.1 * xm / 36));
  }
  st.running_mean.fill(1.0);
  st.running_var.fill(4.0);
  auto e = batch_norm2d(Var<double>(x), gamma, beta, st, Mode::Eval).value();
  CHECK(e[5] == doctest::Approx((x[5] - 1.0) / std::sqrt(4.0 + 1e-5)));

  auto proj = random_tensor(Shape{4, 2, 3, 3}, rng);
  auto g0 = random_tensor(Shape{2}, rng), b0 = random_tensor(Shape{2}, rng);
  for (Mode mode : {Mode::Train, Mode::Eval}) {
    const double err = grad_check(
        [&](const auto& in) {
          BatchNormState<double> s(2);
          return sum(mul(batch_norm2d(in[0], in[1], in[2], s, mode), Var<double>(proj)));
        },
        {x, g0, b0});
    CHECK(err < kGradTol);
  }
}

TEST_CASE("dropout is inverted, seeded and identity in eval") {
  Tensor<double> x(Shape{1, 1, 40, 50}, 1.0);
  Var<double> v(x);
  auto a = dropout(v, 0.5, Mode::Train, 7).value();
  auto b = dropout(v, 0.5, Mode::Train, 7).value();
  auto c = dropout(v, 0.5, Mode::Train, 8).value();
  CHECK(a == b);
  CHECK_FALSE(a == c);
  int kept = 0;
  for (auto e : a.storage()) {
    CHECK((e == 0.0 || e == 2.0));
    kept += e != 0.0;
  }
  CHECK(std::abs(kept / 2000.0 - 0.5) < 0.05);
  CHECK(dropout(v, 0.5, Mode::Eval, 7).value() == x);
}

TEST_CASE("float and double paths agree") {
  Rng rng(15);
  auto x = random_tensor(Shape{1, 2, 7, 7}, rng);
  auto w = random_tensor(Shape{3, 2, 5, 5}, rng);
  auto yd = conv2d(Var<double>(x), Var<double>(w), Var<double>(), {1, 2, Padding::Same}).value();
  auto yf = conv2d(Var<float>(x.cast<float>()), Var<float>(w.cast<float>()), Var<float>(), {1, 2, Padding::Same}).value();
  CHECK(oracle::max_rel_diff(yd, yf.cast<double>()) < 1e-5);
}
