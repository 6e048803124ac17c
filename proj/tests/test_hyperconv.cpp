#include <cmath>

#include "doctest.h"
#include "hyperconv/gradcheck.hpp"
#include "hyperconv/hyperconv.hpp"
#include "oracles.hpp"

using namespace hconv;

TEST_CASE("coordinate grid is centered and normalized") {
  auto g = make_coordinate_grid(5, 3);
  CHECK(g.coords.shape() == Shape{2, 5, 3});
  CHECK(g.coords.at({0, 2, 1}) == 0.0);
  CHECK(g.coords.at({1, 2, 1}) == 0.0);
  CHECK(g.coords.at({0, 0, 0}) == -1.0);
  CHECK(g.coords.at({0, 4, 0}) == 1.0);
  CHECK(g.coords.at({1, 3, 2}) == 1.0);
  CHECK(g.coords.at({0, 1, 1}) == -0.5);
  auto one = make_coordinate_grid(1, 1);
  CHECK(one.coords.at({0, 0, 0}) == 0.0);
  CHECK_THROWS(make_coordinate_grid(4, 3));
  CHECK_THROWS(make_coordinate_grid(0, 3));
  auto rot = g.rotated180();
  CHECK(rot.coords.at({0, 0, 0}) == 1.0);
  auto rows = g.as_rows();
  CHECK(rows.shape() == Shape{15, 2});
  CHECK(rows.at({14, 0}) == 1.0);
  CHECK(rows.at({14, 1}) == 1.0);
}

TEST_CASE("closed-form parameter counts") {
  CHECK(count_params_standard(3, 3, 16, 32, true) == 4640);
  CHECK(count_params_standard(9, 9, 25, 81, false) == 81 * 25 * 81);
  // Hidden layers 2->4->4->4->4: 12 + 20 + 20 + 20 = 72, final (4+1)*32*32 = 5120.
  auto c = count_params_hyper(HyperNetConfig{}, 32, 32, false);
  CHECK(c.exact == 5192);
  CHECK(c.approximate == 5120);
  CHECK(count_params_hyper(HyperNetConfig{}, 32, 32, true).exact == 5224);
  CHECK(count_params_hyper(HyperNetConfig::with_last_width(8), 3, 5, true).exact == (3 * 4 + 5 * 4 + 5 * 4 + 5 * 8) + 9 * 15 + 5);
  CHECK_THROWS(count_params_hyper(HyperNetConfig{{4, 0, 4, 4}}, 1, 1, true));
}

TEST_CASE("layer enumeration matches the closed form") {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const int k = 1 + 2 * static_cast<int>(rng.below(4));
    const int nin = 1 + static_cast<int>(rng.below(6));
    const int nout = 1 + static_cast<int>(rng.below(6));
    HyperNetConfig cfg{{1 + (int)rng.below(5), 1 + (int)rng.below(5), 1 + (int)rng.below(5), 1 + (int)rng.below(9)}};
    HyperConvLayer<double> layer(k, k, nin, nout, cfg, rng);
    CHECK(layer.parameter_count() == count_params_hyper(cfg, nin, nout, true).exact);
    CHECK(layer.kernel().shape() == Shape{nout, nin, k, k});
  }
}

TEST_CASE("constant coordinate network yields a constant kernel") {
  Rng rng(2);
  HyperConvLayer<double> layer(5, 5, 2, 3, HyperNetConfig{}, rng);
  layer.weight(0).value_mut().fill(0.0);
  auto k = layer.kernel().value();
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 2; ++i)
      for (int t = 1; t < 25; ++t) CHECK(k[(o * 2 + i) * 25 + t] == doctest::Approx(k[(o * 2 + i) * 25]));
}

TEST_CASE("generated kernel entries follow the coordinate network") {
  // Recompute one tap by hand: h = leaky(W h + b) four times, then W4 h + b4.
  Rng rng(3);
  HyperConvLayer<double> layer(3, 3, 2, 2, HyperNetConfig{{3, 2, 4, 5}}, rng);
  auto k = layer.kernel().value();
  auto g = layer.grid();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      std::vector<double> h{g.coords.at({0, r, c}), g.coords.at({1, r, c})};
      for (int l = 0; l < 5; ++l) {
        const auto& W = layer.weight(l).value();
        const auto& b = layer.layer_bias(l).value();
        std::vector<double> nx(static_cast<std::size_t>(W.dim(0)));
        for (std::int64_t o = 0; o < W.dim(0); ++o) {
          double s = b[o];
          for (std::int64_t i = 0; i < W.dim(1); ++i) s += W.at({o, i}) * h[static_cast<std::size_t>(i)];
          nx[static_cast<std::size_t>(o)] = (l < 4 && s < 0) ? 0.1 * s : s;
        }
        h = nx;
      }
      // Output unit j maps to (out = j / n_in, in = j % n_in).
      for (int j = 0; j < 4; ++j) CHECK(k.at({j / 2, j % 2, r, c}) == doctest::Approx(h[static_cast<std::size_t>(j)]));
    }
}

TEST_CASE("generated kernels start with fan-in scale") {
  Rng rng(4);
  HyperConvLayer<double> layer(5, 5, 32, 32, HyperNetConfig::with_last_width(8), rng);
  auto k = layer.kernel().value();
  double v = 0;
  for (auto e : k.storage()) v += e * e;
  v /= static_cast<double>(k.size());
  const double target = 1.0 / (3.0 * 32 * 25);
  CHECK(v > 0.5 * target);
  CHECK(v < 2.0 * target);
}

TEST_CASE("hyperconv forward equals conv2d with the materialized kernel") {
  Rng rng(5);
  HyperConvLayer<double> layer(5, 5, 3, 4, HyperNetConfig{}, rng);
  auto x = oracle::random_tensor(Shape{2, 3, 8, 8}, rng);
  Conv2dOptions o{1, 2, Padding::Same};
  auto y = layer.forward(Var<double>(x), o).value();
  auto ref = oracle::conv2d_direct(x, layer.kernel().value(), &layer.bias().value(), 1, 2, true);
  CHECK(oracle::max_rel_diff(y, ref) < 1e-12);
  CHECK_THROWS_AS(layer.forward(Var<double>(Tensor<double>(Shape{1, 2, 8, 8})), o), ShapeError);
}

TEST_CASE("freezing caches the kernel until unfrozen") {
  Rng rng(6);
  HyperConvLayer<double> layer(3, 3, 1, 1, HyperNetConfig{}, rng);
  auto before = layer.kernel().value();
  layer.freeze();
  CHECK(layer.frozen());
  layer.weight(4).value_mut().fill(0.0);
  CHECK(layer.kernel().value() == before);
  CHECK_FALSE(layer.kernel().requires_grad());
  layer.unfreeze();
  CHECK_FALSE(layer.kernel().value() == before);
}

TEST_CASE("hyperconv gradients with respect to the coordinate network") {
  Rng rng(7);
  HyperConvLayer<double> proto(3, 3, 2, 2, HyperNetConfig{{3, 3, 3, 3}}, rng);
  auto x = oracle::random_tensor(Shape{1, 2, 5, 5}, rng);
  auto proj = oracle::random_tensor(Shape{1, 2, 5, 5}, rng);
  std::vector<Tensor<double>> theta;
  for (auto& p : proto.parameters()) theta.push_back(p.value());
  const double err = grad_check(
      [&](const std::vector<Var<double>>& in) {
        HyperConvLayer<double> layer = proto;
        for (int l = 0; l < 5; ++l) {
          layer.weight(l) = in[static_cast<std::size_t>(2 * l)];
          layer.layer_bias(l) = in[static_cast<std::size_t>(2 * l + 1)];
        }
        layer.bias() = in[10];
        return sum(mul(layer.forward(Var<double>(x), {}), Var<double>(proj)));
      },
      theta);
  CHECK(err < 1e-4);
}
