#include <cmath>

#include "doctest.h"
#include "hyperconv/architectures.hpp"
#include "oracles.hpp"

using namespace hconv;

namespace {

UNetOptions unet(int c, int k, ConvMode mode = ConvMode::Standard, int n_last = 4) {
  UNetOptions o;
  o.init_channels = c;
  o.kernel_size = k;
  o.conv_mode = mode;
  o.hyper = HyperNetConfig::with_last_width(n_last);
  return o;
}

std::int64_t enumerated(const ArchitectureSpec& spec) { return Model<float>(spec, 1).summary().total; }

}  // namespace

// Totals below come from an independent layer-by-layer sum (not this code):
// four encoder levels of two convs, three decoder levels of a 3x3 up
// projection plus two convs, conv biases, BN gamma/beta and a 1x1 head.
TEST_CASE("UNet parameter totals") {
  CHECK(enumerated(build_unet(unet(32, 3))) == 2143329);
  CHECK(enumerated(build_unet(unet(32, 5))) == 5256801);
  CHECK(enumerated(build_unet(unet(32, 5, ConvMode::Hyper, 2))) == 718783);
  CHECK(enumerated(build_unet(unet(32, 5, ConvMode::Hyper, 4))) == 1194153);
  CHECK(enumerated(build_unet(unet(32, 5, ConvMode::Hyper, 8))) == 2144893);
  CHECK(enumerated(build_unet(unet(8, 5))) == 329625);
  CHECK(enumerated(build_unet(unet(8, 5, ConvMode::Hyper, 20))) == 315793);
  auto nl = unet(32, 3);
  nl.nonlocal_bottleneck = true;
  CHECK(enumerated(build_unet(nl)) == 2275041);
}

TEST_CASE("flat network parameter totals") {
  CHECK(enumerated(build_flat_cnn(ConvMode::Standard)) == 222838);
  CHECK(enumerated(build_flat_cnn(ConvMode::Hyper, HyperNetConfig{})) == 23362);
  CHECK(enumerated(build_flat_dilated_cnn(ConvMode::Standard)) == 461905);
  CHECK(enumerated(build_flat_dilated_cnn(ConvMode::Hyper, HyperNetConfig::with_last_width(8))) == 463193);
}

TEST_CASE("enumeration equals the closed form for every builder and mode") {
  std::vector<ArchitectureSpec> specs;
  for (auto mode : {ConvMode::Standard, ConvMode::Hyper}) {
    for (int k : {3, 5, 7}) specs.push_back(build_unet(unet(4, k, mode, 3)));
    auto nl = unet(4, 3, mode);
    nl.nonlocal_bottleneck = true;
    specs.push_back(build_unet(nl));
    specs.push_back(build_flat_cnn(mode));
    specs.push_back(build_flat_dilated_cnn(mode));
  }
  for (const auto& s : specs) {
    auto cf = closed_form_summary(s);
    auto em = Model<float>(s, 3).summary();
    CHECK(cf.total == em.total);
    REQUIRE(cf.layers.size() == em.layers.size());
    for (std::size_t i = 0; i < cf.layers.size(); ++i) CHECK(cf.layers[i].params == em.layers[i].params);
    std::int64_t sum = 0;
    for (auto& l : em.layers) sum += l.params;
    CHECK(sum == em.total);
  }
}

TEST_CASE("hyper UNet size does not depend on kernel size") {
  for (int nl : {2, 4, 8}) {
    const auto a = closed_form_summary(build_unet(unet(32, 3, ConvMode::Hyper, nl))).total;
    CHECK(closed_form_summary(build_unet(unet(32, 5, ConvMode::Hyper, nl))).total == a);
    CHECK(closed_form_summary(build_unet(unet(32, 7, ConvMode::Hyper, nl))).total == a);
  }
}

TEST_CASE("receptive fields") {
  CHECK(receptive_field(build_unet(unet(32, 3))).pixels == 68);
  CHECK(receptive_field(build_unet(unet(32, 5))).pixels == 128);
  CHECK(receptive_field(build_unet(unet(32, 7))).pixels == 188);
  auto dil = unet(32, 3);
  dil.dilation = 2;
  CHECK(receptive_field(build_unet(dil)).pixels == 128);
  CHECK(receptive_field(build_flat_dilated_cnn(ConvMode::Standard)).pixels == 89);
  // 1 + 2 + 4 + 8 + 4 + 2
  CHECK(receptive_field(build_flat_cnn(ConvMode::Standard)).pixels == 21);
  auto nl = unet(32, 3);
  nl.nonlocal_bottleneck = true;
  CHECK(receptive_field(build_unet(nl)).str() == "ALL");
  CHECK(receptive_field(build_unet(unet(32, 5, ConvMode::Hyper))).pixels == 128);
}

TEST_CASE("spec validation") {
  CHECK_THROWS(build_unet(unet(32, 4)));
  CHECK_THROWS(build_unet(unet(0, 3)));
  auto s = build_flat_cnn(ConvMode::Standard);
  s.layers[3].in_channels = 7;
  CHECK_THROWS(s.validate());
  s = build_flat_cnn(ConvMode::Standard);
  s.layers[0].inputs = {5};
  CHECK_THROWS(s.validate());
  s = build_flat_cnn(ConvMode::Hyper);
  CHECK(s.layers[0].kind == LayerKind::HyperConv);
  const auto& head = s.layers[s.layers.size() - 2];
  CHECK(head.kind == LayerKind::Conv);
  CHECK(head.kernel == 1);
  s.layers[s.layers.size() - 2].kind = LayerKind::HyperConv;
  s.layers[s.layers.size() - 2].hyper = HyperNetConfig{};
  CHECK_THROWS(s.validate());
}

TEST_CASE("UNet keeps spatial size and hyper mode keeps every activation shape") {
  Rng rng(4);
  for (int m : {3, 4}) {
    const int n = 1 << m;
    auto x = Var<float>(oracle::random_tensor(Shape{1, 1, n, n}, rng).cast<float>());
    Model<float> a(build_unet(unet(2, 3)), 1);
    Model<float> b(build_unet(unet(2, 3, ConvMode::Hyper)), 1);
    auto ya = a.forward(x);
    auto yb = b.forward(x);
    CHECK(ya.shape() == Shape{1, 1, n, n});
    CHECK(yb.shape() == ya.shape());
  }
}

TEST_CASE("non-local block against a hand-computed 1x2x2x2 case") {
  Rng rng(1);
  auto p = make_nonlocal_params<double>(2, rng);
  auto set = [](Var<double>& v, std::vector<double> data) { v.value_mut() = Tensor<double>(v.shape(), std::move(data)); };
  set(p.query_w, {1, 0});
  set(p.query_b, {0});
  set(p.key_w, {0, 1});
  set(p.key_b, {0});
  set(p.value_w, {1, 1});
  set(p.value_b, {0});
  set(p.out_w, {1, 2});
  set(p.out_b, {0, 0});
  Tensor<double> x(Shape{1, 2, 2, 2}, std::vector<double>{1, 0, 0, -1, 0.5, 1, -1, 0});
  Tensor<double> attn;
  auto y = nonlocal_block(Var<double>(x), p, &attn).value();
  const double expected_attn0[] = {0.28748998, 0.47399085, 0.06414769, 0.17437149};
  for (int j = 0; j < 4; ++j) CHECK(attn[j] == doctest::Approx(expected_attn0[j]).epsilon(1e-7));
  const double expected[] = {1.66670664, 0.125, 0.125, -1.52008664, 1.83341329, 1.25, -0.75, -1.04017329};
  for (int i = 0; i < 8; ++i) CHECK(y[i] == doctest::Approx(expected[i]).epsilon(1e-7));
}

TEST_CASE("non-local block rows normalize and zero projection is identity") {
  Rng rng(2);
  auto p = make_nonlocal_params<double>(6, rng);
  auto x = oracle::random_tensor(Shape{2, 6, 4, 3}, rng);
  Tensor<double> attn;
  nonlocal_block(Var<double>(x), p, &attn);
  CHECK(attn.shape() == Shape{2, 12, 12});
  for (int r = 0; r < 24; ++r) {
    double s = 0;
    for (int j = 0; j < 12; ++j) s += attn[r * 12 + j];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
  p.out_w.value_mut().fill(0.0);
  p.out_b.value_mut().fill(0.0);
  CHECK(nonlocal_block(Var<double>(x), p).value() == x);
}

TEST_CASE("model state round-trips and eval mode freezes hyper kernels") {
  auto spec = build_unet(unet(2, 3, ConvMode::Hyper));
  Model<float> a(spec, 5), b(spec, 6);
  Rng rng(3);
  auto x = Var<float>(oracle::random_tensor(Shape{2, 1, 8, 8}, rng).cast<float>());
  a.forward(x);  // moves running statistics
  b.load_state(a.state());
  a.set_mode(Mode::Eval);
  b.set_mode(Mode::Eval);
  CHECK(a.forward(x).value() == b.forward(x).value());
  auto ka = a.materialize_all();
  CHECK(ka.size() == b.materialize_all().size());
  CHECK(ka.front().kernel.shape() == Shape{2, 1, 3, 3});
  CHECK(ka.back().layer == "head");
  auto st = a.state();
  st.pop_back();
  CHECK_THROWS(b.load_state(st));
}

TEST_CASE("models are reproducible from their seed") {
  auto spec = build_flat_dilated_cnn(ConvMode::Hyper);
  Model<float> a(spec, 9), b(spec, 9), c(spec, 10);
  CHECK(a.state() == b.state());
  CHECK_FALSE(a.state() == c.state());
}
