#include <cmath>

#include "doctest.h"
#include "hyperconv/data.hpp"
#include "hyperconv/rng.hpp"

using namespace hconv;

namespace {
double psnr_ref(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) m += (a[i] - b[i]) * (a[i] - b[i]);
  m /= static_cast<double>(a.size());
  return 10 * std::log10(1.0 / m);
}
}  // namespace

TEST_CASE("blob generator is deterministic and meets its contract") {
  auto a = gen_blob_segmentation(3, 6, 32);
  auto b = gen_blob_segmentation(3, 6, 32);
  for (int i = 0; i < 6; ++i) {
    CHECK(a.samples[i].image == b.samples[i].image);
    CHECK(a.samples[i].target == b.samples[i].target);
  }
  // Samples depend on (seed, index) only.
  auto tail = gen_blob_segmentation(3, 2, 32, 4);
  CHECK(tail.samples[0].image == a.samples[4].image);
  CHECK_FALSE(gen_blob_segmentation(4, 1, 32).samples[0].image == a.samples[0].image);
  CHECK_THROWS(gen_blob_segmentation(1, 1, 48));
  CHECK_THROWS(gen_blob_segmentation(1, 1, 16));
}

TEST_CASE("blob targets are binary, bounded and brighter inside") {
  int brighter = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    auto s = make_blob_sample(17, i, 64);
    double fg = 0, in = 0, out = 0;
    for (std::int64_t p = 0; p < s.target.size(); ++p) {
      const float t = s.target[p];
      REQUIRE((t == 0.0f || t == 1.0f));
      CHECK((s.image[p] >= 0.0f && s.image[p] <= 1.0f));
      fg += t;
      (t > 0 ? in : out) += s.image[p];
    }
    const double frac = fg / 4096.0;
    CHECK(frac >= 0.005);
    CHECK(frac <= 0.30);
    brighter += (in / fg) > (out / (4096.0 - fg));
  }
  CHECK(brighter >= 990);
}

TEST_CASE("zero-filled reconstruction edge cases") {
  Rng rng(1);
  Tensor<double> img(Shape{1, 32, 32});
  for (auto& v : img.storage()) v = rng.uniform();
  auto ones = full_mask(32, 32).mask;
  auto same = undersample_zero_fill(img, ones);
  for (std::int64_t i = 0; i < img.size(); ++i) CHECK(std::abs(same[i] - img[i]) < 1e-6);

  Tensor<float> zeros(Shape{32, 32});
  CHECK(undersample_zero_fill(img, zeros).max_abs() == 0.0);

  Tensor<float> dc(Shape{32, 32});
  dc.at({16, 16}) = 1.0f;
  auto flat = undersample_zero_fill(img, dc);
  const double mean = img.mean();
  for (std::int64_t i = 0; i < img.size(); ++i) CHECK(flat[i] == doctest::Approx(mean).epsilon(1e-9));

  CHECK_THROWS_AS(undersample_zero_fill(img, Tensor<float>(Shape{16, 32})), ShapeError);
}

TEST_CASE("orthonormal transform preserves energy and inverts") {
  Rng rng(2);
  Tensor<double> img(Shape{8, 16});
  for (auto& v : img.storage()) v = rng.normal();
  auto f = fft2(img);
  double e0 = 0, e1 = 0;
  for (std::int64_t i = 0; i < img.size(); ++i) e0 += img[i] * img[i];
  for (auto& c : f) e1 += std::norm(c);
  CHECK(e1 == doctest::Approx(e0).epsilon(1e-10));
  auto back = ifft2(f, 8, 16);
  for (std::int64_t i = 0; i < img.size(); ++i) CHECK(back[static_cast<std::size_t>(i)].real() == doctest::Approx(img[i]));
  // DC coefficient is sum / sqrt(N).
  CHECK(f[0].real() == doctest::Approx(img.sum() / std::sqrt(128.0)));
}

TEST_CASE("variable-density masks") {
  int denser_center = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto m = make_vd_mask(64, 64, 8.0, seed);
    const double f = m.kept_fraction();
    CHECK(f >= 0.1225);
    CHECK(f <= 0.1275);
    CHECK(m.mask.at({32, 32}) == 1.0f);
    // Center block 4x4 around DC vs a corner 4x4 block.
    double c = 0, e = 0;
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        c += m.mask.at({30 + y, 30 + x});
        e += m.mask.at({y, x});
      }
    denser_center += c > e;
  }
  CHECK(denser_center == 100);
  CHECK(make_vd_mask(64, 64, 8.0, 5).mask == make_vd_mask(64, 64, 8.0, 5).mask);
  CHECK_THROWS(make_vd_mask(64, 64, 1.0, 0));
  CHECK_THROWS(make_vd_mask(32, 32, 200.0, 0));
}

TEST_CASE("reconstruction dataset inputs are zero-filled targets") {
  auto full = gen_recon_dataset(4, 2, 32, full_mask(32, 32));
  for (auto& s : full.samples)
    for (std::int64_t i = 0; i < s.image.size(); ++i) CHECK(std::abs(s.image[i] - s.target[i]) < 1e-6);
  auto mask = make_vd_mask(64, 64, 8.0, 1);
  auto d = gen_recon_dataset(4, 20, 64, mask);
  for (auto& s : d.samples) {
    const double p = psnr_ref(s.image.cast<double>(), s.target.cast<double>());
    CHECK(p > 5.0);
    CHECK(std::isfinite(p));
  }
  CHECK(d.samples[3].image == gen_recon_dataset(4, 20, 64, mask).samples[3].image);
  CHECK_THROWS(gen_recon_dataset(4, 1, 32, mask));
}

TEST_CASE("augmentation geometry") {
  auto s = make_blob_sample(5, 0, 64);
  auto id = apply_augment(s, AugmentParams{}, TaskKind::Segmentation);
  CHECK(id.image == s.image);
  CHECK(id.target == s.target);

  AugmentParams flip;
  flip.flip_h = true;
  auto once = apply_augment(s, flip, TaskKind::Segmentation);
  CHECK_FALSE(once.image == s.image);
  CHECK(once.image.at({0, 10, 0}) == s.image.at({0, 10, 63}));
  auto twice = apply_augment(once, flip, TaskKind::Segmentation);
  CHECK(twice.image == s.image);
  CHECK(twice.target == s.target);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = draw_augment(seed);
    CHECK(std::abs(p.angle_deg) <= 30.0);
    CHECK((p.scale >= 0.9 && p.scale <= 1.1));
    auto a = augment(s, seed, TaskKind::Segmentation);
    for (auto v : a.target.storage()) CHECK((v == 0.0f || v == 1.0f));

    // Forward then inverse transform keeps the mask overlap high.
    AugmentParams fwd{false, false, p.angle_deg, p.scale};
    AugmentParams inv{false, false, -p.angle_deg, 1.0 / p.scale};
    auto back = apply_augment(apply_augment(s, fwd, TaskKind::Segmentation), inv, TaskKind::Segmentation);
    double inter = 0, sa = 0, sb = 0;
    for (std::int64_t i = 0; i < s.target.size(); ++i) {
      inter += s.target[i] * back.target[i];
      sa += s.target[i];
      sb += back.target[i];
    }
    CHECK(2 * inter / (sa + sb) >= 0.95);
  }
}

TEST_CASE("noise models") {
  Tensor<float> img(Shape{1, 250, 400}, 0.5f);
  for (auto kind : {NoiseKind::Gaussian, NoiseKind::SaltPepper, NoiseKind::Speckle, NoiseKind::KspaceGaussian}) {
    CHECK(add_noise(img, {kind, 0.0, 3}) == img);
    CHECK(add_noise(img, {kind, 0.05, 3}) == add_noise(img, {kind, 0.05, 3}));
    CHECK_FALSE(add_noise(img, {kind, 0.05, 3}) == add_noise(img, {kind, 0.05, 4}));
  }
  auto sp = add_noise(img, {NoiseKind::SaltPepper, 0.1, 1});
  double altered = 0;
  for (auto v : sp.storage()) {
    altered += v != 0.5f;
    CHECK((v == 0.5f || v == 0.0f || v == 1.0f));
  }
  CHECK(std::abs(altered / 1e5 - 0.1) < 0.01);

  auto g = add_noise(img, {NoiseKind::Gaussian, 0.05, 2});
  double ms = 0;
  for (std::int64_t i = 0; i < g.size(); ++i) ms += (g[i] - 0.5) * (g[i] - 0.5);
  ms /= static_cast<double>(g.size());
  CHECK(std::abs(std::sqrt(ms) - 0.05) < 0.005);
  CHECK(std::abs(ms / (0.05 * 0.05) - 1.0) < 0.05);

  auto k = add_noise(img, {NoiseKind::KspaceGaussian, 0.05, 2});
  for (auto v : k.storage()) CHECK((v >= 0.0f && v <= 1.0f));
  CHECK_THROWS(add_noise(img, {NoiseKind::Gaussian, -1.0, 0}));
  CHECK_THROWS(parse_noise_kind("poisson"));
}
