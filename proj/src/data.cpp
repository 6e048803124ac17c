#include "hyperconv/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <unsupported/Eigen/FFT>

#include "hyperconv/rng.hpp"

namespace hconv {

std::string to_string(TaskKind t) { return t == TaskKind::Segmentation ? "segmentation" : "reconstruction"; }

TaskKind parse_task(const std::string& s) {
  if (s == "segmentation") return TaskKind::Segmentation;
  if (s == "reconstruction") return TaskKind::Reconstruction;
  throw std::invalid_argument("unknown task '" + s + "' (expected segmentation or reconstruction)");
}

std::string to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::Gaussian: return "gaussian";
    case NoiseKind::SaltPepper: return "salt_pepper";
    case NoiseKind::Speckle: return "speckle";
    case NoiseKind::KspaceGaussian: return "kspace_gaussian";
  }
  return "?";
}

NoiseKind parse_noise_kind(const std::string& s) {
  if (s == "gaussian") return NoiseKind::Gaussian;
  if (s == "salt_pepper") return NoiseKind::SaltPepper;
  if (s == "speckle") return NoiseKind::Speckle;
  if (s == "kspace_gaussian") return NoiseKind::KspaceGaussian;
  throw std::invalid_argument("unknown noise kind '" + s + "'");
}

double MaskSpec::kept_fraction() const {
  if (mask.size() == 0) return 0.0;
  return static_cast<double>(mask.sum()) / static_cast<double>(mask.size());
}

namespace {

Tensor<float> stack(const std::vector<Sample>& samples, const std::vector<std::int64_t>& idx, bool target) {
  if (idx.empty()) throw std::invalid_argument("cannot stack an empty batch");
  const auto& first = target ? samples.at(static_cast<std::size_t>(idx[0])).target : samples.at(static_cast<std::size_t>(idx[0])).image;
  Shape shape{static_cast<std::int64_t>(idx.size())};
  for (auto d : first.shape()) shape.push_back(d);
  Tensor<float> out(shape);
  const auto per = first.size();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& s = samples.at(static_cast<std::size_t>(idx[b]));
    const auto& t = target ? s.target : s.image;
    if (t.size() != per) throw ShapeError("samples in a batch have different shapes");
    std::copy(t.ptr(), t.ptr() + per, out.ptr() + static_cast<std::int64_t>(b) * per);
  }
  return out;
}

void check_size(int size) {
  if (size < 32 || (size & (size - 1)) != 0) throw std::invalid_argument("image size must be a power of two >= 32, got " + std::to_string(size));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Tensor<float> Dataset::images(const std::vector<std::int64_t>& idx) const { return stack(samples, idx, false); }
Tensor<float> Dataset::targets(const std::vector<std::int64_t>& idx) const { return stack(samples, idx, true); }

// ---------------------------------------------------------------------------
// Blob segmentation

Sample make_blob_sample(std::uint64_t seed, std::int64_t index, int size) {
  check_size(size);
  const Rng base = Rng(seed, 0xB10B).split(static_cast<std::uint64_t>(index));
  const double n = size;
  for (std::uint64_t attempt = 0; attempt < 1000; ++attempt) {
    Rng r = base.split(attempt);
    Tensor<float> image(Shape{1, size, size});
    Tensor<float> target(Shape{1, size, size});
    std::vector<double> intensity(static_cast<std::size_t>(size) * size, 0.0);

    // Low-frequency background: a few slow cosines around a random level.
    const double level = r.uniform(0.15, 0.3);
    for (double& v : intensity) v = level;
    for (int m = 0; m < 4; ++m) {
      const double fy = r.uniform(-2.0, 2.0), fx = r.uniform(-2.0, 2.0);
      const double phase = r.uniform(0.0, 2 * std::numbers::pi), amp = r.uniform(0.01, 0.04);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          intensity[static_cast<std::size_t>(y * size + x)] += amp * std::cos(2 * std::numbers::pi * (fy * y + fx * x) / n + phase);
    }

    const int blobs = 1 + static_cast<int>(r.below(4));
    for (int b = 0; b < blobs; ++b) {
      const double cy = r.uniform(0.15, 0.85) * n, cx = r.uniform(0.15, 0.85) * n;
      const double ay = r.uniform(0.04, 0.16) * n, ax = r.uniform(0.04, 0.16) * n;
      const double th = r.uniform(0.0, std::numbers::pi), amp = r.uniform(0.35, 0.55);
      const double c = std::cos(th), s = std::sin(th);
      const double sharp = std::min(ay, ax) / 1.5;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double dy = y - cy, dx = x - cx;
          const double u = (c * dy + s * dx) / ay, v = (-s * dy + c * dx) / ax;
          const double rho = std::sqrt(u * u + v * v);
          const auto p = static_cast<std::size_t>(y * size + x);
          intensity[p] += amp * sigmoid((1.0 - rho) * sharp);
          if (rho <= 1.0) target[static_cast<std::int64_t>(p)] = 1.0f;
        }
    }
    const double fg = static_cast<double>(target.sum()) / (n * n);
    if (fg < 0.005 || fg > 0.30) continue;
    for (std::size_t p = 0; p < intensity.size(); ++p) {
      const double v = intensity[p] + r.normal(0.0, 0.03);
      image[static_cast<std::int64_t>(p)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    return Sample{std::move(image), std::move(target), mix64(base.key() + attempt)};
  }
  throw std::runtime_error("blob generator failed to meet the foreground bounds");
}

Dataset gen_blob_segmentation(std::uint64_t seed, std::int64_t count, int size, std::int64_t first_index) {
  check_size(size);
  if (count < 0) throw std::invalid_argument("sample count must be non-negative");
  Dataset d;
  d.task = TaskKind::Segmentation;
  d.size = size;
  d.seed = seed;
  for (std::int64_t i = 0; i < count; ++i) d.samples.push_back(make_blob_sample(seed, first_index + i, size));
  return d;
}

// ---------------------------------------------------------------------------
// Phantoms

Tensor<float> make_phantom(std::uint64_t seed, std::int64_t index, int size) {
  check_size(size);
  Rng r = Rng(seed, 0x9A47).split(static_cast<std::uint64_t>(index));
  const double n = size;
  std::vector<double> img(static_cast<std::size_t>(size) * size, 0.0);
  auto paint = [&](double cy, double cx, double ay, double ax, double th, double value) {
    const double c = std::cos(th), s = std::sin(th);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double dy = y - cy, dx = x - cx;
        const double u = (c * dy + s * dx) / ay, v = (-s * dy + c * dx) / ax;
        if (u * u + v * v <= 1.0) img[static_cast<std::size_t>(y * size + x)] += value;
      }
  };
  const double cy = n / 2 + r.uniform(-0.05, 0.05) * n, cx = n / 2 + r.uniform(-0.05, 0.05) * n;
  const double ay = r.uniform(0.34, 0.44) * n, ax = r.uniform(0.28, 0.40) * n;
  const double th = r.uniform(-0.3, 0.3);
  paint(cy, cx, ay, ax, th, r.uniform(0.55, 0.75));
  paint(cy, cx, ay * 0.92, ax * 0.92, th, -r.uniform(0.15, 0.3));
  const int inner = 3 + static_cast<int>(r.below(4));
  for (int k = 0; k < inner; ++k) {
    const double rr = r.uniform(0.0, 0.6), ang = r.uniform(0.0, 2 * std::numbers::pi);
    const double iy = cy + rr * ay * std::sin(ang), ix = cx + rr * ax * std::cos(ang);
    paint(iy, ix, r.uniform(0.05, 0.18) * n, r.uniform(0.05, 0.18) * n, r.uniform(0.0, std::numbers::pi), r.uniform(-0.3, 0.35));
  }
  Tensor<float> out(Shape{1, size, size});
  for (std::size_t p = 0; p < img.size(); ++p) out[static_cast<std::int64_t>(p)] = static_cast<float>(std::clamp(img[p], 0.0, 1.0));
  return out;
}

Dataset gen_recon_dataset(std::uint64_t seed, std::int64_t count, int size, const MaskSpec& mask, std::int64_t first_index) {
  check_size(size);
  if (mask.h != size || mask.w != size) throw ShapeError("mask dims do not match the image size");
  Dataset d;
  d.task = TaskKind::Reconstruction;
  d.size = size;
  d.seed = seed;
  d.mask = mask;
  for (std::int64_t i = 0; i < count; ++i) {
    Sample s;
    s.target = make_phantom(seed, first_index + i, size);
    auto zf = undersample_zero_fill(s.target.cast<double>(), mask.mask);
    s.image = Tensor<float>(Shape{1, size, size});
    for (std::int64_t p = 0; p < zf.size(); ++p) s.image[p] = static_cast<float>(std::clamp(zf[p], 0.0, 1.0));
    s.seed = mix64(seed ^ mix64(static_cast<std::uint64_t>(first_index + i)));
    d.samples.push_back(std::move(s));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Fourier transforms

namespace {

using cd = std::complex<double>;

// In-place 2D transform, orthonormal in both directions.
void fft2_inplace(std::vector<cd>& a, int h, int w, bool inverse) {
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::Unscaled);
  std::vector<cd> in, out;
  in.resize(static_cast<std::size_t>(w));
  for (int y = 0; y < h; ++y) {
    std::copy_n(a.begin() + static_cast<std::ptrdiff_t>(y) * w, w, in.begin());
    inverse ? fft.inv(out, in) : fft.fwd(out, in);
    std::copy_n(out.begin(), w, a.begin() + static_cast<std::ptrdiff_t>(y) * w);
  }
  in.resize(static_cast<std::size_t>(h));
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) in[static_cast<std::size_t>(y)] = a[static_cast<std::size_t>(y * w + x)];
    inverse ? fft.inv(out, in) : fft.fwd(out, in);
    for (int y = 0; y < h; ++y) a[static_cast<std::size_t>(y * w + x)] = out[static_cast<std::size_t>(y)];
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(h) * w);
  for (auto& v : a) v *= s;
}

std::pair<int, int> spatial_dims(const Tensor<double>& image) {
  if (image.rank() == 2) return {static_cast<int>(image.dim(0)), static_cast<int>(image.dim(1))};
  if (image.rank() == 3 && image.dim(0) == 1) return {static_cast<int>(image.dim(1)), static_cast<int>(image.dim(2))};
  throw ShapeError("expected an [H,W] or [1,H,W] image, got " + shape_str(image.shape()));
}

}  // namespace

std::vector<std::complex<double>> fft2(const Tensor<double>& image) {
  const auto [h, w] = spatial_dims(image);
  std::vector<cd> a(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = image[static_cast<std::int64_t>(i)];
  fft2_inplace(a, h, w, false);
  return a;
}

std::vector<std::complex<double>> ifft2(const std::vector<std::complex<double>>& spectrum, int h, int w) {
  if (spectrum.size() != static_cast<std::size_t>(h) * w) throw ShapeError("spectrum size does not match dims");
  auto a = spectrum;
  fft2_inplace(a, h, w, true);
  return a;
}

Tensor<double> uncentered_mask(const Tensor<float>& centered) {
  if (centered.rank() != 2) throw ShapeError("mask must be [H,W]");
  const auto h = centered.dim(0), w = centered.dim(1);
  Tensor<double> m(Shape{h, w});
  // Centered index c holds frequency c - h/2; standard order stores it at (c - h/2) mod h.
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) m.at({(y - h / 2 + h) % h, (x - w / 2 + w) % w}) = centered.at({y, x});
  return m;
}

Tensor<double> undersample_zero_fill(const Tensor<double>& image, const Tensor<float>& mask) {
  const auto [h, w] = spatial_dims(image);
  if (mask.rank() != 2 || mask.dim(0) != h || mask.dim(1) != w) {
    throw ShapeError("mask " + shape_str(mask.shape()) + " does not match image " + shape_str(image.shape()));
  }
  auto spec = fft2(image);
  const auto m = uncentered_mask(mask);
  for (std::size_t i = 0; i < spec.size(); ++i) spec[i] *= m[static_cast<std::int64_t>(i)];
  const auto back = ifft2(spec, h, w);
  Tensor<double> out(image.shape());
  for (std::size_t i = 0; i < back.size(); ++i) out[static_cast<std::int64_t>(i)] = std::abs(back[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Sampling masks

MaskSpec full_mask(int h, int w) {
  MaskSpec m;
  m.h = h;
  m.w = w;
  m.acceleration = 1.0;
  m.mask = Tensor<float>(Shape{h, w}, 1.0f);
  return m;
}

MaskSpec make_vd_mask(int h, int w, double acceleration, std::uint64_t seed) {
  if (h < 2 || w < 2) throw std::invalid_argument("mask dims must be at least 2");
  if (!(acceleration > 1.0)) throw std::invalid_argument("acceleration must be > 1");
  const double n = static_cast<double>(h) * w;
  const double target = n / acceleration;
  const double tol = 0.02 * target;
  const int bh = MaskSpec::center_block(h), bw = MaskSpec::center_block(w);
  const int y0 = h / 2 - bh / 2, x0 = w / 2 - bw / 2;
  auto in_block = [&](int y, int x) { return y >= y0 && y < y0 + bh && x >= x0 && x < x0 + bw; };
  if (bh * bw > target + tol) throw std::invalid_argument("acceleration too high: the fixed center block alone exceeds the budget");

  // Radial decay, normalized so the outermost axis frequency sits at r = 1.
  constexpr double r0 = 0.1;
  std::vector<double> base(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dy = (y - h / 2) / (h / 2.0), dx = (x - w / 2) / (w / 2.0);
      const double r = std::sqrt(dy * dy + dx * dx);
      base[static_cast<std::size_t>(y * w + x)] = 1.0 / ((1.0 + r / r0) * (1.0 + r / r0));
    }
  auto expected = [&](double c) {
    double s = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) s += in_block(y, x) ? 1.0 : std::min(1.0, c * base[static_cast<std::size_t>(y * w + x)]);
    return s;
  };
  double lo = 0.0, hi = 1.0;
  while (expected(hi) < target) {
    hi *= 2.0;
    if (hi > 1e12) throw std::invalid_argument("cannot reach the requested sampling fraction");
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (expected(mid) < target ? lo : hi) = mid;
  }
  const double c = 0.5 * (lo + hi);

  const Rng base_rng(seed, 0x3A5C);
  for (std::uint64_t attempt = 0; attempt < 10000; ++attempt) {
    Rng r = base_rng.split(attempt);
    Tensor<float> mask(Shape{h, w});
    double kept = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double p = in_block(y, x) ? 1.0 : std::min(1.0, c * base[static_cast<std::size_t>(y * w + x)]);
        const bool on = r.uniform() < p;
        if (on) {
          mask.at({y, x}) = 1.0f;
          kept += 1.0;
        }
      }
    if (std::abs(kept - target) <= tol) {
      MaskSpec m;
      m.h = h;
      m.w = w;
      m.acceleration = acceleration;
      m.seed = seed;
      m.mask = std::move(mask);
      return m;
    }
  }
  throw std::invalid_argument("could not draw a mask within tolerance; acceleration likely infeasible for this size");
}

// ---------------------------------------------------------------------------
// Augmentation

AugmentParams draw_augment(std::uint64_t seed) {
  Rng r(seed, 0xA06);
  AugmentParams p;
  p.flip_h = r.bernoulli(0.5);
  p.flip_v = r.bernoulli(0.5);
  p.angle_deg = r.uniform(-30.0, 30.0);
  p.scale = r.uniform(0.9, 1.1);
  return p;
}

Tensor<float> warp(const Tensor<float>& x, const AugmentParams& p, bool nearest) {
  if (x.rank() != 3) throw ShapeError("warp expects [C,H,W], got " + shape_str(x.shape()));
  const auto ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const double th = p.angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  Tensor<float> out(x.shape());
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t xo = 0; xo < w; ++xo) {
      // Inverse map: undo rotation and scale, then the (self-inverse) flips.
      const double dy = y - cy, dx = xo - cx;
      double sy = (c * dy + s * dx) / p.scale;
      double sx = (-s * dy + c * dx) / p.scale;
      if (p.flip_v) sy = -sy;
      if (p.flip_h) sx = -sx;
      sy += cy;
      sx += cx;
      for (std::int64_t k = 0; k < ch; ++k) {
        const float* src = x.ptr() + k * h * w;
        float v = 0.0f;
        if (nearest) {
          const auto iy = static_cast<std::int64_t>(std::lround(sy)), ix = static_cast<std::int64_t>(std::lround(sx));
          if (iy >= 0 && iy < h && ix >= 0 && ix < w) v = src[iy * w + ix];
        } else {
          const auto y0 = static_cast<std::int64_t>(std::floor(sy)), x0 = static_cast<std::int64_t>(std::floor(sx));
          const double fy = sy - y0, fx = sx - x0;
          double acc = 0.0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
              const auto yy = y0 + a, xx = x0 + b;
              const double wgt = (a ? fy : 1 - fy) * (b ? fx : 1 - fx);
              if (wgt == 0.0 || yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
              acc += wgt * src[yy * w + xx];
            }
          v = static_cast<float>(acc);
        }
        out[(k * h + y) * w + xo] = v;
      }
    }
  return out;
}

Sample apply_augment(const Sample& s, const AugmentParams& p, TaskKind task) {
  Sample out;
  out.seed = s.seed;
  out.image = warp(s.image, p, false);
  out.target = warp(s.target, p, task == TaskKind::Segmentation);
  if (task == TaskKind::Segmentation) {
    for (auto& v : out.target.storage()) v = v >= 0.5f ? 1.0f : 0.0f;
  }
  return out;
}

Sample augment(const Sample& s, std::uint64_t seed, TaskKind task) { return apply_augment(s, draw_augment(seed), task); }

// ---------------------------------------------------------------------------
// Noise

Tensor<float> add_noise(const Tensor<float>& image, const NoiseSpec& spec, const Tensor<float>* kspace_mask) {
  if (!(spec.level >= 0.0)) throw std::invalid_argument("noise level must be >= 0");
  if (spec.level == 0.0) return image;
  Rng r(spec.seed, 0x4E01 + static_cast<std::uint64_t>(spec.kind));
  Tensor<float> out = image;
  auto clip = [](double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); };
  switch (spec.kind) {
    case NoiseKind::Gaussian:
      for (auto& v : out.storage()) v = clip(v + spec.level * r.normal());
      break;
    case NoiseKind::Speckle:
      for (auto& v : out.storage()) v = clip(v * (1.0 + spec.level * r.normal()));
      break;
    case NoiseKind::SaltPepper:
      for (auto& v : out.storage()) {
        const bool hit = r.uniform() < spec.level;
        const bool salt = r.bernoulli(0.5);
        if (hit) v = salt ? 1.0f : 0.0f;
      }
      break;
    case NoiseKind::KspaceGaussian: {
      if (image.rank() != 3) throw ShapeError("k-space noise expects [C,H,W]");
      const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
      Tensor<double> m;
      if (kspace_mask) m = uncentered_mask(*kspace_mask);
      for (std::int64_t k = 0; k < c; ++k) {
        Tensor<double> slice(Shape{h, w});
        for (std::int64_t i = 0; i < h * w; ++i) slice[i] = image[k * h * w + i];
        auto spec_k = fft2(slice);
        for (std::size_t i = 0; i < spec_k.size(); ++i) {
          const double re = r.normal(), im = r.normal();
          const double keep = kspace_mask ? m[static_cast<std::int64_t>(i)] : 1.0;
          spec_k[i] += keep * spec.level * std::complex<double>(re, im);
        }
        const auto back = ifft2(spec_k, static_cast<int>(h), static_cast<int>(w));
        for (std::int64_t i = 0; i < h * w; ++i) out[k * h * w + i] = clip(std::abs(back[static_cast<std::size_t>(i)]));
      }
      break;
    }
  }
  return out;
}

}  // namespace hconv
