#pragma once

#include <complex>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hyperconv/tensor.hpp"

namespace hconv {

enum class TaskKind { Segmentation, Reconstruction };
std::string to_string(TaskKind t);
TaskKind parse_task(const std::string& s);

struct Sample {
  Tensor<float> image;   // [C,H,W], values in [0,1]
  Tensor<float> target;  // [1,H,W]: binary mask or fully-sampled image
  std::uint64_t seed = 0;
};

/// Binary sampling mask in centered frequency layout: DC sits at (H/2, W/2).
struct MaskSpec {
  int h = 0;
  int w = 0;
  double acceleration = 1.0;
  std::uint64_t seed = 0;
  Tensor<float> mask;  // [H,W]

  double kept_fraction() const;
  /// Side of the always-kept square around DC.
  static int center_block(int n) { return (n + 15) / 16; }
};

struct Dataset {
  TaskKind task = TaskKind::Segmentation;
  int size = 0;
  std::uint64_t seed = 0;
  std::vector<Sample> samples;
  std::optional<MaskSpec> mask;  // reconstruction only

  std::int64_t count() const { return static_cast<std::int64_t>(samples.size()); }
  /// Stacks the selected samples into [B,C,H,W] / [B,1,H,W].
  Tensor<float> images(const std::vector<std::int64_t>& idx) const;
  Tensor<float> targets(const std::vector<std::int64_t>& idx) const;
};

/// Sample `index` of the blob task: a smooth background with 1-4 soft bright
/// ellipses whose interiors form the target. Foreground covers 0.5%-30%.
Sample make_blob_sample(std::uint64_t seed, std::int64_t index, int size);
Dataset gen_blob_segmentation(std::uint64_t seed, std::int64_t count, int size, std::int64_t first_index = 0);

/// Random multi-ellipse phantom in [0,1], [1,size,size].
Tensor<float> make_phantom(std::uint64_t seed, std::int64_t index, int size);
Dataset gen_recon_dataset(std::uint64_t seed, std::int64_t count, int size, const MaskSpec& mask, std::int64_t first_index = 0);

// Orthonormal 2D DFT of a real [H,W] image and its inverse; row-major
// standard (uncentered) frequency order.
std::vector<std::complex<double>> fft2(const Tensor<double>& image);
std::vector<std::complex<double>> ifft2(const std::vector<std::complex<double>>& spectrum, int h, int w);

/// Mask converted from centered to standard frequency order.
Tensor<double> uncentered_mask(const Tensor<float>& centered);

/// Magnitude of the inverse transform of the masked spectrum. `image` is
/// [H,W] or [1,H,W]; the mask is in centered layout.
Tensor<double> undersample_zero_fill(const Tensor<double>& image, const Tensor<float>& mask);

/// Variable-density Bernoulli mask with p(r) proportional to (1 + r/r0)^-2,
/// scaled so the expected kept fraction is 1/acceleration. Redrawn until the
/// kept fraction is within 2% (relative) of the target.
MaskSpec make_vd_mask(int h, int w, double acceleration, std::uint64_t seed);
MaskSpec full_mask(int h, int w);

struct AugmentParams {
  bool flip_h = false;  // mirror columns
  bool flip_v = false;  // mirror rows
  double angle_deg = 0.0;
  double scale = 1.0;
};

AugmentParams draw_augment(std::uint64_t seed);
/// Warps a [C,H,W] tensor about the image center; bilinear with zero fill,
/// or nearest-neighbour when `nearest`.
Tensor<float> warp(const Tensor<float>& x, const AugmentParams& p, bool nearest);
/// Same geometric transform for image and target. Segmentation targets use
/// nearest-neighbour sampling and stay binary.
Sample apply_augment(const Sample& s, const AugmentParams& p, TaskKind task);
Sample augment(const Sample& s, std::uint64_t seed, TaskKind task);

enum class NoiseKind { Gaussian, SaltPepper, Speckle, KspaceGaussian };
std::string to_string(NoiseKind k);
NoiseKind parse_noise_kind(const std::string& s);

struct NoiseSpec {
  NoiseKind kind = NoiseKind::Gaussian;
  double level = 0.0;
  std::uint64_t seed = 0;
};

/// Noisy copy of a [C,H,W] image. Level 0 returns the input unchanged.
/// For k-space noise an optional centered mask restricts the perturbation to
/// acquired frequencies; each of the real and imaginary parts gets N(0, level).
Tensor<float> add_noise(const Tensor<float>& image, const NoiseSpec& spec, const Tensor<float>* kspace_mask = nullptr);

}  // namespace hconv
