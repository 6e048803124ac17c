#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hyperconv/autodiff.hpp"
#include "hyperconv/ops.hpp"
#include "hyperconv/rng.hpp"

namespace hconv {

/// Kernel-sized grid of normalized (row, column) offsets from the center.
///
/// Entry (r, c) holds ((r - (kh-1)/2) * s_h, (c - (kw-1)/2) * s_w) with
/// s = 2 / (k - 1), so the outermost taps sit at +-1 and the center tap is
/// exactly (0, 0). A size-1 axis uses s = 0.
struct CoordinateGrid {
  int kh = 1;
  int kw = 1;
  Tensor<double> coords;  // [2, kh, kw]: channel 0 is the row offset, channel 1 the column offset

  std::int64_t positions() const { return static_cast<std::int64_t>(kh) * kw; }
  /// Positions as rows of a [kh*kw, 2] matrix in row-major tap order.
  Tensor<double> as_rows() const;
  /// The same grid rotated by 180 degrees.
  CoordinateGrid rotated180() const;
};

CoordinateGrid make_coordinate_grid(int kh, int kw);

/// Widths of the four hidden layers of the coordinate network. The last entry
/// is the capacity knob N_L; the input width is always 2 and every hidden
/// layer uses leaky ReLU with slope 0.1.
struct HyperNetConfig {
  static constexpr int kInputWidth = 2;
  static constexpr double kLeakySlope = 0.1;

  std::array<int, 4> hidden_widths{4, 4, 4, 4};

  int last_width() const { return hidden_widths[3]; }
  void validate() const;

  /// Default fixed widths with the final hidden width set to `n_last`.
  static HyperNetConfig with_last_width(int n_last) { return HyperNetConfig{{4, 4, 4, n_last}}; }

  bool operator==(const HyperNetConfig&) const = default;
};

/// Learnable scalars of a standard h x w convolution.
std::int64_t count_params_standard(std::int64_t h, std::int64_t w, std::int64_t n_in, std::int64_t n_out, bool with_bias);

struct HyperParamCount {
  std::int64_t exact = 0;        // final layer plus every hidden layer (plus bias when requested)
  std::int64_t approximate = 0;  // (N_L + 1) * N_in * N_out, the dominant term
};

/// Learnable scalars of a hyper-convolution; does not depend on the kernel size.
HyperParamCount count_params_hyper(const HyperNetConfig& cfg, std::int64_t n_in, std::int64_t n_out, bool with_bias);

/// A convolution whose kernel is generated by a small coordinate network.
///
/// The network is applied independently at every tap of the coordinate grid
/// (equivalently, a stack of 1x1 convolutions over the grid): four affine +
/// leaky-ReLU layers followed by an affine layer with N_in * N_out outputs,
/// reshaped into a [N_out, N_in, kh, kw] kernel. The per-output-channel bias
/// is learned directly.
template <typename T>
class HyperConvLayer {
 public:
  static constexpr int kLayers = 5;

  HyperConvLayer(int kh, int kw, int n_in, int n_out, HyperNetConfig cfg, Rng& rng);

  int kernel_h() const { return grid_.kh; }
  int kernel_w() const { return grid_.kw; }
  int in_channels() const { return n_in_; }
  int out_channels() const { return n_out_; }
  const HyperNetConfig& config() const { return cfg_; }
  const CoordinateGrid& grid() const { return grid_; }

  /// Weight of coordinate-network layer l, shape [out_l, in_l].
  Var<T>& weight(int l) { return weights_.at(static_cast<std::size_t>(l)); }
  const Var<T>& weight(int l) const { return weights_.at(static_cast<std::size_t>(l)); }
  Var<T>& layer_bias(int l) { return biases_.at(static_cast<std::size_t>(l)); }
  const Var<T>& layer_bias(int l) const { return biases_.at(static_cast<std::size_t>(l)); }
  Var<T>& bias() { return bias_; }
  const Var<T>& bias() const { return bias_; }

  /// Coordinate-network parameters followed by the output bias.
  std::vector<Var<T>> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::int64_t parameter_count() const;

  /// Kernel generated on `grid` (differentiable with respect to the network).
  Var<T> kernel(const CoordinateGrid& grid) const;
  /// Kernel on the layer's own grid; the frozen copy when frozen.
  Var<T> kernel() const;

  Var<T> forward(const Var<T>& input, const Conv2dOptions& opt) const;

  /// Caches the current kernel for inference. Must be undone before training.
  void freeze();
  void unfreeze() { cached_.reset(); }
  bool frozen() const { return cached_.has_value(); }

 private:
  CoordinateGrid grid_;
  int n_in_;
  int n_out_;
  HyperNetConfig cfg_;
  std::vector<Var<T>> weights_;
  std::vector<Var<T>> biases_;
  Var<T> bias_;
  std::optional<Var<T>> cached_;
};

template <typename T>
Var<T> hypernet_forward(const HyperConvLayer<T>& layer, const CoordinateGrid& grid) {
  return layer.kernel(grid);
}

template <typename T>
Var<T> hyperconv_forward(const HyperConvLayer<T>& layer, const Var<T>& input, const Conv2dOptions& opt) {
  return layer.forward(input, opt);
}

extern template class HyperConvLayer<float>;
extern template class HyperConvLayer<double>;

}  // namespace hconv
