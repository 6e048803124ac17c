#pragma once

#include <cstdint>

#include "hyperconv/autodiff.hpp"

namespace hconv {

enum class Padding { Same, Valid };
enum class Mode { Train, Eval };

struct Conv2dOptions {
  int stride = 1;
  int dilation = 1;
  Padding padding = Padding::Same;
};

/// Output extent and leading pad along one spatial axis.
struct ConvAxis {
  std::int64_t out = 0;
  std::int64_t pad_begin = 0;
};
ConvAxis conv_axis(std::int64_t in, std::int64_t k, const Conv2dOptions& opt);

// Elementwise and reductions.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> square(const Var<T>& a);
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);

// Matrix products. transpose2d expects rank 2; bmm expects [B,M,K]x[B,K,N]
// before the optional per-operand transposes.
template <typename T> Var<T> transpose2d(const Var<T>& a);
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_a = false, bool transpose_b = false);
/// Row-wise affine map: x[P,in] * w[out,in]^T + b[out].
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

// Activations.
template <typename T> Var<T> leaky_relu(const Var<T>& a, T slope);
template <typename T> Var<T> relu(const Var<T>& a) { return leaky_relu(a, T{0}); }
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> softmax_lastdim(const Var<T>& a);

// Image ops on [N,C,H,W].
/// Cross-correlation (no kernel flip). `bias` may be undefined.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, const Conv2dOptions& opt = {});
template <typename T> Var<T> max_pool2x2(const Var<T>& input);
template <typename T> Var<T> upsample2x_nearest(const Var<T>& input);
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.1;

  explicit BatchNormState(std::int64_t channels = 0)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

/// Per-channel normalization over N,H,W. Train mode uses batch statistics
/// and updates `state` by exponential moving average; eval mode uses `state`.
template <typename T>
Var<T> batch_norm2d(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state, Mode mode,
                    double eps = 1e-5);

/// Inverted dropout: identity in eval mode.
template <typename T> Var<T> dropout(const Var<T>& input, double p, Mode mode, std::uint64_t seed);

}  // namespace hconv
