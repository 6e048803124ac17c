#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hyperconv/hyperconv.hpp"
#include "hyperconv/ops.hpp"

namespace hconv {

enum class LayerKind { Conv, HyperConv, MaxPool, Upsample, Concat, BatchNorm, Activation, Dropout, NonLocal, ResidualAdd };
enum class ActivationKind { Identity, Relu, LeakyRelu, Sigmoid };
enum class ConvMode { Standard, Hyper };

std::string to_string(LayerKind k);
std::string to_string(ActivationKind a);
std::string to_string(ConvMode m);
LayerKind parse_layer_kind(const std::string& s);
ActivationKind parse_activation(const std::string& s);
ConvMode parse_conv_mode(const std::string& s);

/// One node of the layer graph. `inputs` refers to earlier nodes by index;
/// -1 denotes the network input.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Conv;
  std::vector<int> inputs;
  int kernel = 1;
  int dilation = 1;
  int stride = 1;
  int in_channels = 0;
  int out_channels = 0;
  ActivationKind activation = ActivationKind::Relu;
  double slope = 0.0;
  double dropout_p = 0.0;
  std::optional<HyperNetConfig> hyper;

  bool is_conv() const { return kind == LayerKind::Conv || kind == LayerKind::HyperConv; }
  bool operator==(const LayerSpec&) const = default;
};

/// Compact builder recipe from which a full layer graph is expanded.
struct ArchitectureConfig {
  std::string family = "unet";  // unet | flat_cnn | flat_dilated_cnn
  int in_channels = 1;
  int out_channels = 1;
  int init_channels = 32;  // unet only
  int kernel_size = 3;     // unet only
  int dilation = 1;        // unet only
  ConvMode conv_mode = ConvMode::Standard;
  HyperNetConfig hyper{};
  bool nonlocal = false;  // unet only
  ActivationKind output = ActivationKind::Sigmoid;

  bool operator==(const ArchitectureConfig&) const = default;
};

struct ArchitectureSpec {
  std::string name;
  ArchitectureConfig recipe;
  std::vector<LayerSpec> layers;

  /// Checks channel chaining, odd kernels, input references and that the last
  /// convolution is a standard 1x1 convolution.
  void validate() const;
  bool operator==(const ArchitectureSpec&) const = default;
};

struct UNetOptions {
  int in_channels = 1;
  int out_channels = 1;
  int init_channels = 32;
  int kernel_size = 3;
  int dilation = 1;
  ConvMode conv_mode = ConvMode::Standard;
  HyperNetConfig hyper{};
  bool nonlocal_bottleneck = false;
  ActivationKind output = ActivationKind::Sigmoid;
};

/// Four-level UNet: two conv + BN + ReLU per level, three 2x2 max-pools with
/// channel doubling, dropout 0.5 at the bottleneck, and a decoder of nearest
/// upsampling, a 3x3 channel-halving convolution, skip concatenation and two
/// convolutions per level. The head is a standard 1x1 convolution.
ArchitectureSpec build_unet(const UNetOptions& opt);
/// Five full-resolution convolutions with kernels 3,5,9,5,3 and as many
/// output channels as kernel taps (9,25,81,25,9).
ArchitectureSpec build_flat_cnn(ConvMode mode, const HyperNetConfig& hyper = {}, int in_channels = 1, int out_channels = 1,
                                ActivationKind output = ActivationKind::Sigmoid);
/// Seven residual blocks of two 3x3 convolutions with dilations
/// 1,2,4,8,4,2,1 and widths 16,32,64,128,64,32,16. Shortcuts that change
/// width use a standard 1x1 projection in both modes.
ArchitectureSpec build_flat_dilated_cnn(ConvMode mode, const HyperNetConfig& hyper = {}, int in_channels = 1,
                                        int out_channels = 1, ActivationKind output = ActivationKind::Sigmoid);
ArchitectureSpec build_architecture(const ArchitectureConfig& cfg);

/// Receptive field along the encoder path. `all` marks a path through a
/// non-local block, reported as the token ALL.
struct ReceptiveField {
  bool all = false;
  std::int64_t pixels = 0;
  std::string str() const { return all ? "ALL" : std::to_string(pixels); }
};
ReceptiveField receptive_field(const ArchitectureSpec& spec);

struct LayerParams {
  std::string name;
  LayerKind kind;
  std::int64_t params = 0;
};

struct ModelSummary {
  std::string name;
  std::vector<LayerParams> layers;
  std::int64_t total = 0;
  ReceptiveField receptive_field;
};

/// Per-layer counts from the closed-form expressions (no model is built).
ModelSummary closed_form_summary(const ArchitectureSpec& spec);

template <typename T>
struct NonLocalParams {
  // 1x1 kernels stored as [C_out, C_in, 1, 1].
  Var<T> query_w, query_b, key_w, key_b, value_w, value_b, out_w, out_b;
  std::vector<Var<T>> all() const { return {query_w, query_b, key_w, key_b, value_w, value_b, out_w, out_b}; }
};

template <typename T>
NonLocalParams<T> make_nonlocal_params(int channels, Rng& rng);

/// Residual embedded-dot-product self-attention over all H*W positions.
/// When `attention` is given it receives the [N, HW, HW] row-softmax matrix.
template <typename T>
Var<T> nonlocal_block(const Var<T>& x, const NonLocalParams<T>& p, Tensor<T>* attention = nullptr);

struct NamedKernel {
  std::string layer;
  Tensor<double> kernel;
};

template <typename T>
class Model {
 public:
  Model(ArchitectureSpec spec, std::uint64_t seed);

  const ArchitectureSpec& spec() const { return spec_; }

  Var<T> forward(const Var<T>& input);

  /// Eval mode freezes generated kernels and uses running statistics.
  void set_mode(Mode mode);
  Mode mode() const { return mode_; }

  struct NamedParam {
    std::string name;
    Var<T> var;
  };
  std::vector<NamedParam> parameters() const;
  std::vector<Var<T>> parameter_vars() const;
  /// Non-learnable state (batch-norm running statistics).
  std::vector<std::pair<std::string, Tensor<T>*>> buffers();

  /// Enumerates learnable scalars layer by layer.
  ModelSummary summary() const;

  /// Frozen copies of every convolution kernel in forward order: generated
  /// kernels for hyper layers, stored weights for standard layers.
  std::vector<NamedKernel> materialize_all() const;

  /// Parameters and buffers by name, for snapshots.
  std::vector<std::pair<std::string, Tensor<T>>> state() const;
  void load_state(const std::vector<std::pair<std::string, Tensor<T>>>& state);

  /// Base seed of dropout masks; each training forward pass advances a counter.
  void set_dropout_seed(std::uint64_t seed) {
    dropout_seed_ = seed;
    forward_calls_ = 0;
  }

 private:
  struct LayerState {
    Var<T> weight;
    Var<T> bias;
    std::optional<HyperConvLayer<T>> hyper;
    Var<T> gamma;
    Var<T> beta;
    BatchNormState<T> bn;
    std::optional<NonLocalParams<T>> nonlocal;
  };

  ArchitectureSpec spec_;
  std::vector<LayerState> states_;
  Mode mode_ = Mode::Train;
  std::uint64_t dropout_seed_ = 0;
  std::uint64_t forward_calls_ = 0;
};

template <typename T>
ModelSummary param_count(const Model<T>& model) {
  return model.summary();
}

template <typename T>
std::vector<NamedKernel> materialize_all(const Model<T>& model) {
  return model.materialize_all();
}

extern template class Model<float>;
extern template class Model<double>;

}  // namespace hconv
