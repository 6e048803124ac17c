#include "hyperconv/architectures.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace hconv {

namespace {

struct NameTable {
  const char* name;
  int value;
};

constexpr NameTable kLayerKinds[] = {
    {"conv", static_cast<int>(LayerKind::Conv)},
    {"hyperconv", static_cast<int>(LayerKind::HyperConv)},
    {"maxpool", static_cast<int>(LayerKind::MaxPool)},
    {"upsample", static_cast<int>(LayerKind::Upsample)},
    {"concat-skip", static_cast<int>(LayerKind::Concat)},
    {"batchnorm", static_cast<int>(LayerKind::BatchNorm)},
    {"activation", static_cast<int>(LayerKind::Activation)},
    {"dropout", static_cast<int>(LayerKind::Dropout)},
    {"nonlocal", static_cast<int>(LayerKind::NonLocal)},
    {"residual-add", static_cast<int>(LayerKind::ResidualAdd)},
};

constexpr NameTable kActivations[] = {
    {"identity", static_cast<int>(ActivationKind::Identity)},
    {"relu", static_cast<int>(ActivationKind::Relu)},
    {"leaky_relu", static_cast<int>(ActivationKind::LeakyRelu)},
    {"sigmoid", static_cast<int>(ActivationKind::Sigmoid)},
};

template <std::size_t N>
std::string lookup_name(const NameTable (&table)[N], int v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

template <std::size_t N>
int lookup_value(const NameTable (&table)[N], const std::string& s, const char* what) {
  for (const auto& e : table)
    if (s == e.name) return e.value;
  throw std::invalid_argument(std::string("unknown ") + what + " '" + s + "'");
}

}  // namespace

std::string to_string(LayerKind k) { return lookup_name(kLayerKinds, static_cast<int>(k)); }
std::string to_string(ActivationKind a) { return lookup_name(kActivations, static_cast<int>(a)); }
std::string to_string(ConvMode m) { return m == ConvMode::Standard ? "standard" : "hyper"; }
LayerKind parse_layer_kind(const std::string& s) { return static_cast<LayerKind>(lookup_value(kLayerKinds, s, "layer kind")); }
ActivationKind parse_activation(const std::string& s) {
  return static_cast<ActivationKind>(lookup_value(kActivations, s, "activation"));
}
ConvMode parse_conv_mode(const std::string& s) {
  if (s == "standard") return ConvMode::Standard;
  if (s == "hyper") return ConvMode::Hyper;
  throw std::invalid_argument("unknown conv mode '" + s + "' (expected standard or hyper)");
}

// ---------------------------------------------------------------------------
// Validation

void ArchitectureSpec::validate() const {
  if (layers.empty()) throw std::invalid_argument("architecture '" + name + "' has no layers");
  std::vector<int> channels(layers.size(), 0);
  const int in_ch = recipe.in_channels;
  auto channels_of = [&](int idx) { return idx < 0 ? in_ch : channels[static_cast<std::size_t>(idx)]; };
  auto fail = [&](std::size_t i, const std::string& msg) {
    throw std::invalid_argument("layer " + std::to_string(i) + " (" + layers[i].name + "): " + msg);
  };
  int last_conv = -1;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& L = layers[i];
    const std::size_t need = (L.kind == LayerKind::Concat || L.kind == LayerKind::ResidualAdd) ? 2 : 1;
    if (L.inputs.size() != need) fail(i, "expects " + std::to_string(need) + " input(s)");
    for (int src : L.inputs) {
      if (src < -1 || src >= static_cast<int>(i)) fail(i, "input index " + std::to_string(src) + " does not refer to an earlier layer");
    }
    const int c0 = channels_of(L.inputs[0]);
    switch (L.kind) {
      case LayerKind::Conv:
      case LayerKind::HyperConv:
        if (L.kernel < 1 || L.kernel % 2 == 0) fail(i, "kernel size must be odd, got " + std::to_string(L.kernel));
        if (L.dilation < 1 || L.stride < 1) fail(i, "dilation and stride must be positive");
        if (L.in_channels != c0) fail(i, "in_channels " + std::to_string(L.in_channels) + " but input carries " + std::to_string(c0));
        if (L.out_channels < 1) fail(i, "out_channels must be positive");
        if (L.kind == LayerKind::HyperConv) {
          if (!L.hyper) fail(i, "hyperconv layer without hyper-network config");
          L.hyper->validate();
        }
        channels[i] = L.out_channels;
        last_conv = static_cast<int>(i);
        break;
      case LayerKind::Concat:
        channels[i] = c0 + channels_of(L.inputs[1]);
        break;
      case LayerKind::ResidualAdd:
        if (channels_of(L.inputs[1]) != c0) fail(i, "residual operands have different channel counts");
        channels[i] = c0;
        break;
      case LayerKind::Dropout:
        if (!(L.dropout_p >= 0.0 && L.dropout_p < 1.0)) fail(i, "dropout probability must be in [0, 1)");
        channels[i] = c0;
        break;
      case LayerKind::Activation:
        if (L.activation == ActivationKind::LeakyRelu && !(L.slope >= 0.0 && L.slope <= 1.0)) fail(i, "leaky slope must be in [0, 1]");
        channels[i] = c0;
        break;
      case LayerKind::NonLocal:
        if (c0 < 2) fail(i, "non-local block needs at least 2 channels");
        channels[i] = c0;
        break;
      default:
        channels[i] = c0;
    }
    if (L.kind != LayerKind::Conv && L.kind != LayerKind::HyperConv && L.kind != LayerKind::Concat) {
      if (L.in_channels != 0 && L.in_channels != c0) fail(i, "declared channels do not match its input");
    }
  }
  if (last_conv < 0) throw std::invalid_argument("architecture '" + name + "' has no convolution");
  const auto& head = layers[static_cast<std::size_t>(last_conv)];
  if (head.kind != LayerKind::Conv || head.kernel != 1) {
    throw std::invalid_argument("architecture '" + name + "': the final convolution must be a standard 1x1 convolution");
  }
}

// ---------------------------------------------------------------------------
// Builders

namespace {

class GraphBuilder {
 public:
  GraphBuilder(ConvMode mode, HyperNetConfig hyper, int in_channels) : mode_(mode), hyper_(hyper) {
    channels_[-1] = in_channels;
  }

  int channels(int idx) const { return channels_.at(idx); }

  int conv(const std::string& name, int src, int out, int k, int dilation = 1, bool force_standard = false) {
    LayerSpec L;
    L.name = name;
    L.kind = (mode_ == ConvMode::Hyper && !force_standard) ? LayerKind::HyperConv : LayerKind::Conv;
    L.inputs = {src};
    L.kernel = k;
    L.dilation = dilation;
    L.in_channels = channels(src);
    L.out_channels = out;
    if (L.kind == LayerKind::HyperConv) L.hyper = hyper_;
    return push(std::move(L), out);
  }

  int simple(const std::string& name, LayerKind kind, int src) {
    LayerSpec L;
    L.name = name;
    L.kind = kind;
    L.inputs = {src};
    L.in_channels = channels(src);
    L.out_channels = channels(src);
    return push(std::move(L), channels(src));
  }

  int activation(const std::string& name, int src, ActivationKind a) {
    int i = simple(name, LayerKind::Activation, src);
    layers_.back().activation = a;
    return i;
  }

  int dropout(const std::string& name, int src, double p) {
    int i = simple(name, LayerKind::Dropout, src);
    layers_.back().dropout_p = p;
    return i;
  }

  int binary(const std::string& name, LayerKind kind, int a, int b) {
    LayerSpec L;
    L.name = name;
    L.kind = kind;
    L.inputs = {a, b};
    const int out = kind == LayerKind::Concat ? channels(a) + channels(b) : channels(a);
    L.in_channels = kind == LayerKind::Concat ? 0 : channels(a);
    L.out_channels = out;
    return push(std::move(L), out);
  }

  // conv -> batchnorm -> relu
  int conv_bn_relu(const std::string& prefix, int src, int out, int k, int dilation = 1) {
    int x = conv(prefix + ".conv", src, out, k, dilation);
    x = simple(prefix + ".bn", LayerKind::BatchNorm, x);
    return activation(prefix + ".relu", x, ActivationKind::Relu);
  }

  std::vector<LayerSpec> take() { return std::move(layers_); }

 private:
  int push(LayerSpec L, int out) {
    layers_.push_back(std::move(L));
    const int idx = static_cast<int>(layers_.size()) - 1;
    channels_[idx] = out;
    return idx;
  }

  ConvMode mode_;
  HyperNetConfig hyper_;
  std::vector<LayerSpec> layers_;
  std::map<int, int> channels_;
};

void add_head(GraphBuilder& g, int src, int out_channels, ActivationKind output) {
  int x = g.conv("head", src, out_channels, 1, 1, true);
  g.activation("output", x, output);
}

}  // namespace

ArchitectureSpec build_unet(const UNetOptions& opt) {
  if (opt.kernel_size < 1 || opt.kernel_size % 2 == 0) throw std::invalid_argument("UNet kernel size must be odd and positive");
  if (opt.init_channels < 1) throw std::invalid_argument("UNet init_channels must be >= 1");
  if (opt.dilation < 1) throw std::invalid_argument("UNet dilation must be >= 1");
  if (opt.in_channels < 1 || opt.out_channels < 1) throw std::invalid_argument("UNet channel counts must be positive");
  opt.hyper.validate();

  GraphBuilder g(opt.conv_mode, opt.hyper, opt.in_channels);
  const int k = opt.kernel_size;
  const int d = opt.dilation;
  constexpr int kLevels = 4;
  std::vector<int> skips;
  int x = -1;
  for (int l = 0; l < kLevels; ++l) {
    const int ch = opt.init_channels << l;
    const std::string p = l == kLevels - 1 ? "bottleneck" : "enc" + std::to_string(l + 1);
    x = g.conv_bn_relu(p + ".1", x, ch, k, d);
    x = g.conv_bn_relu(p + ".2", x, ch, k, d);
    if (l < kLevels - 1) {
      skips.push_back(x);
      x = g.simple("pool" + std::to_string(l + 1), LayerKind::MaxPool, x);
    }
  }
  if (opt.nonlocal_bottleneck) x = g.simple("bottleneck.nonlocal", LayerKind::NonLocal, x);
  x = g.dropout("bottleneck.dropout", x, 0.5);
  for (int l = kLevels - 2; l >= 0; --l) {
    const int ch = opt.init_channels << l;
    const std::string p = "dec" + std::to_string(l + 1);
    x = g.simple(p + ".upsample", LayerKind::Upsample, x);
    x = g.conv_bn_relu(p + ".up", x, ch, 3, 1);
    x = g.binary(p + ".concat", LayerKind::Concat, skips[static_cast<std::size_t>(l)], x);
    x = g.conv_bn_relu(p + ".1", x, ch, k, d);
    x = g.conv_bn_relu(p + ".2", x, ch, k, d);
  }
  add_head(g, x, opt.out_channels, opt.output);

  ArchitectureSpec spec;
  spec.recipe.family = "unet";
  spec.recipe.in_channels = opt.in_channels;
  spec.recipe.out_channels = opt.out_channels;
  spec.recipe.init_channels = opt.init_channels;
  spec.recipe.kernel_size = k;
  spec.recipe.dilation = d;
  spec.recipe.conv_mode = opt.conv_mode;
  spec.recipe.hyper = opt.hyper;
  spec.recipe.nonlocal = opt.nonlocal_bottleneck;
  spec.recipe.output = opt.output;
  spec.name = std::string(opt.conv_mode == ConvMode::Hyper ? "hyper-" : "") + (opt.nonlocal_bottleneck ? "nonlocal-" : "") +
              (d > 1 ? "dilated-" : "") + "unet-k" + std::to_string(k) + "-c" + std::to_string(opt.init_channels);
  spec.layers = g.take();
  spec.validate();
  return spec;
}

ArchitectureSpec build_flat_cnn(ConvMode mode, const HyperNetConfig& hyper, int in_channels, int out_channels,
                                ActivationKind output) {
  hyper.validate();
  GraphBuilder g(mode, hyper, in_channels);
  int x = -1;
  const int kernels[] = {3, 5, 9, 5, 3};
  for (int i = 0; i < 5; ++i) {
    x = g.conv_bn_relu("layer" + std::to_string(i + 1), x, kernels[i] * kernels[i], kernels[i]);
  }
  add_head(g, x, out_channels, output);
  ArchitectureSpec spec;
  spec.recipe.family = "flat_cnn";
  spec.recipe.in_channels = in_channels;
  spec.recipe.out_channels = out_channels;
  spec.recipe.conv_mode = mode;
  spec.recipe.hyper = hyper;
  spec.recipe.output = output;
  spec.name = std::string(mode == ConvMode::Hyper ? "hyper-" : "") + "flat-cnn";
  spec.layers = g.take();
  spec.validate();
  return spec;
}

ArchitectureSpec build_flat_dilated_cnn(ConvMode mode, const HyperNetConfig& hyper, int in_channels, int out_channels,
                                        ActivationKind output) {
  hyper.validate();
  GraphBuilder g(mode, hyper, in_channels);
  const int dilations[] = {1, 2, 4, 8, 4, 2, 1};
  const int widths[] = {16, 32, 64, 128, 64, 32, 16};
  int x = -1;
  for (int b = 0; b < 7; ++b) {
    const std::string p = "block" + std::to_string(b + 1);
    int y = g.conv_bn_relu(p + ".1", x, widths[b], 3, dilations[b]);
    y = g.conv(p + ".2.conv", y, widths[b], 3, dilations[b]);
    y = g.simple(p + ".2.bn", LayerKind::BatchNorm, y);
    int shortcut = x;
    if (g.channels(x) != widths[b]) shortcut = g.conv(p + ".proj", x, widths[b], 1, 1, true);
    x = g.binary(p + ".add", LayerKind::ResidualAdd, y, shortcut);
    x = g.activation(p + ".relu", x, ActivationKind::Relu);
  }
  add_head(g, x, out_channels, output);
  ArchitectureSpec spec;
  spec.recipe.family = "flat_dilated_cnn";
  spec.recipe.in_channels = in_channels;
  spec.recipe.out_channels = out_channels;
  spec.recipe.conv_mode = mode;
  spec.recipe.hyper = hyper;
  spec.recipe.output = output;
  spec.name = std::string(mode == ConvMode::Hyper ? "hyper-" : "") + "flat-dilated-cnn";
  spec.layers = g.take();
  spec.validate();
  return spec;
}

ArchitectureSpec build_architecture(const ArchitectureConfig& cfg) {
  if (cfg.family == "unet") {
    UNetOptions o;
    o.in_channels = cfg.in_channels;
    o.out_channels = cfg.out_channels;
    o.init_channels = cfg.init_channels;
    o.kernel_size = cfg.kernel_size;
    o.dilation = cfg.dilation;
    o.conv_mode = cfg.conv_mode;
    o.hyper = cfg.hyper;
    o.nonlocal_bottleneck = cfg.nonlocal;
    o.output = cfg.output;
    return build_unet(o);
  }
  if (cfg.family == "flat_cnn") return build_flat_cnn(cfg.conv_mode, cfg.hyper, cfg.in_channels, cfg.out_channels, cfg.output);
  if (cfg.family == "flat_dilated_cnn") {
    return build_flat_dilated_cnn(cfg.conv_mode, cfg.hyper, cfg.in_channels, cfg.out_channels, cfg.output);
  }
  throw std::invalid_argument("unknown architecture family '" + cfg.family + "' (expected unet, flat_cnn or flat_dilated_cnn)");
}

// ---------------------------------------------------------------------------
// Receptive field

ReceptiveField receptive_field(const ArchitectureSpec& spec) {
  struct State {
    std::int64_t r = 1;
    std::int64_t j = 1;
    bool all = false;
    bool decoder = false;
  };
  std::vector<State> st(spec.layers.size());
  const State input;
  auto in = [&](int idx) -> const State& { return idx < 0 ? input : st[static_cast<std::size_t>(idx)]; };
  ReceptiveField best;
  best.pixels = 1;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& L = spec.layers[i];
    State s = in(L.inputs.at(0));
    switch (L.kind) {
      case LayerKind::Conv:
      case LayerKind::HyperConv:
        s.r += static_cast<std::int64_t>(L.kernel - 1) * L.dilation * s.j;
        s.j *= L.stride;
        break;
      case LayerKind::MaxPool:
        s.r += s.j;
        s.j *= 2;
        break;
      case LayerKind::Upsample:
        s.decoder = true;
        break;
      case LayerKind::NonLocal:
        s.all = true;
        break;
      case LayerKind::Concat:
      case LayerKind::ResidualAdd: {
        const State& b = in(L.inputs.at(1));
        s.r = std::max(s.r, b.r);
        s.j = std::max(s.j, b.j);
        s.all = s.all || b.all;
        s.decoder = s.decoder || b.decoder;
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::Activation:
      case LayerKind::Dropout:
        break;
      default:
        throw std::invalid_argument("receptive field: unsupported layer kind " + to_string(L.kind));
    }
    st[i] = s;
    if (!s.decoder) {
      best.all = best.all || s.all;
      best.pixels = std::max(best.pixels, s.r);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Parameter accounting

namespace {

std::int64_t nonlocal_params(std::int64_t c) {
  const std::int64_t h = std::max<std::int64_t>(c / 2, 1);
  return 3 * (c * h + h) + (h * c + c);
}

}  // namespace

ModelSummary closed_form_summary(const ArchitectureSpec& spec) {
  ModelSummary s;
  s.name = spec.name;
  for (const auto& L : spec.layers) {
    std::int64_t n = 0;
    if (L.kind == LayerKind::Conv) n = count_params_standard(L.kernel, L.kernel, L.in_channels, L.out_channels, true);
    if (L.kind == LayerKind::HyperConv) n = count_params_hyper(*L.hyper, L.in_channels, L.out_channels, true).exact;
    if (L.kind == LayerKind::BatchNorm) n = 2 * static_cast<std::int64_t>(L.out_channels);
    if (L.kind == LayerKind::NonLocal) n = nonlocal_params(L.out_channels);
    s.layers.push_back({L.name, L.kind, n});
    s.total += n;
  }
  s.receptive_field = receptive_field(spec);
  return s;
}

// ---------------------------------------------------------------------------
// Non-local block

namespace {

template <typename T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
std::pair<Var<T>, Var<T>> conv_params(int n_in, int n_out, int k, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(n_in) * k * k);
  auto w = Var<T>::parameter(uniform_init<T>(Shape{n_out, n_in, k, k}, bound, rng));
  auto b = Var<T>::parameter(uniform_init<T>(Shape{n_out}, bound, rng));
  return {w, b};
}

}  // namespace

template <typename T>
NonLocalParams<T> make_nonlocal_params(int channels, Rng& rng) {
  if (channels < 2) throw std::invalid_argument("non-local block needs at least 2 channels");
  const int h = channels / 2;
  NonLocalParams<T> p;
  std::tie(p.query_w, p.query_b) = conv_params<T>(channels, h, 1, rng);
  std::tie(p.key_w, p.key_b) = conv_params<T>(channels, h, 1, rng);
  std::tie(p.value_w, p.value_b) = conv_params<T>(channels, h, 1, rng);
  std::tie(p.out_w, p.out_b) = conv_params<T>(h, channels, 1, rng);
  return p;
}

template <typename T>
Var<T> nonlocal_block(const Var<T>& x, const NonLocalParams<T>& p, Tensor<T>* attention) {
  if (x.shape().size() != 4) throw ShapeError("non-local block expects [N,C,H,W], got " + shape_str(x.shape()));
  const auto n = x.dim(0), hw = x.dim(2) * x.dim(3);
  const auto h = p.query_w.dim(0);
  const Conv2dOptions one{1, 1, Padding::Valid};
  auto q = reshape(conv2d(x, p.query_w, p.query_b, one), Shape{n, h, hw});
  auto k = reshape(conv2d(x, p.key_w, p.key_b, one), Shape{n, h, hw});
  auto v = reshape(conv2d(x, p.value_w, p.value_b, one), Shape{n, h, hw});
  // scores[i, j] = <q_i, k_j>; softmax over j.
  auto attn = softmax_lastdim(bmm(q, k, true, false));
  if (attention) *attention = attn.value();
  // y[:, i] = sum_j attn[i, j] v[:, j]
  auto y = reshape(bmm(v, attn, false, true), Shape{n, h, x.dim(2), x.dim(3)});
  return add(x, conv2d(y, p.out_w, p.out_b, one));
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
Model<T>::Model(ArchitectureSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  const Rng root(seed, 0x4d4f44454cULL);
  dropout_seed_ = mix64(seed ^ 0x6472u);
  states_.resize(spec_.layers.size());
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& L = spec_.layers[i];
    auto& S = states_[i];
    Rng rng = root.split(i);
    switch (L.kind) {
      case LayerKind::Conv:
        std::tie(S.weight, S.bias) = conv_params<T>(L.in_channels, L.out_channels, L.kernel, rng);
        break;
      case LayerKind::HyperConv:
        S.hyper.emplace(L.kernel, L.kernel, L.in_channels, L.out_channels, *L.hyper, rng);
        break;
      case LayerKind::BatchNorm:
        S.gamma = Var<T>::parameter(Tensor<T>(Shape{L.out_channels}, T{1}));
        S.beta = Var<T>::parameter(Tensor<T>(Shape{L.out_channels}, T{0}));
        S.bn = BatchNormState<T>(L.out_channels);
        break;
      case LayerKind::NonLocal:
        S.nonlocal = make_nonlocal_params<T>(L.out_channels, rng);
        break;
      default:
        break;
    }
  }
}

template <typename T>
Var<T> Model<T>::forward(const Var<T>& input) {
  if (input.shape().size() != 4 || input.dim(1) != spec_.recipe.in_channels) {
    throw ShapeError("model '" + spec_.name + "' expects [N," + std::to_string(spec_.recipe.in_channels) + ",H,W], got " +
                     shape_str(input.shape()));
  }
  const std::uint64_t call = mode_ == Mode::Train ? forward_calls_++ : 0;
  std::vector<Var<T>> out(spec_.layers.size());
  auto in = [&](int idx) -> const Var<T>& { return idx < 0 ? input : out[static_cast<std::size_t>(idx)]; };
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& L = spec_.layers[i];
    auto& S = states_[i];
    const Var<T>& x = in(L.inputs[0]);
    const Conv2dOptions co{L.stride, L.dilation, Padding::Same};
    switch (L.kind) {
      case LayerKind::Conv:
        out[i] = conv2d(x, S.weight, S.bias, co);
        break;
      case LayerKind::HyperConv:
        out[i] = S.hyper->forward(x, co);
        break;
      case LayerKind::MaxPool:
        out[i] = max_pool2x2(x);
        break;
      case LayerKind::Upsample:
        out[i] = upsample2x_nearest(x);
        break;
      case LayerKind::Concat:
        out[i] = concat_channels(x, in(L.inputs[1]));
        break;
      case LayerKind::ResidualAdd:
        out[i] = add(x, in(L.inputs[1]));
        break;
      case LayerKind::BatchNorm:
        out[i] = batch_norm2d(x, S.gamma, S.beta, S.bn, mode_);
        break;
      case LayerKind::Activation:
        switch (L.activation) {
          case ActivationKind::Identity: out[i] = x; break;
          case ActivationKind::Relu: out[i] = relu(x); break;
          case ActivationKind::LeakyRelu: out[i] = leaky_relu(x, static_cast<T>(L.slope)); break;
          case ActivationKind::Sigmoid: out[i] = sigmoid(x); break;
        }
        break;
      case LayerKind::Dropout:
        out[i] = dropout(x, L.dropout_p, mode_, mix64(dropout_seed_ ^ mix64(call * 0x9e3779b97f4a7c15ULL + i)));
        break;
      case LayerKind::NonLocal:
        out[i] = nonlocal_block(x, *S.nonlocal);
        break;
    }
  }
  return out.back();
}

template <typename T>
void Model<T>::set_mode(Mode mode) {
  mode_ = mode;
  for (auto& S : states_) {
    if (!S.hyper) continue;
    if (mode == Mode::Eval)
      S.hyper->freeze();
    else
      S.hyper->unfreeze();
  }
}

template <typename T>
std::vector<typename Model<T>::NamedParam> Model<T>::parameters() const {
  std::vector<NamedParam> ps;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& L = spec_.layers[i];
    const auto& S = states_[i];
    switch (L.kind) {
      case LayerKind::Conv:
        ps.push_back({L.name + ".weight", S.weight});
        ps.push_back({L.name + ".bias", S.bias});
        break;
      case LayerKind::HyperConv: {
        const auto vars = S.hyper->parameters();
        const auto names = S.hyper->parameter_names();
        for (std::size_t k = 0; k < vars.size(); ++k) ps.push_back({L.name + "." + names[k], vars[k]});
        break;
      }
      case LayerKind::BatchNorm:
        ps.push_back({L.name + ".gamma", S.gamma});
        ps.push_back({L.name + ".beta", S.beta});
        break;
      case LayerKind::NonLocal: {
        const char* names[] = {"query.weight", "query.bias", "key.weight", "key.bias",
                               "value.weight", "value.bias", "out.weight", "out.bias"};
        const auto vars = S.nonlocal->all();
        for (std::size_t k = 0; k < vars.size(); ++k) ps.push_back({L.name + "." + names[k], vars[k]});
        break;
      }
      default:
        break;
    }
  }
  return ps;
}

template <typename T>
std::vector<Var<T>> Model<T>::parameter_vars() const {
  std::vector<Var<T>> vs;
  for (auto& p : parameters()) vs.push_back(p.var);
  return vs;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Model<T>::buffers() {
  std::vector<std::pair<std::string, Tensor<T>*>> bs;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    if (spec_.layers[i].kind != LayerKind::BatchNorm) continue;
    bs.emplace_back(spec_.layers[i].name + ".running_mean", &states_[i].bn.running_mean);
    bs.emplace_back(spec_.layers[i].name + ".running_var", &states_[i].bn.running_var);
  }
  return bs;
}

template <typename T>
ModelSummary Model<T>::summary() const {
  ModelSummary s;
  s.name = spec_.name;
  const auto params = parameters();
  for (const auto& L : spec_.layers) {
    std::int64_t n = 0;
    const std::string prefix = L.name + ".";
    for (const auto& p : params) {
      if (p.name.compare(0, prefix.size(), prefix) == 0) n += p.var.value().size();
    }
    s.layers.push_back({L.name, L.kind, n});
    s.total += n;
  }
  s.receptive_field = receptive_field(spec_);
  return s;
}

template <typename T>
std::vector<NamedKernel> Model<T>::materialize_all() const {
  NoGradGuard guard;
  std::vector<NamedKernel> ks;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& L = spec_.layers[i];
    if (L.kind == LayerKind::Conv) ks.push_back({L.name, states_[i].weight.value().template cast<double>()});
    if (L.kind == LayerKind::HyperConv) ks.push_back({L.name, states_[i].hyper->kernel().value().template cast<double>()});
  }
  return ks;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Model<T>::state() const {
  std::vector<std::pair<std::string, Tensor<T>>> st;
  for (const auto& p : parameters()) st.emplace_back(p.name, p.var.value());
  for (auto& b : const_cast<Model*>(this)->buffers()) st.emplace_back(b.first, *b.second);
  return st;
}

template <typename T>
void Model<T>::load_state(const std::vector<std::pair<std::string, Tensor<T>>>& state) {
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& [name, t] : state) by_name[name] = &t;
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor<T>& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::invalid_argument("state is missing tensor '" + name + "'");
    if (it->second->shape() != shape) {
      throw ShapeError("state tensor '" + name + "' has shape " + shape_str(it->second->shape()) + ", expected " + shape_str(shape));
    }
    return *it->second;
  };
  for (auto& p : parameters()) p.var.value_mut() = fetch(p.name, p.var.shape());
  for (auto& b : buffers()) *b.second = fetch(b.first, b.second->shape());
  if (by_name.size() != parameters().size() + buffers().size()) {
    throw std::invalid_argument("state has tensors that do not belong to model '" + spec_.name + "'");
  }
  set_mode(mode_);
}

template NonLocalParams<float> make_nonlocal_params<float>(int, Rng&);
template NonLocalParams<double> make_nonlocal_params<double>(int, Rng&);
template Var<float> nonlocal_block<float>(const Var<float>&, const NonLocalParams<float>&, Tensor<float>*);
template Var<double> nonlocal_block<double>(const Var<double>&, const NonLocalParams<double>&, Tensor<double>*);
template class Model<float>;
template class Model<double>;

}  // namespace hconv
