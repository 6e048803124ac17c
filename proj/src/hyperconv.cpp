#include "hyperconv/hyperconv.hpp"

#include <cmath>
#include <stdexcept>

namespace hconv {

CoordinateGrid make_coordinate_grid(int kh, int kw) {
  if (kh < 1 || kw < 1 || kh % 2 == 0 || kw % 2 == 0) {
    throw std::invalid_argument("coordinate grid needs odd positive sizes, got " + std::to_string(kh) + "x" + std::to_string(kw));
  }
  CoordinateGrid g;
  g.kh = kh;
  g.kw = kw;
  g.coords = Tensor<double>(Shape{2, kh, kw});
  const double sh = kh > 1 ? 2.0 / (kh - 1) : 0.0;
  const double sw = kw > 1 ? 2.0 / (kw - 1) : 0.0;
  const int ch = (kh - 1) / 2;
  const int cw = (kw - 1) / 2;
  for (int r = 0; r < kh; ++r) {
    for (int c = 0; c < kw; ++c) {
      g.coords.at({0, r, c}) = (r - ch) * sh;
      g.coords.at({1, r, c}) = (c - cw) * sw;
    }
  }
  return g;
}

Tensor<double> CoordinateGrid::as_rows() const {
  Tensor<double> rows(Shape{positions(), 2});
  for (int r = 0; r < kh; ++r) {
    for (int c = 0; c < kw; ++c) {
      const auto p = static_cast<std::int64_t>(r) * kw + c;
      rows[2 * p] = coords.at({0, r, c});
      rows[2 * p + 1] = coords.at({1, r, c});
    }
  }
  return rows;
}

CoordinateGrid CoordinateGrid::rotated180() const {
  CoordinateGrid g = *this;
  for (int ax = 0; ax < 2; ++ax)
    for (int r = 0; r < kh; ++r)
      for (int c = 0; c < kw; ++c) g.coords.at({ax, r, c}) = coords.at({ax, kh - 1 - r, kw - 1 - c});
  return g;
}

void HyperNetConfig::validate() const {
  for (int w : hidden_widths) {
    if (w < 1) throw std::invalid_argument("hyper-network hidden widths must be positive");
  }
}

std::int64_t count_params_standard(std::int64_t h, std::int64_t w, std::int64_t n_in, std::int64_t n_out, bool with_bias) {
  return h * w * n_in * n_out + (with_bias ? n_out : 0);
}

HyperParamCount count_params_hyper(const HyperNetConfig& cfg, std::int64_t n_in, std::int64_t n_out, bool with_bias) {
  cfg.validate();
  HyperParamCount c;
  const std::int64_t n_last = cfg.last_width();
  c.approximate = (n_last + 1) * n_in * n_out;
  std::int64_t hidden = 0;
  std::int64_t prev = HyperNetConfig::kInputWidth;
  for (int w : cfg.hidden_widths) {
    hidden += (prev + 1) * w;
    prev = w;
  }
  c.exact = c.approximate + hidden + (with_bias ? n_out : 0);
  return c;
}

namespace {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace

template <typename T>
HyperConvLayer<T>::HyperConvLayer(int kh, int kw, int n_in, int n_out, HyperNetConfig cfg, Rng& rng)
    : grid_(make_coordinate_grid(kh, kw)), n_in_(n_in), n_out_(n_out), cfg_(cfg) {
  cfg_.validate();
  if (n_in < 1 || n_out < 1) throw std::invalid_argument("hyper-convolution channel counts must be positive");

  // Hidden layers: fan-in scaled uniform weights and biases.
  std::vector<std::int64_t> widths{HyperNetConfig::kInputWidth};
  for (int w : cfg_.hidden_widths) widths.push_back(w);
  widths.push_back(static_cast<std::int64_t>(n_in) * n_out);
  for (int l = 0; l < kLayers - 1; ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    weights_.push_back(Var<T>::parameter(uniform_tensor<T>(Shape{widths[l + 1], widths[l]}, bound, rng)));
    biases_.push_back(Var<T>::parameter(uniform_tensor<T>(Shape{widths[l + 1]}, bound, rng)));
  }

  // Final layer: scaled so the generated kernel has the variance of a
  // fan-in uniform standard kernel, 1 / (3 * n_in * kh * kw).
  double mean_sq = 0.0;
  {
    Tensor<double> h = grid_.as_rows();
    for (int l = 0; l < kLayers - 1; ++l) {
      const auto& w = weights_[static_cast<std::size_t>(l)].value();
      const auto& b = biases_[static_cast<std::size_t>(l)].value();
      const auto rows = h.dim(0), in = h.dim(1), out = w.dim(0);
      Tensor<double> next(Shape{rows, out});
      for (std::int64_t p = 0; p < rows; ++p) {
        for (std::int64_t o = 0; o < out; ++o) {
          double s = b[o];
          for (std::int64_t i = 0; i < in; ++i) s += static_cast<double>(w[o * in + i]) * h[p * in + i];
          next[p * out + o] = s >= 0.0 ? s : HyperNetConfig::kLeakySlope * s;
        }
      }
      h = std::move(next);
    }
    for (std::int64_t i = 0; i < h.size(); ++i) mean_sq += h[i] * h[i];
    mean_sq /= static_cast<double>(std::max<std::int64_t>(h.size(), 1));
    if (mean_sq < 1e-12) mean_sq = 1.0;
  }
  const double fan = static_cast<double>(n_in) * kh * kw;
  const double final_bound = 1.0 / std::sqrt(static_cast<double>(cfg_.last_width()) * mean_sq * fan);
  weights_.push_back(Var<T>::parameter(uniform_tensor<T>(Shape{widths[kLayers], widths[kLayers - 1]}, final_bound, rng)));
  biases_.push_back(Var<T>::parameter(Tensor<T>(Shape{widths[kLayers]})));

  bias_ = Var<T>::parameter(uniform_tensor<T>(Shape{n_out}, 1.0 / std::sqrt(fan), rng));
}

template <typename T>
std::vector<Var<T>> HyperConvLayer<T>::parameters() const {
  std::vector<Var<T>> ps;
  for (int l = 0; l < kLayers; ++l) {
    ps.push_back(weights_[static_cast<std::size_t>(l)]);
    ps.push_back(biases_[static_cast<std::size_t>(l)]);
  }
  ps.push_back(bias_);
  return ps;
}

template <typename T>
std::vector<std::string> HyperConvLayer<T>::parameter_names() const {
  std::vector<std::string> names;
  for (int l = 0; l < kLayers; ++l) {
    names.push_back("theta" + std::to_string(l) + ".weight");
    names.push_back("theta" + std::to_string(l) + ".bias");
  }
  names.emplace_back("bias");
  return names;
}

template <typename T>
std::int64_t HyperConvLayer<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.value().size();
  return n;
}

template <typename T>
Var<T> HyperConvLayer<T>::kernel(const CoordinateGrid& grid) const {
  Var<T> h(grid.as_rows().template cast<T>());
  const auto slope = static_cast<T>(HyperNetConfig::kLeakySlope);
  for (int l = 0; l < kLayers - 1; ++l) {
    h = leaky_relu(linear(h, weights_[static_cast<std::size_t>(l)], biases_[static_cast<std::size_t>(l)]), slope);
  }
  // [P, N_out*N_in] -> [N_out*N_in, P] -> [N_out, N_in, kh, kw]
  auto out = linear(h, weights_.back(), biases_.back());
  return reshape(transpose2d(out), Shape{n_out_, n_in_, grid.kh, grid.kw});
}

template <typename T>
Var<T> HyperConvLayer<T>::kernel() const {
  if (cached_) return *cached_;
  return kernel(grid_);
}

template <typename T>
Var<T> HyperConvLayer<T>::forward(const Var<T>& input, const Conv2dOptions& opt) const {
  if (input.shape().size() != 4 || input.dim(1) != n_in_) {
    throw ShapeError("hyper-convolution expects " + std::to_string(n_in_) + " input channels, got input " + shape_str(input.shape()));
  }
  return conv2d(input, kernel(), bias_, opt);
}

template <typename T>
void HyperConvLayer<T>::freeze() {
  NoGradGuard guard;
  cached_ = Var<T>(kernel(grid_).value(), false);
}

template class HyperConvLayer<float>;
template class HyperConvLayer<double>;

}  // namespace hconv
