#include "hyperconv/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "hyperconv/parallel.hpp"
#include "hyperconv/rng.hpp"

namespace hconv {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void accumulate(Node<T>& parent, const Tensor<T>& g) {
  if (!parent.requires_grad) return;
  auto& dst = parent.ensure_grad();
  T* d = dst.ptr();
  const T* s = g.ptr();
  for (std::int64_t i = 0, n = g.size(); i < n; ++i) d[i] += s[i];
}

void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
  }
}

}  // namespace

ConvAxis conv_axis(std::int64_t in, std::int64_t k, const Conv2dOptions& opt) {
  if (opt.stride < 1 || opt.dilation < 1) throw std::invalid_argument("conv2d: stride and dilation must be >= 1");
  const std::int64_t span = opt.dilation * (k - 1) + 1;
  ConvAxis ax;
  if (opt.padding == Padding::Valid) {
    if (in < span) throw ShapeError("conv2d: kernel extent larger than input in valid mode");
    ax.out = (in - span) / opt.stride + 1;
    ax.pad_begin = 0;
  } else {
    if (k % 2 == 0) throw ShapeError("conv2d: same padding requires odd kernel sizes");
    ax.out = (in + opt.stride - 1) / opt.stride;
    const std::int64_t total = std::max<std::int64_t>((ax.out - 1) * opt.stride + span - in, 0);
    ax.pad_begin = total / 2;
  }
  return ax;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op<T>("add", std::move(out), {a, b}, [](Node<T>& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op<T>("sub", std::move(out), {a, b}, [](Node<T>& self) {
    accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op<T>("mul", std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
  return make_op<T>("scale", std::move(out), {a}, [s](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * a.value()[i];
  return make_op<T>("square", std::move(out), {a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::int64_t i = 0; i < g.size(); ++i) g[i] += T{2} * p.value[i] * self.grad[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  return make_op<T>("sum", Tensor<T>::scalar(a.value().sum()), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const T s = self.grad[0];
    for (std::int64_t i = 0; i < g.size(); ++i) g[i] += s;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const auto n = static_cast<T>(std::max<std::int64_t>(a.value().size(), 1));
  return make_op<T>("mean", Tensor<T>::scalar(a.value().sum() / n), {a}, [n](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const T s = self.grad[0] / n;
    for (std::int64_t i = 0; i < g.size(); ++i) g[i] += s;
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  return make_op<T>("reshape", a.value().reshaped(std::move(shape)), {a}, [](Node<T>& self) {
    accumulate(*self.parents[0], self.grad);
  });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
Var<T> transpose2d(const Var<T>& a) {
  require_rank(a.shape(), 2, "transpose2d");
  const auto m = a.dim(0), n = a.dim(1);
  Tensor<T> out(Shape{n, m});
  MapMat<T>(out.ptr(), n, m) = CMapMat<T>(a.value().ptr(), m, n).transpose();
  return make_op<T>("transpose2d", std::move(out), {a}, [m, n](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    MapMat<T>(g.ptr(), m, n) += CMapMat<T>(self.grad.ptr(), n, m).transpose();
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> out(Shape{m, n});
  MapMat<T>(out.ptr(), m, n).noalias() = CMapMat<T>(a.value().ptr(), m, k) * CMapMat<T>(b.value().ptr(), k, n);
  return make_op<T>("matmul", std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    CMapMat<T> G(self.grad.ptr(), m, n);
    if (pa.requires_grad) {
      MapMat<T>(pa.ensure_grad().ptr(), m, k).noalias() += G * CMapMat<T>(pb.value.ptr(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MapMat<T>(pb.ensure_grad().ptr(), k, n).noalias() += CMapMat<T>(pa.value.ptr(), m, k).transpose() * G;
    }
  });
}

template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool ta, bool tb) {
  require_rank(a.shape(), 3, "bmm");
  require_rank(b.shape(), 3, "bmm");
  const auto batch = a.dim(0);
  if (b.dim(0) != batch) throw ShapeError("bmm: batch sizes differ");
  const auto ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const auto m = ta ? ac : ar;
  const auto k = ta ? ar : ac;
  const auto kb = tb ? bc : br;
  const auto n = tb ? br : bc;
  if (k != kb) throw ShapeError("bmm: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> out(Shape{batch, m, n});
  const T* pa = a.value().ptr();
  const T* pb = b.value().ptr();
  T* po = out.ptr();
  parallel_for(batch, [&](std::int64_t i) {
    CMapMat<T> A(pa + i * ar * ac, ar, ac);
    CMapMat<T> B(pb + i * br * bc, br, bc);
    MapMat<T> O(po + i * m * n, m, n);
    if (ta && tb) O.noalias() = A.transpose() * B.transpose();
    else if (ta) O.noalias() = A.transpose() * B;
    else if (tb) O.noalias() = A * B.transpose();
    else O.noalias() = A * B;
  });
  return make_op<T>("bmm", std::move(out), {a, b}, [=](Node<T>& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    T* ga = na.requires_grad ? na.ensure_grad().ptr() : nullptr;
    T* gb = nb.requires_grad ? nb.ensure_grad().ptr() : nullptr;
    const T* va = na.value.ptr();
    const T* vb = nb.value.ptr();
    const T* go = self.grad.ptr();
    parallel_for(batch, [&](std::int64_t i) {
      CMapMat<T> A(va + i * ar * ac, ar, ac);
      CMapMat<T> B(vb + i * br * bc, br, bc);
      CMapMat<T> G(go + i * m * n, m, n);
      // Effective product O = opA(A) * opB(B); dopA = G opB^T, dopB = opA^T G.
      if (ga) {
        MapMat<T> GA(ga + i * ar * ac, ar, ac);
        if (!ta && !tb) GA.noalias() += G * B.transpose();
        else if (!ta && tb) GA.noalias() += G * B;
        else if (ta && !tb) GA.noalias() += B * G.transpose();
        else GA.noalias() += B.transpose() * G.transpose();
      }
      if (gb) {
        MapMat<T> GB(gb + i * br * bc, br, bc);
        if (!ta && !tb) GB.noalias() += A.transpose() * G;
        else if (ta && !tb) GB.noalias() += A * G;
        else if (!ta && tb) GB.noalias() += G.transpose() * A;
        else GB.noalias() += G.transpose() * A.transpose();
      }
    });
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_rank(x.shape(), 2, "linear");
  require_rank(w.shape(), 2, "linear");
  require_rank(b.shape(), 1, "linear");
  const auto p = x.dim(0), in = x.dim(1), out_f = w.dim(0);
  if (w.dim(1) != in || b.dim(0) != out_f) {
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " + shape_str(b.shape()));
  }
  Tensor<T> out(Shape{p, out_f});
  MapMat<T> O(out.ptr(), p, out_f);
  O.noalias() = CMapMat<T>(x.value().ptr(), p, in) * CMapMat<T>(w.value().ptr(), out_f, in).transpose();
  for (std::int64_t r = 0; r < p; ++r)
    for (std::int64_t c = 0; c < out_f; ++c) O(r, c) += b.value()[c];
  return make_op<T>("linear", std::move(out), {x, w, b}, [p, in, out_f](Node<T>& self) {
    auto& nx = *self.parents[0];
    auto& nw = *self.parents[1];
    auto& nb = *self.parents[2];
    CMapMat<T> G(self.grad.ptr(), p, out_f);
    if (nx.requires_grad) {
      MapMat<T>(nx.ensure_grad().ptr(), p, in).noalias() += G * CMapMat<T>(nw.value.ptr(), out_f, in);
    }
    if (nw.requires_grad) {
      MapMat<T>(nw.ensure_grad().ptr(), out_f, in).noalias() += G.transpose() * CMapMat<T>(nx.value.ptr(), p, in);
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (std::int64_t r = 0; r < p; ++r)
        for (std::int64_t c = 0; c < out_f; ++c) gb[c] += G(r, c);
    }
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  if (slope < T{0} || slope > T{1}) throw std::invalid_argument("leaky_relu: slope must lie in [0,1]");
  Tensor<T> out(a.shape());
  const T* x = a.value().ptr();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = x[i] >= T{0} ? x[i] : slope * x[i];
  return make_op<T>(slope == T{0} ? "relu" : "leaky_relu", std::move(out), {a}, [slope](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::int64_t i = 0; i < g.size(); ++i) g[i] += p.value[i] >= T{0} ? self.grad[i] : slope * self.grad[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const T* x = a.value().ptr();
  for (std::int64_t i = 0; i < out.size(); ++i) {
    out[i] = x[i] >= T{0} ? T{1} / (T{1} + std::exp(-x[i])) : std::exp(x[i]) / (T{1} + std::exp(x[i]));
  }
  return make_op<T>("sigmoid", std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.size(); ++i) {
      const T y = self.value[i];
      g[i] += self.grad[i] * y * (T{1} - y);
    }
  });
}

template <typename T>
Var<T> softmax_lastdim(const Var<T>& a) {
  if (a.shape().empty()) throw ShapeError("softmax_lastdim: scalar input");
  const auto n = a.shape().back();
  const auto rows = a.value().size() / std::max<std::int64_t>(n, 1);
  Tensor<T> out(a.shape());
  const T* x = a.value().ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * n;
    T* yr = out.ptr() + r * n;
    const T mx = *std::max_element(xr, xr + n);
    T s{0};
    for (std::int64_t j = 0; j < n; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (std::int64_t j = 0; j < n; ++j) yr[j] /= s;
  }
  return make_op<T>("softmax", std::move(out), {a}, [rows, n](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = self.value.ptr() + r * n;
      const T* dy = self.grad.ptr() + r * n;
      T dot{0};
      for (std::int64_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      T* gx = g.ptr() + r * n;
      for (std::int64_t j = 0; j < n; ++j) gx[j] += y[j] * (dy[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvGeom {
  std::int64_t n, cin, h, w, cout, kh, kw, oh, ow, pad_t, pad_l, stride, dil;
  std::int64_t k() const { return cin * kh * kw; }
  std::int64_t p() const { return oh * ow; }
  bool direct() const { return kh == 1 && kw == 1 && stride == 1 && pad_t == 0 && pad_l == 0; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const auto P = g.p();
  for (std::int64_t c = 0; c < g.cin; ++c) {
    const T* xc = x + c * g.h * g.w;
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * P;
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t iy = oy * g.stride + i * g.dil - g.pad_t;
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.ow, T{0});
            continue;
          }
          const T* src = xc + iy * g.w;
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const std::int64_t ix = ox * g.stride + j * g.dil - g.pad_l;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  const auto P = g.p();
  for (std::int64_t c = 0; c < g.cin; ++c) {
    T* xc = dx + c * g.h * g.w;
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * P;
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t iy = oy * g.stride + i * g.dil - g.pad_t;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + oy * g.ow;
          T* dst = xc + iy * g.w;
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const std::int64_t ix = ox * g.stride + j * g.dil - g.pad_l;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, const Conv2dOptions& opt) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(kernel.shape(), 4, "conv2d kernel");
  ConvGeom g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  if (kernel.dim(1) != g.cin) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, got " + std::to_string(g.cin));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.shape().size() != 1 || bias.dim(0) != g.cout)) throw ShapeError("conv2d: bias must have shape [C_out]");
  const auto ay = conv_axis(g.h, g.kh, opt);
  const auto ax = conv_axis(g.w, g.kw, opt);
  g.oh = ay.out;
  g.ow = ax.out;
  g.pad_t = ay.pad_begin;
  g.pad_l = ax.pad_begin;
  g.stride = opt.stride;
  g.dil = opt.dilation;

  Tensor<T> out(Shape{g.n, g.cout, g.oh, g.ow});
  const T* x = input.value().ptr();
  const T* wk = kernel.value().ptr();
  const T* bs = has_bias ? bias.value().ptr() : nullptr;
  T* o = out.ptr();
  const auto K = g.k();
  const auto P = g.p();
  parallel_for(g.n, [&](std::int64_t n) {
    const T* xn = x + n * g.cin * g.h * g.w;
    std::vector<T> buf;
    const T* cols = xn;
    if (!g.direct()) {
      buf.resize(static_cast<std::size_t>(K * P));
      im2col(xn, g, buf.data());
      cols = buf.data();
    }
    MapMat<T> O(o + n * g.cout * P, g.cout, P);
    O.noalias() = CMapMat<T>(wk, g.cout, K) * CMapMat<T>(cols, K, P);
    if (bs) {
      for (std::int64_t c = 0; c < g.cout; ++c) O.row(c).array() += bs[c];
    }
  });

  std::vector<Var<T>> inputs{input, kernel};
  if (has_bias) inputs.push_back(bias);
  return make_op<T>("conv2d", std::move(out), std::move(inputs), [g, has_bias](Node<T>& self) {
    auto& nx = *self.parents[0];
    auto& nk = *self.parents[1];
    Node<T>* nb = has_bias ? self.parents[2].get() : nullptr;
    const auto K = g.k();
    const auto P = g.p();
    const T* x = nx.value.ptr();
    const T* wk = nk.value.ptr();
    const T* go = self.grad.ptr();
    T* gx = nx.requires_grad ? nx.ensure_grad().ptr() : nullptr;
    const bool need_k = nk.requires_grad;
    std::vector<Tensor<T>> partial(need_k ? static_cast<std::size_t>(g.n) : 0);

    parallel_for(g.n, [&](std::int64_t n) {
      const T* xn = x + n * g.cin * g.h * g.w;
      CMapMat<T> G(go + n * g.cout * P, g.cout, P);
      CMapMat<T> W(wk, g.cout, K);
      std::vector<T> buf;
      if (need_k) {
        const T* cols = xn;
        if (!g.direct()) {
          buf.resize(static_cast<std::size_t>(K * P));
          im2col(xn, g, buf.data());
          cols = buf.data();
        }
        auto& pk = partial[static_cast<std::size_t>(n)];
        pk = Tensor<T>(Shape{g.cout, K});
        MapMat<T>(pk.ptr(), g.cout, K).noalias() = G * CMapMat<T>(cols, K, P).transpose();
      }
      if (gx) {
        T* gxn = gx + n * g.cin * g.h * g.w;
        if (g.direct()) {
          MapMat<T>(gxn, K, P).noalias() += W.transpose() * G;
        } else {
          buf.resize(static_cast<std::size_t>(K * P));
          MapMat<T> D(buf.data(), K, P);
          D.noalias() = W.transpose() * G;
          col2im_add(buf.data(), g, gxn);
        }
      }
    });

    if (need_k) {
      auto& gk = nk.ensure_grad();
      for (const auto& pk : partial) {
        for (std::int64_t i = 0; i < gk.size(); ++i) gk[i] += pk[i];
      }
    }
    if (nb && nb->requires_grad) {
      auto& gb = nb->ensure_grad();
      for (std::int64_t n = 0; n < g.n; ++n) {
        for (std::int64_t c = 0; c < g.cout; ++c) {
          const T* row = go + (n * g.cout + c) * P;
          T s{0};
          for (std::int64_t i = 0; i < P; ++i) s += row[i];
          gb[c] += s;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Resampling and concatenation
// ---------------------------------------------------------------------------

template <typename T>
Var<T> max_pool2x2(const Var<T>& input) {
  require_rank(input.shape(), 4, "max_pool2x2");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("max_pool2x2: spatial dims must be even, got " + shape_str(input.shape()));
  const auto oh = h / 2, ow = w / 2;
  Tensor<T> out(Shape{n, c, oh, ow});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.size()));
  const T* x = input.value().ptr();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const T* xp = x + p * h * w;
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t xo = 0; xo < ow; ++xo) {
        std::int64_t best = (2 * y) * w + 2 * xo;
        for (std::int64_t dy = 0; dy < 2; ++dy) {
          for (std::int64_t dx = 0; dx < 2; ++dx) {
            const std::int64_t idx = (2 * y + dy) * w + 2 * xo + dx;
            if (xp[idx] > xp[best]) best = idx;
          }
        }
        const auto o = (p * oh + y) * ow + xo;
        out[o] = xp[best];
        argmax[static_cast<std::size_t>(o)] = p * h * w + best;
      }
    }
  }
  return make_op<T>("max_pool2x2", std::move(out), {input}, [argmax = std::move(argmax)](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[static_cast<std::int64_t>(o)];
  });
}

template <typename T>
Var<T> upsample2x_nearest(const Var<T>& input) {
  require_rank(input.shape(), 4, "upsample2x_nearest");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto oh = 2 * h, ow = 2 * w;
  Tensor<T> out(Shape{n, c, oh, ow});
  const T* x = input.value().ptr();
  for (std::int64_t p = 0; p < n * c; ++p) {
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t xo = 0; xo < ow; ++xo) out[(p * oh + y) * ow + xo] = x[(p * h + y / 2) * w + xo / 2];
    }
  }
  return make_op<T>("upsample2x_nearest", std::move(out), {input}, [n, c, h, w](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto oh = 2 * h, ow = 2 * w;
    for (std::int64_t p = 0; p < n * c; ++p) {
      for (std::int64_t y = 0; y < oh; ++y) {
        for (std::int64_t xo = 0; xo < ow; ++xo) g[(p * h + y / 2) * w + xo / 2] += self.grad[(p * oh + y) * ow + xo];
      }
    }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_rank(a.shape(), 4, "concat_channels");
  require_rank(b.shape(), 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const auto n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<T> out(Shape{n, ca + cb, a.dim(2), a.dim(3)});
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(a.value().ptr() + i * ca * hw, ca * hw, out.ptr() + i * (ca + cb) * hw);
    std::copy_n(b.value().ptr() + i * cb * hw, cb * hw, out.ptr() + i * (ca + cb) * hw + ca * hw);
  }
  return make_op<T>("concat_channels", std::move(out), {a, b}, [n, ca, cb, hw](Node<T>& self) {
    for (int side = 0; side < 2; ++side) {
      auto& p = *self.parents[static_cast<std::size_t>(side)];
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      const auto c = side == 0 ? ca : cb;
      const auto off = side == 0 ? 0 : ca * hw;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* src = self.grad.ptr() + i * (ca + cb) * hw + off;
        T* dst = g.ptr() + i * c * hw;
        for (std::int64_t j = 0; j < c * hw; ++j) dst[j] += src[j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and regularization
// ---------------------------------------------------------------------------

template <typename T>
Var<T> batch_norm2d(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state, Mode mode,
                    double eps) {
  require_rank(input.shape(), 4, "batch_norm2d");
  const auto n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) throw ShapeError("batch_norm2d: gamma/beta must have shape [C]");
  if (state.running_mean.shape() != Shape{c}) throw ShapeError("batch_norm2d: running stats have the wrong channel count");
  const T* x = input.value().ptr();
  Tensor<T> out(input.shape());
  Tensor<T> xhat(input.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(c));
  const double count = static_cast<double>(n * hw);

  for (std::int64_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (mode == Mode::Train) {
      double s = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* xp = x + (i * c + ch) * hw;
        for (std::int64_t j = 0; j < hw; ++j) s += xp[j];
      }
      mu = s / count;
      double ss = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* xp = x + (i * c + ch) * hw;
        for (std::int64_t j = 0; j < hw; ++j) {
          const double d = xp[j] - mu;
          ss += d * d;
        }
      }
      var = ss / count;
      const double unbiased = count > 1 ? ss / (count - 1) : var;
      const double m = state.momentum;
      state.running_mean[ch] = static_cast<T>((1 - m) * state.running_mean[ch] + m * mu);
      state.running_var[ch] = static_cast<T>((1 - m) * state.running_var[ch] + m * unbiased);
    } else {
      mu = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(ch)] = static_cast<T>(is);
    const T gm = gamma.value()[ch];
    const T bt = beta.value()[ch];
    for (std::int64_t i = 0; i < n; ++i) {
      const auto off = (i * c + ch) * hw;
      for (std::int64_t j = 0; j < hw; ++j) {
        const T xh = static_cast<T>((x[off + j] - mu) * is);
        xhat[off + j] = xh;
        out[off + j] = gm * xh + bt;
      }
    }
  }

  return make_op<T>("batch_norm2d", std::move(out), {input, gamma, beta},
                    [n, c, hw, mode, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                      auto& nx = *self.parents[0];
                      auto& ng = *self.parents[1];
                      auto& nbt = *self.parents[2];
                      const T* gy = self.grad.ptr();
                      const double count = static_cast<double>(n * hw);
                      for (std::int64_t ch = 0; ch < c; ++ch) {
                        double sum_dy = 0.0, sum_dy_xh = 0.0;
                        for (std::int64_t i = 0; i < n; ++i) {
                          const auto off = (i * c + ch) * hw;
                          for (std::int64_t j = 0; j < hw; ++j) {
                            sum_dy += gy[off + j];
                            sum_dy_xh += static_cast<double>(gy[off + j]) * xhat[off + j];
                          }
                        }
                        if (ng.requires_grad) ng.ensure_grad()[ch] += static_cast<T>(sum_dy_xh);
                        if (nbt.requires_grad) nbt.ensure_grad()[ch] += static_cast<T>(sum_dy);
                        if (!nx.requires_grad) continue;
                        auto& gx = nx.ensure_grad();
                        const double k = static_cast<double>(ng.value[ch]) * inv_std[static_cast<std::size_t>(ch)];
                        const double mdy = sum_dy / count;
                        const double mdyx = sum_dy_xh / count;
                        for (std::int64_t i = 0; i < n; ++i) {
                          const auto off = (i * c + ch) * hw;
                          for (std::int64_t j = 0; j < hw; ++j) {
                            if (mode == Mode::Train) {
                              gx[off + j] += static_cast<T>(k * (gy[off + j] - mdy - xhat[off + j] * mdyx));
                            } else {
                              gx[off + j] += static_cast<T>(k * gy[off + j]);
                            }
                          }
                        }
                      }
                    });
}

template <typename T>
Var<T> dropout(const Var<T>& input, double p, Mode mode, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0,1)");
  if (mode == Mode::Eval || p == 0.0) return input;
  Rng rng(seed, 0xD50D);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> mask(input.shape());
  Tensor<T> out(input.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() >= p ? keep_scale : T{0};
    out[i] = input.value()[i] * mask[i];
  }
  return make_op<T>("dropout", std::move(out), {input}, [mask = std::move(mask)](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

#define HCONV_INSTANTIATE(T)                                                                                 \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> scale(const Var<T>&, T);                                                                   \
  template Var<T> square(const Var<T>&);                                                                     \
  template Var<T> sum(const Var<T>&);                                                                        \
  template Var<T> mean(const Var<T>&);                                                                       \
  template Var<T> reshape(const Var<T>&, Shape);                                                             \
  template Var<T> transpose2d(const Var<T>&);                                                                \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> bmm(const Var<T>&, const Var<T>&, bool, bool);                                             \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                       \
  template Var<T> leaky_relu(const Var<T>&, T);                                                              \
  template Var<T> sigmoid(const Var<T>&);                                                                    \
  template Var<T> softmax_lastdim(const Var<T>&);                                                            \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, const Conv2dOptions&);                 \
  template Var<T> max_pool2x2(const Var<T>&);                                                                \
  template Var<T> upsample2x_nearest(const Var<T>&);                                                         \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                             \
  template Var<T> batch_norm2d(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormState<T>&, Mode, double); \
  template Var<T> dropout(const Var<T>&, double, Mode, std::uint64_t);

HCONV_INSTANTIATE(float)
HCONV_INSTANTIATE(double)

}  // namespace hconv
