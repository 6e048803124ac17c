#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "hyperconv/cli.hpp"
#include "hyperconv/io.hpp"
#include "hyperconv/ops.hpp"

namespace py = pybind11;
using namespace hconv;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;

template <typename T, typename A>
Tensor<T> to_tensor(const A& a) {
  Shape s(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(s, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_numpy(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.ptr(), t.ptr() + t.size(), out.mutable_data());
  return out;
}

ArchitectureSpec spec_from(const std::string& json) { return Json::parse(json).get<ArchitectureSpec>(); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Hyper-convolution kernels, models and experiment tools";

  m.def(
      "conv2d",
      [](F64 x, F64 w, std::optional<F64> b, int stride, int dilation, bool same) {
        Conv2dOptions o{stride, dilation, same ? Padding::Same : Padding::Valid};
        Var<double> bias = b ? Var<double>(to_tensor<double>(*b)) : Var<double>();
        return to_numpy(conv2d(Var<double>(to_tensor<double>(x)), Var<double>(to_tensor<double>(w)), bias, o).value());
      },
      py::arg("x"), py::arg("w"), py::arg("bias") = py::none(), py::arg("stride") = 1, py::arg("dilation") = 1,
      py::arg("same") = true);

  m.def(
      "hyper_kernel",
      [](int k, int n_in, int n_out, int n_last, std::uint64_t seed) {
        Rng rng(seed);
        HyperConvLayer<double> layer(k, k, n_in, n_out, HyperNetConfig::with_last_width(n_last), rng);
        return py::make_tuple(to_numpy(layer.kernel().value()), layer.parameter_count());
      },
      py::arg("kernel_size"), py::arg("in_channels"), py::arg("out_channels"), py::arg("n_last") = 4, py::arg("seed") = 0,
      "Materialized [O,I,k,k] kernel of a freshly initialized layer and its learnable count.");

  m.def(
      "summary_json", [](const std::string& arch) { return summary_json(closed_form_summary(spec_from(arch))).dump(); },
      py::arg("architecture_json"));
  m.def(
      "spec_json", [](const std::string& arch) { return Json(spec_from(arch)).dump(); }, py::arg("architecture_json"));

  m.def(
      "vd_mask", [](int h, int w, double acc, std::uint64_t seed) { return to_numpy(make_vd_mask(h, w, acc, seed).mask); },
      py::arg("h"), py::arg("w"), py::arg("acceleration"), py::arg("seed") = 0);
  m.def(
      "zero_fill", [](F64 image, F32 mask) { return to_numpy(undersample_zero_fill(to_tensor<double>(image), to_tensor<float>(mask))); },
      py::arg("image"), py::arg("mask"));
  m.def(
      "blob_sample",
      [](std::uint64_t seed, std::int64_t index, int size) {
        auto s = make_blob_sample(seed, index, size);
        return py::make_tuple(to_numpy(s.image), to_numpy(s.target));
      },
      py::arg("seed"), py::arg("index"), py::arg("size") = 64);
  m.def(
      "phantom", [](std::uint64_t seed, std::int64_t index, int size) { return to_numpy(make_phantom(seed, index, size)); },
      py::arg("seed"), py::arg("index"), py::arg("size") = 64);
  m.def(
      "add_noise",
      [](F32 image, const std::string& kind, double level, std::uint64_t seed, std::optional<F32> mask) {
        std::optional<Tensor<float>> mt;
        if (mask) mt = to_tensor<float>(*mask);
        return to_numpy(add_noise(to_tensor<float>(image), NoiseSpec{parse_noise_kind(kind), level, seed}, mt ? &*mt : nullptr));
      },
      py::arg("image"), py::arg("kind"), py::arg("level"), py::arg("seed") = 0, py::arg("mask") = py::none());

  m.def(
      "kernel_laplacian", [](F64 k) { return kernel_laplacian(to_tensor<double>(k)); }, py::arg("kernel"));
  m.def(
      "distill",
      [](F64 target, int n_last, int iters, double lr, std::uint64_t seed) {
        auto t = to_tensor<double>(target);
        if (t.rank() == 2) t = t.reshaped(Shape{1, 1, t.dim(0), t.dim(1)});
        RecapResult r = [&] {
          py::gil_scoped_release nogil;
          return recapitulate_kernel(t, HyperNetConfig::with_last_width(n_last), iters, lr, seed);
        }();
        return py::make_tuple(to_numpy(r.layer.kernel().value()), r.final_l2);
      },
      py::arg("target"), py::arg("n_last") = 8, py::arg("iters") = 5000, py::arg("lr") = 1e-3, py::arg("seed") = 0,
      "Fits a coordinate network to a kernel; returns (fitted kernel, final mean squared error).");

  m.def(
      "load_tensor",
      [](const std::string& path) -> py::object {
        auto any = load_any_tensor(path);
        if (auto* d = std::get_if<Tensor<double>>(&any)) return to_numpy(*d);
        return to_numpy(std::get<Tensor<float>>(any));
      },
      py::arg("path"));
  m.def(
      "save_tensor",
      [](const std::string& path, py::array a) {
        if (a.dtype().is(py::dtype::of<float>())) {
          save_tensor(path, to_tensor<float>(F32::ensure(a)));
        } else {
          save_tensor(path, to_tensor<double>(F64::ensure(a)));
        }
      },
      py::arg("path"), py::arg("array"));

  m.def(
      "run",
      [](const std::string& command, const std::string& config, std::optional<std::uint64_t> seed, std::optional<std::string> out,
         std::optional<std::string> snapshot) {
        CliOptions o;
        o.config = config;
        o.seed = seed;
        if (out) o.out = *out;
        if (snapshot) o.snapshot = *snapshot;
        std::ostringstream so, se;
        int code;
        {
          py::gil_scoped_release nogil;
          code = run_command(command, o, so, se);
        }
        return py::make_tuple(code, so.str(), se.str());
      },
      py::arg("command"), py::arg("config") = "", py::arg("seed") = py::none(), py::arg("out") = py::none(),
      py::arg("snapshot") = py::none(), "Runs a CLI command in-process; returns (exit code, stdout, stderr).");
}
