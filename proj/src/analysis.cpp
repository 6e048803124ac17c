#include "hyperconv/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "hyperconv/optim.hpp"
#include "hyperconv/serialize.hpp"

namespace hconv {

double kernel_laplacian(const Tensor<double>& kernel) {
  if (kernel.rank() != 2 && kernel.rank() != 4) throw ShapeError("kernel_laplacian expects [k,k] or [O,I,k,k]");
  const auto kh = kernel.dim(-2), kw = kernel.dim(-1);
  if (kh < 3 || kw < 3) throw std::invalid_argument("kernel_laplacian needs kernels of at least 3x3");
  const auto slices = kernel.size() / (kh * kw);
  double acc = 0.0;
  std::int64_t n = 0;
  for (std::int64_t s = 0; s < slices; ++s) {
    const double* k = kernel.ptr() + s * kh * kw;
    for (std::int64_t y = 1; y < kh - 1; ++y)
      for (std::int64_t x = 1; x < kw - 1; ++x) {
        const double lap = k[(y - 1) * kw + x] + k[(y + 1) * kw + x] + k[y * kw + x - 1] + k[y * kw + x + 1] - 4.0 * k[y * kw + x];
        acc += std::abs(lap);
        ++n;
      }
  }
  return acc / static_cast<double>(n);
}

SmoothnessReport smoothness_of(const std::vector<NamedKernel>& kernels) {
  SmoothnessReport r;
  for (const auto& k : kernels) {
    const auto size = k.kernel.dim(-1);
    if (k.kernel.dim(-2) < 3 || size < 3) {
      r.skipped.push_back(k.layer);
      continue;
    }
    r.layers.push_back({k.layer, static_cast<int>(size), kernel_laplacian(k.kernel)});
  }
  return r;
}

SmoothnessReport layerwise_smoothness(const Model<float>& model) { return smoothness_of(model.materialize_all()); }

RecapResult recapitulate_kernel(const Tensor<double>& target, const HyperNetConfig& cfg, int iters, double lr, std::uint64_t seed) {
  if (iters < 1) throw std::invalid_argument("iters must be >= 1");
  if (target.rank() != 4) throw ShapeError("target kernel must be [O,I,k,k], got " + shape_str(target.shape()));
  Rng rng(seed, 0x4EC4);
  HyperConvLayer<double> layer(static_cast<int>(target.dim(2)), static_cast<int>(target.dim(3)), static_cast<int>(target.dim(1)),
                               static_cast<int>(target.dim(0)), cfg, rng);
  // The output bias plays no part in the kernel; fit only the network.
  std::vector<Var<double>> theta;
  for (int l = 0; l < HyperConvLayer<double>::kLayers; ++l) {
    theta.push_back(layer.weight(l));
    theta.push_back(layer.layer_bias(l));
  }
  Adam<double> opt(theta, AdamConfig{lr, 0.9, 0.999, 1e-8});
  const Var<double> tgt(target);

  RecapResult r{layer, std::numeric_limits<double>::infinity(), 0, {}, false};
  auto snapshot = [&] {
    std::vector<Tensor<double>> vals;
    for (auto& p : theta) vals.push_back(p.value());
    return vals;
  };
  std::vector<Tensor<double>> best = snapshot();
  for (int it = 1; it <= iters; ++it) {
    opt.zero_grad();
    Var<double> loss;
    try {
      auto diff = sub(layer.kernel(), tgt);
      loss = mean(square(diff));
    } catch (const NumericalError&) {
      r.diverged = true;
      break;
    }
    const double l = loss.value()[0];
    if (!std::isfinite(l)) {
      r.diverged = true;
      break;
    }
    if (l < r.final_l2) {
      r.final_l2 = l;
      r.best_iter = it - 1;  // loss of the parameters before this step
      best = snapshot();
    }
    r.best_so_far.push_back(r.final_l2);
    backward(loss);
    opt.step();
  }
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i].value_mut() = best[i];
  r.layer = layer;
  return r;
}

// ---------------------------------------------------------------------------
// Sweeps

std::vector<double> default_levels(NoiseKind kind) {
  std::vector<double> v;
  auto ramp = [&](double step, int n) {
    for (int i = 0; i <= n; ++i) v.push_back(round6(step * i));
  };
  switch (kind) {
    case NoiseKind::Gaussian: ramp(0.025, 6); break;
    case NoiseKind::SaltPepper: ramp(0.01, 10); break;
    case NoiseKind::Speckle: ramp(0.05, 6); break;
    case NoiseKind::KspaceGaussian: ramp(0.05, 6); break;
  }
  return v;
}

std::uint64_t cell_noise_seed(std::uint64_t noise_seed, NoiseKind kind, std::size_t level_index) {
  return mix64(mix64(noise_seed ^ (static_cast<std::uint64_t>(kind) + 1) * 0x51ed27f1ULL) + level_index);
}

namespace {

SweepRow row_of(const std::string& kind, double level, const std::string& model, const EvalResult& e) {
  SweepRow r;
  r.kind = kind;
  r.level = level;
  r.model = model;
  r.mean = e.mean;
  double var = 0.0;
  r.min = std::numeric_limits<double>::infinity();
  r.max = -std::numeric_limits<double>::infinity();
  for (double v : e.per_sample) {
    var += (v - e.mean) * (v - e.mean);
    r.min = std::min(r.min, v);
    r.max = std::max(r.max, v);
  }
  r.stddev = e.per_sample.empty() ? 0.0 : std::sqrt(var / static_cast<double>(e.per_sample.size()));
  if (e.per_sample.empty()) r.min = r.max = 0.0;
  return r;
}

}  // namespace

SweepTable robustness_sweep(const std::vector<NamedModel>& models, const Dataset& data, MetricKind metric,
                            const std::vector<NoiseGrid>& grid, std::uint64_t noise_seed, int batch_size) {
  if (grid.empty()) throw std::invalid_argument("sweep needs at least one noise kind");
  for (const auto& g : grid) {
    if (g.levels.empty()) throw std::invalid_argument("sweep level grid for " + to_string(g.kind) + " is empty");
  }
  SweepTable t;
  t.metric = to_string(metric);
  const bool recon = data.task == TaskKind::Reconstruction;
  for (auto& m : models) m.model->set_mode(Mode::Eval);
  for (const auto& g : grid) {
    for (std::size_t li = 0; li < g.levels.size(); ++li) {
      const NoiseSpec ns{g.kind, g.levels[li], cell_noise_seed(noise_seed, g.kind, li)};
      double reference = 0.0;
      if (recon) {
        auto zf = evaluate_predictor([](const Tensor<float>& x) { return x; }, data, metric, ns, batch_size);
        auto row = row_of(to_string(g.kind), g.levels[li], "zero_filled", zf);
        row.reference = true;
        reference = zf.mean;
        t.rows.push_back(row);
      }
      for (const auto& m : models) {
        auto row = row_of(to_string(g.kind), g.levels[li], m.name, evaluate(*m.model, data, metric, ns, batch_size));
        if (recon) row.useful = row.mean > reference ? 1 : 0;
        t.rows.push_back(row);
      }
    }
  }
  return t;
}

std::string SweepTable::csv() const {
  std::ostringstream os;
  os << "noise_kind,level,model,mean_" << metric << ",std,min,max,reference,useful\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    os << r.kind << ',' << num(r.level) << ',' << r.model << ',' << num(r.mean) << ',' << num(r.stddev) << ',' << num(r.min) << ','
       << num(r.max) << ',' << (r.reference ? 1 : 0) << ',' << (r.useful < 0 ? std::string() : std::to_string(r.useful)) << '\n';
  }
  return os.str();
}

std::string SweepTable::json() const {
  Json rows_j = Json::array();
  for (const auto& r : rows) {
    Json j{{"noise_kind", r.kind},          {"level", round6(r.level)}, {"model", r.model},
           {"mean", round6(r.mean)},        {"std", round6(r.stddev)},  {"min", round6(r.min)},
           {"max", round6(r.max)},          {"reference", r.reference}};
    j["useful"] = r.useful < 0 ? Json(nullptr) : Json(r.useful == 1);
    rows_j.push_back(j);
  }
  return Json{{"metric", metric}, {"rows", rows_j}}.dump(2) + "\n";
}

}  // namespace hconv
