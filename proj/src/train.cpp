#include "hyperconv/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "hyperconv/optim.hpp"
#include "hyperconv/rng.hpp"

namespace hconv {

// ---------------------------------------------------------------------------
// Losses

template <typename T>
Var<T> soft_dice_loss(const Var<T>& pred, const Var<T>& target, double eps) {
  check_same_shape(pred.shape(), target.shape(), "soft_dice_loss");
  if (pred.shape().empty()) throw ShapeError("soft_dice_loss needs a batch dimension");
  const auto b = pred.dim(0);
  const auto per = b > 0 ? pred.value().size() / b : 0;
  const T* p = pred.value().ptr();
  const T* t = target.value().ptr();
  std::vector<double> num(static_cast<std::size_t>(b)), den(static_cast<std::size_t>(b));
  double loss = 0.0;
  for (std::int64_t s = 0; s < b; ++s) {
    double pt = 0, pp = 0, tt = 0;
    for (std::int64_t i = s * per; i < (s + 1) * per; ++i) {
      pt += static_cast<double>(p[i]) * t[i];
      pp += static_cast<double>(p[i]) * p[i];
      tt += static_cast<double>(t[i]) * t[i];
    }
    num[static_cast<std::size_t>(s)] = 2 * pt + eps;
    den[static_cast<std::size_t>(s)] = pp + tt + eps;
    loss += 1.0 - num[static_cast<std::size_t>(s)] / den[static_cast<std::size_t>(s)];
  }
  loss /= static_cast<double>(b);
  return make_op<T>("soft_dice_loss", Tensor<T>::scalar(static_cast<T>(loss)), {pred, target},
                    [num, den, b, per](Node<T>& self) {
                      const double g = self.grad[0] / static_cast<double>(b);
                      for (int which = 0; which < 2; ++which) {
                        auto& node = *self.parents[static_cast<std::size_t>(which)];
                        if (!node.requires_grad) continue;
                        const auto& self_v = node.value;
                        const auto& other_v = self.parents[static_cast<std::size_t>(1 - which)]->value;
                        auto& gr = node.ensure_grad();
                        for (std::int64_t s = 0; s < b; ++s) {
                          const double n = num[static_cast<std::size_t>(s)], d = den[static_cast<std::size_t>(s)];
                          for (std::int64_t i = s * per; i < (s + 1) * per; ++i) {
                            gr[i] += static_cast<T>(-g * (2.0 * other_v[i] * d - n * 2.0 * self_v[i]) / (d * d));
                          }
                        }
                      }
                    });
}

template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Var<T>& target) {
  check_same_shape(pred.shape(), target.shape(), "mse_loss");
  const auto n = pred.value().size();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred.value()[i]) - target.value()[i];
    acc += d * d;
  }
  acc /= static_cast<double>(std::max<std::int64_t>(n, 1));
  return make_op<T>("mse_loss", Tensor<T>::scalar(static_cast<T>(acc)), {pred, target}, [n](Node<T>& self) {
    const double g = 2.0 * self.grad[0] / static_cast<double>(n);
    auto& pv = self.parents[0]->value;
    auto& tv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      auto& gr = self.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) gr[i] += static_cast<T>(g * (static_cast<double>(pv[i]) - tv[i]));
    }
    if (self.parents[1]->requires_grad) {
      auto& gr = self.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) gr[i] -= static_cast<T>(g * (static_cast<double>(pv[i]) - tv[i]));
    }
  });
}

template Var<float> soft_dice_loss<float>(const Var<float>&, const Var<float>&, double);
template Var<double> soft_dice_loss<double>(const Var<double>&, const Var<double>&, double);
template Var<float> mse_loss<float>(const Var<float>&, const Var<float>&);
template Var<double> mse_loss<double>(const Var<double>&, const Var<double>&);

// ---------------------------------------------------------------------------
// Metrics

double dice_score(std::span<const float> pred, std::span<const float> target, double threshold) {
  if (pred.size() != target.size()) throw ShapeError("dice_score: size mismatch");
  double inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= threshold, t = target[i] >= threshold;
    inter += p && t;
    a += p;
    b += t;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * inter / (a + b);
}

double mse(std::span<const float> pred, std::span<const float> target) {
  if (pred.size() != target.size()) throw ShapeError("mse: size mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    acc += d * d;
  }
  return pred.empty() ? 0.0 : acc / static_cast<double>(pred.size());
}

double psnr(std::span<const float> pred, std::span<const float> target, double max_val, double cap_db) {
  const double m = mse(pred, target);
  if (m <= 0.0) return cap_db;
  return std::min(cap_db, 10.0 * std::log10(max_val * max_val / m));
}

std::string to_string(LossKind k) { return k == LossKind::SoftDice ? "soft_dice" : "mse"; }
std::string to_string(MetricKind k) { return k == MetricKind::Dice ? "dice" : "psnr"; }
LossKind parse_loss(const std::string& s) {
  if (s == "soft_dice") return LossKind::SoftDice;
  if (s == "mse") return LossKind::Mse;
  throw std::invalid_argument("unknown loss '" + s + "' (expected soft_dice or mse)");
}
MetricKind parse_metric(const std::string& s) {
  if (s == "dice") return MetricKind::Dice;
  if (s == "psnr") return MetricKind::Psnr;
  throw std::invalid_argument("unknown metric '" + s + "' (expected dice or psnr)");
}

void RunConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
}

int best_epoch(const std::vector<double>& val_losses) {
  if (val_losses.empty()) return 0;
  int best = 0;
  for (std::size_t i = 1; i < val_losses.size(); ++i) {
    if (val_losses[i] < val_losses[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best + 1;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

Var<float> loss_of(LossKind kind, const Var<float>& pred, const Var<float>& target) {
  return kind == LossKind::SoftDice ? soft_dice_loss(pred, target) : mse_loss(pred, target);
}

std::vector<std::int64_t> range_indices(std::int64_t begin, std::int64_t end) {
  std::vector<std::int64_t> v(static_cast<std::size_t>(end - begin));
  std::iota(v.begin(), v.end(), begin);
  return v;
}

}  // namespace

std::uint64_t sample_noise_seed(std::uint64_t seed, std::int64_t index) {
  return mix64(mix64(seed) + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(index + 1));
}

EvalResult evaluate_predictor(const Predictor& predict, const Dataset& data, MetricKind metric, const std::optional<NoiseSpec>& noise,
                              int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  EvalResult r;
  for (std::int64_t start = 0; start < data.count(); start += batch_size) {
    const auto idx = range_indices(start, std::min<std::int64_t>(start + batch_size, data.count()));
    Tensor<float> inputs = data.images(idx);
    if (noise && noise->level > 0.0) {
      const auto per = inputs.size() / static_cast<std::int64_t>(idx.size());
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto& img = data.samples[static_cast<std::size_t>(idx[b])].image;
        NoiseSpec ns = *noise;
        ns.seed = sample_noise_seed(noise->seed, idx[b]);
        const Tensor<float>* mask = data.mask ? &data.mask->mask : nullptr;
        auto noisy = add_noise(img, ns, mask);
        std::copy(noisy.ptr(), noisy.ptr() + per, inputs.ptr() + static_cast<std::int64_t>(b) * per);
      }
    }
    const Tensor<float> targets = data.targets(idx);
    const Tensor<float> pred = predict(inputs);
    if (pred.shape() != targets.shape()) {
      throw ShapeError("prediction shape " + shape_str(pred.shape()) + " does not match targets " + shape_str(targets.shape()));
    }
    const auto per = targets.size() / static_cast<std::int64_t>(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::span<const float> p(pred.ptr() + static_cast<std::int64_t>(b) * per, static_cast<std::size_t>(per));
      std::span<const float> t(targets.ptr() + static_cast<std::int64_t>(b) * per, static_cast<std::size_t>(per));
      r.per_sample.push_back(metric == MetricKind::Dice ? dice_score(p, t) : psnr(p, t));
    }
  }
  if (!r.per_sample.empty()) {
    r.mean = std::accumulate(r.per_sample.begin(), r.per_sample.end(), 0.0) / static_cast<double>(r.per_sample.size());
  }
  return r;
}

EvalResult evaluate(Model<float>& model, const Dataset& data, MetricKind metric, const std::optional<NoiseSpec>& noise,
                    int batch_size) {
  model.set_mode(Mode::Eval);
  NoGradGuard guard;
  return evaluate_predictor([&](const Tensor<float>& x) { return model.forward(Var<float>(x)).value(); }, data, metric, noise,
                            batch_size);
}

double dataset_loss(Model<float>& model, const Dataset& data, LossKind loss, int batch_size) {
  model.set_mode(Mode::Eval);
  NoGradGuard guard;
  double total = 0.0;
  for (std::int64_t start = 0; start < data.count(); start += batch_size) {
    const auto idx = range_indices(start, std::min<std::int64_t>(start + batch_size, data.count()));
    auto pred = model.forward(Var<float>(data.images(idx)));
    total += static_cast<double>(loss_of(loss, pred, Var<float>(data.targets(idx))).value()[0]) * static_cast<double>(idx.size());
  }
  return data.count() > 0 ? total / static_cast<double>(data.count()) : 0.0;
}

// ---------------------------------------------------------------------------
// Training

namespace {

Sample augmented(const Dataset& d, std::int64_t i, std::uint64_t seed) {
  const Sample& s = d.samples[static_cast<std::size_t>(i)];
  if (d.task == TaskKind::Segmentation) return augment(s, seed, d.task);
  // Reconstruction: move the fully-sampled image, then re-derive the input.
  Sample out;
  out.seed = s.seed;
  out.target = warp(s.target, draw_augment(seed), false);
  for (auto& v : out.target.storage()) v = std::clamp(v, 0.0f, 1.0f);
  const auto zf = undersample_zero_fill(out.target.cast<double>(), d.mask->mask);
  out.image = Tensor<float>(out.target.shape());
  for (std::int64_t p = 0; p < zf.size(); ++p) out.image[p] = static_cast<float>(std::clamp(zf[p], 0.0, 1.0));
  return out;
}

}  // namespace

RunReport train(Model<float>& model, const Dataset& train_set, const Dataset& val_set, const RunConfig& cfg, const Dataset* test_set,
                const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.count() == 0 || val_set.count() == 0) throw std::invalid_argument("training and validation sets must be nonempty");
  if (train_set.task != val_set.task) throw std::invalid_argument("training and validation sets are for different tasks");
  if (cfg.augment && train_set.task == TaskKind::Reconstruction && !train_set.mask) {
    throw std::invalid_argument("reconstruction augmentation needs the sampling mask");
  }

  RunReport report;
  Adam<float> opt(model.parameter_vars(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  model.set_dropout_seed(mix64(cfg.seed ^ 0xd209u));
  const Rng shuffle_root(cfg.seed, 0x5407);
  std::vector<std::int64_t> order(static_cast<std::size_t>(train_set.count()));

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng = shuffle_root.split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    model.set_mode(Mode::Train);
    double loss_sum = 0.0;
    try {
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<std::int64_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
        Tensor<float> x, y;
        if (cfg.augment) {
          std::vector<Sample> batch;
          for (auto i : idx) {
            const std::uint64_t aseed = mix64(mix64(cfg.seed + 0xa09) ^ (static_cast<std::uint64_t>(epoch) << 32) ^ static_cast<std::uint64_t>(i));
            batch.push_back(augmented(train_set, i, aseed));
          }
          Dataset tmp;
          tmp.samples = std::move(batch);
          const auto all = range_indices(0, tmp.count());
          x = tmp.images(all);
          y = tmp.targets(all);
        } else {
          x = train_set.images(idx);
          y = train_set.targets(idx);
        }
        opt.zero_grad();
        auto loss = loss_of(cfg.loss, model.forward(Var<float>(std::move(x))), Var<float>(std::move(y)));
        const double lv = loss.value()[0];
        if (!std::isfinite(lv)) throw NumericalError("non-finite training loss");
        backward(loss);
        opt.step();
        loss_sum += lv * static_cast<double>(idx.size());
      }
    } catch (const NumericalError& e) {
      report.aborted = true;
      report.diagnostic = "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    try {
      rec.val_loss = dataset_loss(model, val_set, cfg.loss, cfg.batch_size);
      rec.val_metric = evaluate(model, val_set, cfg.metric, std::nullopt, cfg.batch_size).mean;
    } catch (const NumericalError& e) {
      report.aborted = true;
      report.diagnostic = "epoch " + std::to_string(epoch) + " validation: " + e.what();
      break;
    }
    if (!std::isfinite(rec.val_loss)) {
      report.aborted = true;
      report.diagnostic = "epoch " + std::to_string(epoch) + ": non-finite validation loss";
      break;
    }
    report.history.push_back(rec);
    if (report.best_epoch == 0 || rec.val_loss < report.best_val_loss) {
      report.best_epoch = epoch;
      report.best_val_loss = rec.val_loss;
      report.best_state = model.state();
    }
    if (on_epoch) on_epoch(rec);
  }

  if (report.best_epoch > 0) {
    model.load_state(report.best_state);
    model.set_mode(Mode::Eval);
    if (test_set) report.test_metric = evaluate(model, *test_set, cfg.metric, std::nullopt, cfg.batch_size).mean;
  }
  return report;
}

}  // namespace hconv
