#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hyperconv/architectures.hpp"
#include "hyperconv/data.hpp"

namespace hconv {

/// Soft Dice with squared denominator, per sample then averaged over the batch:
/// 1 - (2 sum(p t) + eps) / (sum(p^2) + sum(t^2) + eps).
template <typename T>
Var<T> soft_dice_loss(const Var<T>& pred, const Var<T>& target, double eps = 1e-6);
template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Var<T>& target);

/// Hard Dice after thresholding both inputs; two empty masks score 1.
double dice_score(std::span<const float> pred, std::span<const float> target, double threshold = 0.5);
double mse(std::span<const float> pred, std::span<const float> target);
/// 10 log10(max^2 / MSE), capped for identical images.
double psnr(std::span<const float> pred, std::span<const float> target, double max_val = 1.0, double cap_db = 100.0);

enum class LossKind { SoftDice, Mse };
enum class MetricKind { Dice, Psnr };
std::string to_string(LossKind k);
std::string to_string(MetricKind k);
LossKind parse_loss(const std::string& s);
MetricKind parse_metric(const std::string& s);

struct RunConfig {
  double lr = 1e-4;
  int batch_size = 8;
  int epochs = 10;
  bool augment = false;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::SoftDice;
  MetricKind metric = MetricKind::Dice;

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_metric = 0.0;
};

struct RunReport {
  std::vector<EpochRecord> history;
  int best_epoch = 0;  // 1-based; 0 when no epoch finished
  double best_val_loss = 0.0;
  std::optional<double> test_metric;
  std::vector<std::pair<std::string, Tensor<float>>> best_state;
  bool aborted = false;
  std::string diagnostic;
};

/// 1-based index of the smallest value; the earliest wins ties.
int best_epoch(const std::vector<double>& val_losses);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam training with seeded shuffling and optional per-sample augmentation.
/// After each epoch the model is scored on `val` in eval mode; the state with
/// the lowest validation loss is kept and loaded back into `model` (in eval
/// mode) before returning. When `test` is given it is scored once on that
/// state. A non-finite loss stops training and sets `aborted`.
RunReport train(Model<float>& model, const Dataset& train_set, const Dataset& val_set, const RunConfig& cfg,
                const Dataset* test_set = nullptr, const EpochCallback& on_epoch = {});

struct EvalResult {
  double mean = 0.0;
  std::vector<double> per_sample;
};

/// Maps a [B,C,H,W] input batch to predictions of the target's shape.
using Predictor = std::function<Tensor<float>(const Tensor<float>& inputs)>;

/// Per-sample seed of the noise applied to sample `index` of a dataset.
std::uint64_t sample_noise_seed(std::uint64_t seed, std::int64_t index);

/// Scores predictions on every sample. Noise, if any, perturbs inputs only;
/// sample i always receives the same perturbation for a given noise seed.
EvalResult evaluate_predictor(const Predictor& predict, const Dataset& data, MetricKind metric,
                              const std::optional<NoiseSpec>& noise = std::nullopt, int batch_size = 8);
/// Puts the model in eval mode and scores it.
EvalResult evaluate(Model<float>& model, const Dataset& data, MetricKind metric,
                    const std::optional<NoiseSpec>& noise = std::nullopt, int batch_size = 8);

/// Mean loss over a dataset in eval mode.
double dataset_loss(Model<float>& model, const Dataset& data, LossKind loss, int batch_size = 8);

}  // namespace hconv
