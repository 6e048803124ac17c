#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hyperconv/architectures.hpp"
#include "hyperconv/train.hpp"

namespace hconv {

/// Mean absolute 5-point Laplacian (center -4, orthogonal neighbours +1) over
/// interior taps of every 2D slice of an [O,I,k,k] (or [k,k]) kernel.
double kernel_laplacian(const Tensor<double>& kernel);

struct LayerSmoothness {
  std::string layer;
  int kernel = 0;
  double laplacian = 0.0;
};

struct SmoothnessReport {
  std::vector<LayerSmoothness> layers;  // forward order
  std::vector<std::string> skipped;     // kernels smaller than 3x3
};

SmoothnessReport smoothness_of(const std::vector<NamedKernel>& kernels);
SmoothnessReport layerwise_smoothness(const Model<float>& model);

struct RecapResult {
  HyperConvLayer<double> layer;  // fitted coordinate network (best iterate)
  double final_l2 = 0.0;         // best mean squared error reached
  int best_iter = 0;
  std::vector<double> best_so_far;  // per iteration
  bool diverged = false;
};

/// Fits a coordinate network to `target` ([O,I,k,k]) by Adam on the mean
/// squared kernel error. Returns the best iterate.
RecapResult recapitulate_kernel(const Tensor<double>& target, const HyperNetConfig& cfg, int iters, double lr = 1e-3,
                                std::uint64_t seed = 0);

struct SweepRow {
  std::string kind;
  double level = 0.0;
  std::string model;
  double mean = 0.0;
  double stddev = 0.0;
  double min = 0.0;
  double max = 0.0;
  bool reference = false;
  int useful = -1;  // reconstruction: 1 when above the zero-filled reference, else 0; -1 when not applicable
};

struct SweepTable {
  std::string metric;
  std::vector<SweepRow> rows;

  std::string csv() const;
  std::string json() const;
};

struct NoiseGrid {
  NoiseKind kind;
  std::vector<double> levels;
};

struct NamedModel {
  std::string name;
  Model<float>* model;
};

/// Evaluates every (kind, level, model) cell. All models in a cell see the
/// same noisy inputs. Reconstruction sweeps add a zero-filled reference row
/// per cell and flag each model as useful when it beats that reference.
SweepTable robustness_sweep(const std::vector<NamedModel>& models, const Dataset& data, MetricKind metric,
                            const std::vector<NoiseGrid>& grid, std::uint64_t noise_seed, int batch_size = 8);

/// Noise seed of one sweep cell.
std::uint64_t cell_noise_seed(std::uint64_t noise_seed, NoiseKind kind, std::size_t level_index);

/// Default level grids per noise kind.
std::vector<double> default_levels(NoiseKind kind);

}  // namespace hconv
