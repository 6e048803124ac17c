#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hyperconv/analysis.hpp"
#include "hyperconv/serialize.hpp"

namespace hconv {

/// Thrown for anything wrong with the config or the files it names (exit 1).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  std::filesystem::path dir;  // empty: <output_dir>/data
  int size = 64;
  std::int64_t train = 200;
  std::int64_t val = 50;
  std::int64_t test = 100;
  double acceleration = 8.0;          // reconstruction only
  std::optional<std::uint64_t> mask_seed;  // defaults to a value derived from the global seed
};

struct SweepModel {
  std::string name;
  std::filesystem::path snapshot;
};

struct SweepConfig {
  std::vector<SweepModel> models;
  std::vector<NoiseGrid> grid;  // kinds without explicit levels use default_levels
  std::uint64_t noise_seed = 0;
  std::string split = "test";
};

struct DistillConfig {
  std::filesystem::path target;
  HyperNetConfig hyper;
  int iters = 5000;
  double lr = 1e-3;
};

struct ExperimentConfig {
  TaskKind task = TaskKind::Segmentation;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  DatasetConfig dataset;
  std::optional<ArchitectureSpec> architecture;
  RunConfig run;
  SweepConfig sweep;
  std::optional<DistillConfig> distill;

  std::filesystem::path data_dir() const { return dataset.dir.empty() ? output_dir / "data" : dataset.dir; }
  std::filesystem::path snapshot_path() const { return output_dir / "model.hcts"; }
};

void to_json(Json& j, const ExperimentConfig& c);
/// Relative paths are taken relative to `base`.
ExperimentConfig experiment_from_json(const Json& j, const std::filesystem::path& base = {});
ExperimentConfig load_experiment(const std::filesystem::path& path);

struct CliOptions {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  int threads = 0;  // 0 keeps the default
  std::optional<std::filesystem::path> snapshot;
};

enum ExitCode : int { kOk = 0, kConfigError = 1, kNumericalError = 2 };

int cmd_gen_data(const ExperimentConfig& c, std::ostream& out);
int cmd_train(const ExperimentConfig& c, std::ostream& out);
int cmd_eval(const ExperimentConfig& c, const std::filesystem::path& snapshot, std::ostream& out);
int cmd_report(const ArchitectureSpec& spec, const std::filesystem::path& out_dir, std::ostream& out);
int cmd_sweep(const ExperimentConfig& c, std::ostream& out);
int cmd_analyze_kernels(const std::filesystem::path& snapshot, const std::filesystem::path& out_dir, std::ostream& out,
                        std::ostream& warn);
int cmd_distill(const ExperimentConfig& c, std::ostream& out);

const std::vector<std::string>& command_names();

/// Loads the config, applies flag overrides, runs `command` and maps errors
/// to exit codes. Messages go to `err`.
int run_command(const std::string& command, const CliOptions& opts, std::ostream& out, std::ostream& err);

/// Human-readable parameter table.
std::string format_summary(const ModelSummary& s);

}  // namespace hconv
