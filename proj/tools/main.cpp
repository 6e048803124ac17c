#include <iostream>

#include "CLI11.hpp"
#include "hyperconv/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Hyper-convolution experiments: data, training, sweeps and kernel analysis"};
  app.require_subcommand(1, 1);

  hconv::CliOptions opts;
  std::string config, out, snapshot;
  std::uint64_t seed = 0;
  app.add_option("--config", config, "experiment config (JSON)");
  auto* seed_opt = app.add_option("--seed", seed, "global seed, overrides the config");
  auto* out_opt = app.add_option("--out", out, "output directory, overrides the config");
  app.add_option("--threads", opts.threads, "worker threads")->check(CLI::PositiveNumber);

  const char* help[] = {"generate train/val/test splits", "train a model and keep the best-validation snapshot",
                        "score a snapshot on the test split", "print parameter counts and receptive field",
                        "noise robustness sweep over saved snapshots", "per-layer kernel smoothness of a snapshot",
                        "fit a coordinate network to a target kernel"};
  const auto& names = hconv::command_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto* sub = app.add_subcommand(names[i], help[i]);
    if (names[i] == "eval" || names[i] == "report" || names[i] == "analyze-kernels") {
      sub->add_option("--snapshot", snapshot, "model snapshot (.hcts)");
    }
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : hconv::kConfigError;
  }
  opts.config = config;
  if (*seed_opt) opts.seed = seed;
  if (*out_opt) opts.out = out;
  if (!snapshot.empty()) opts.snapshot = snapshot;
  return hconv::run_command(app.get_subcommands().front()->get_name(), opts, std::cout, std::cerr);
}
