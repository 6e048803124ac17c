#include "hyperconv/cli.hpp"

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "hyperconv/io.hpp"
#include "hyperconv/parallel.hpp"

namespace hconv {

namespace fs = std::filesystem;

namespace {

std::string g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path q(p);
  return q.is_relative() && !base.empty() ? base / q : q;
}

LossKind default_loss(TaskKind t) { return t == TaskKind::Segmentation ? LossKind::SoftDice : LossKind::Mse; }
MetricKind default_metric(TaskKind t) { return t == TaskKind::Segmentation ? MetricKind::Dice : MetricKind::Psnr; }

std::vector<NoiseKind> default_kinds(TaskKind t) {
  if (t == TaskKind::Reconstruction) return {NoiseKind::KspaceGaussian};
  return {NoiseKind::Gaussian, NoiseKind::SaltPepper, NoiseKind::Speckle};
}

std::uint64_t mask_seed_of(const ExperimentConfig& c) {
  return c.dataset.mask_seed ? *c.dataset.mask_seed : mix64(c.seed ^ 0x6d61736bULL);
}

void write_json(const fs::path& p, const Json& j) { write_file(p, j.dump(2) + "\n"); }

Dataset load_split(const ExperimentConfig& c, const std::string& split) {
  const auto dir = c.data_dir();
  if (!fs::exists(dir / "manifest.json")) throw ConfigError("no dataset at " + dir.string() + " (run gen-data first)");
  auto d = load_dataset_split(dir, split);
  if (d.task != c.task) throw ConfigError("dataset at " + dir.string() + " is for task " + to_string(d.task));
  return d;
}

Model<float> load_model(const fs::path& p) {
  if (!fs::exists(p)) throw ConfigError("missing snapshot " + p.string());
  return model_from_snapshot(load_snapshot(p));
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void to_json(Json& j, const ExperimentConfig& c) {
  Json grid = Json::array();
  for (const auto& g : c.sweep.grid) grid.push_back({{"kind", to_string(g.kind)}, {"levels", g.levels}});
  Json models = Json::array();
  for (const auto& m : c.sweep.models) models.push_back({{"name", m.name}, {"snapshot", m.snapshot.string()}});
  Json ds{{"dir", c.dataset.dir.string()},
          {"size", c.dataset.size},
          {"splits", {{"train", c.dataset.train}, {"val", c.dataset.val}, {"test", c.dataset.test}}},
          {"acceleration", c.dataset.acceleration}};
  if (c.dataset.mask_seed) ds["mask_seed"] = *c.dataset.mask_seed;
  j = Json{{"task", to_string(c.task)},
           {"seed", c.seed},
           {"output_dir", c.output_dir.string()},
           {"dataset", ds},
           {"run", c.run},
           {"sweep", {{"models", models}, {"grid", grid}, {"noise_seed", c.sweep.noise_seed}, {"split", c.sweep.split}}}};
  if (c.architecture) j["architecture"] = *c.architecture;
  if (c.distill) {
    j["distill"] = {{"target", c.distill->target.string()},
                    {"hyper", c.distill->hyper},
                    {"iters", c.distill->iters},
                    {"lr", c.distill->lr}};
  }
}

ExperimentConfig experiment_from_json(const Json& j, const fs::path& base) {
  reject_unknown_keys(j, {"task", "seed", "output_dir", "dataset", "architecture", "run", "sweep", "distill"}, "config");
  ExperimentConfig c;
  c.task = parse_task(j.value("task", std::string("segmentation")));
  c.seed = j.value("seed", std::uint64_t{0});
  c.output_dir = resolve(base, j.value("output_dir", std::string("out")));

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    reject_unknown_keys(d, {"dir", "size", "splits", "acceleration", "mask_seed"}, "dataset");
    auto dir = d.value("dir", std::string());
    c.dataset.dir = dir.empty() ? fs::path() : resolve(base, dir);
    c.dataset.size = d.value("size", c.dataset.size);
    if (d.contains("splits")) {
      const auto& s = d.at("splits");
      reject_unknown_keys(s, {"train", "val", "test"}, "dataset.splits");
      c.dataset.train = s.value("train", c.dataset.train);
      c.dataset.val = s.value("val", c.dataset.val);
      c.dataset.test = s.value("test", c.dataset.test);
    }
    c.dataset.acceleration = d.value("acceleration", c.dataset.acceleration);
    if (d.contains("mask_seed")) c.dataset.mask_seed = d.at("mask_seed").get<std::uint64_t>();
  }
  if (c.dataset.size < 8 || c.dataset.size % 8 != 0) throw std::invalid_argument("dataset.size must be a positive multiple of 8");
  if (c.dataset.train < 1 || c.dataset.val < 1 || c.dataset.test < 1) throw std::invalid_argument("every split needs at least one sample");
  if (!(c.dataset.acceleration >= 1.0)) throw std::invalid_argument("dataset.acceleration must be >= 1");

  if (j.contains("architecture")) c.architecture = j.at("architecture").get<ArchitectureSpec>();

  Json run = j.value("run", Json::object());
  if (!run.is_object()) throw std::invalid_argument("run: expected an object");
  if (!run.contains("loss")) run["loss"] = to_string(default_loss(c.task));
  if (!run.contains("metric")) run["metric"] = to_string(default_metric(c.task));
  c.run = run.get<RunConfig>();

  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    reject_unknown_keys(s, {"models", "grid", "noise_seed", "split"}, "sweep");
    for (const auto& m : s.value("models", Json::array())) {
      reject_unknown_keys(m, {"name", "snapshot"}, "sweep.models");
      c.sweep.models.push_back({m.at("name").get<std::string>(), resolve(base, m.at("snapshot").get<std::string>())});
    }
    if (s.contains("grid")) {
      for (const auto& g : s.at("grid")) {
        reject_unknown_keys(g, {"kind", "levels"}, "sweep.grid");
        NoiseGrid ng{parse_noise_kind(g.at("kind").get<std::string>()), {}};
        ng.levels = g.contains("levels") ? g.at("levels").get<std::vector<double>>() : default_levels(ng.kind);
        c.sweep.grid.push_back(ng);
      }
    }
    c.sweep.noise_seed = s.value("noise_seed", c.sweep.noise_seed);
    c.sweep.split = s.value("split", c.sweep.split);
    if (c.sweep.split != "train" && c.sweep.split != "val" && c.sweep.split != "test") {
      throw std::invalid_argument("sweep.split must be train, val or test");
    }
  }
  if (!j.contains("sweep") || !j.at("sweep").contains("grid")) {
    for (auto k : default_kinds(c.task)) c.sweep.grid.push_back({k, default_levels(k)});
  }

  if (j.contains("distill")) {
    const auto& d = j.at("distill");
    reject_unknown_keys(d, {"target", "hyper", "iters", "lr"}, "distill");
    DistillConfig dc;
    dc.target = resolve(base, d.at("target").get<std::string>());
    if (d.contains("hyper")) dc.hyper = d.at("hyper").get<HyperNetConfig>();
    dc.iters = d.value("iters", dc.iters);
    dc.lr = d.value("lr", dc.lr);
    if (dc.iters < 1 || !(dc.lr > 0)) throw std::invalid_argument("distill needs iters >= 1 and lr > 0");
    c.distill = dc;
  }
  return c;
}

ExperimentConfig load_experiment(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_from_json(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Commands

int cmd_gen_data(const ExperimentConfig& c, std::ostream& out) {
  const auto dir = c.data_dir();
  const int n = c.dataset.size;
  Json manifest{{"task", to_string(c.task)},
                {"size", n},
                {"seed", c.seed},
                {"counts", {{"train", c.dataset.train}, {"val", c.dataset.val}, {"test", c.dataset.test}}}};
  std::optional<MaskSpec> mask;
  if (c.task == TaskKind::Reconstruction) {
    mask = make_vd_mask(n, n, c.dataset.acceleration, mask_seed_of(c));
    manifest["mask"] = {{"acceleration", c.dataset.acceleration},
                        {"seed", mask->seed},
                        {"kept_fraction", round6(mask->kept_fraction())}};
  }
  // Splits draw consecutive sample indices from one stream, so they never overlap.
  const std::pair<const char*, std::int64_t> splits[] = {{"train", c.dataset.train}, {"val", c.dataset.val}, {"test", c.dataset.test}};
  std::int64_t first = 0;
  for (const auto& [name, count] : splits) {
    const Dataset d = c.task == TaskKind::Segmentation ? gen_blob_segmentation(c.seed, count, n, first)
                                                       : gen_recon_dataset(c.seed, count, n, *mask, first);
    save_dataset_split(dir, name, d);
    first += count;
    out << name << ": " << count << " samples\n";
  }
  write_json(dir / "manifest.json", manifest);
  out << "wrote " << dir.string() << "\n";
  return kOk;
}

int cmd_train(const ExperimentConfig& c, std::ostream& out) {
  const auto train_set = load_split(c, "train");
  const auto val_set = load_split(c, "val");
  const auto test_set = load_split(c, "test");
  const ArchitectureSpec spec = c.architecture ? *c.architecture : build_architecture(ArchitectureConfig{});
  Model<float> model(spec, c.seed);
  RunConfig rc = c.run;
  rc.seed = c.seed;

  const std::string metric = to_string(rc.metric);
  auto report = train(model, train_set, val_set, rc, &test_set, [&](const EpochRecord& e) {
    out << "epoch " << e.epoch << " train_loss " << g6(e.train_loss) << " val_loss " << g6(e.val_loss) << " val_" << metric << " "
        << g6(e.val_metric) << "\n"
        << std::flush;
  });

  Json rj = report_json(report);
  rj["architecture"] = spec.name;
  rj["params"] = model.summary().total;
  rj["seed"] = c.seed;
  rj["metric"] = metric;
  write_json(c.output_dir / "report.json", rj);
  if (report.aborted) {
    Json diag{{"error", report.diagnostic}, {"epochs_completed", static_cast<int>(report.history.size())}};
    write_json(c.output_dir / "diagnostic.json", diag);
    out << "aborted: " << report.diagnostic << "\n";
    return kNumericalError;
  }
  Json meta{{"best_epoch", report.best_epoch}, {"seed", c.seed}, {"task", to_string(c.task)}};
  save_snapshot(c.snapshot_path(), snapshot_of(model, meta.dump()));
  out << "best epoch " << report.best_epoch << " val_loss " << g6(report.best_val_loss) << " test_" << metric << " "
      << g6(*report.test_metric) << "\n";
  return kOk;
}

int cmd_eval(const ExperimentConfig& c, const fs::path& snapshot, std::ostream& out) {
  auto model = load_model(snapshot);
  const auto data = load_split(c, c.sweep.split);
  const auto r = evaluate(model, data, c.run.metric);
  Json per = Json::array();
  for (double v : r.per_sample) per.push_back(round6(v));
  Json j{{"snapshot", snapshot.filename().string()},
         {"split", c.sweep.split},
         {"metric", to_string(c.run.metric)},
         {"mean", round6(r.mean)},
         {"per_sample", per}};
  write_json(c.output_dir / "eval.json", j);
  out << to_string(c.run.metric) << " " << g6(r.mean) << " over " << r.per_sample.size() << " samples\n";
  return kOk;
}

std::string format_summary(const ModelSummary& s) {
  std::ostringstream os;
  os << "architecture     " << s.name << "\n"
     << "parameters       " << s.total << " (" << g6(static_cast<double>(s.total) / 1e6) << " M)\n"
     << "receptive field  " << s.receptive_field.str() << "\n\n";
  std::size_t w = 5;
  for (const auto& l : s.layers) w = std::max(w, l.name.size());
  os << std::left << std::setw(static_cast<int>(w) + 2) << "layer" << std::setw(12) << "kind" << "params\n";
  for (const auto& l : s.layers) {
    os << std::left << std::setw(static_cast<int>(w) + 2) << l.name << std::setw(12) << to_string(l.kind) << l.params << "\n";
  }
  return os.str();
}

int cmd_report(const ArchitectureSpec& spec, const fs::path& out_dir, std::ostream& out) {
  const auto s = closed_form_summary(spec);
  write_json(out_dir / "summary.json", summary_json(s));
  out << format_summary(s);
  return kOk;
}

int cmd_sweep(const ExperimentConfig& c, std::ostream& out) {
  if (c.sweep.models.empty()) throw ConfigError("sweep.models is empty");
  std::vector<Model<float>> models;
  models.reserve(c.sweep.models.size());
  for (const auto& m : c.sweep.models) models.push_back(load_model(m.snapshot));
  std::vector<NamedModel> named;
  for (std::size_t i = 0; i < models.size(); ++i) named.push_back({c.sweep.models[i].name, &models[i]});
  const auto data = load_split(c, c.sweep.split);
  const auto t = robustness_sweep(named, data, c.run.metric, c.sweep.grid, c.sweep.noise_seed);
  write_file(c.output_dir / "sweep.csv", t.csv());
  write_file(c.output_dir / "sweep.json", t.json());
  out << t.csv();
  return kOk;
}

int cmd_analyze_kernels(const fs::path& snapshot, const fs::path& out_dir, std::ostream& out, std::ostream& warn) {
  auto model = load_model(snapshot);
  const auto kernels = model.materialize_all();
  const auto r = smoothness_of(kernels);
  for (const auto& k : kernels) save_tensor(out_dir / "kernels" / (k.layer + ".hct"), k.kernel);
  for (const auto& s : r.skipped) warn << "warning: skipping " << s << " (kernel smaller than 3x3)\n";

  std::ostringstream csv;
  csv << "layer,kernel,laplacian\n";
  Json layers = Json::array();
  for (const auto& l : r.layers) {
    csv << l.layer << ',' << l.kernel << ',' << g6(l.laplacian) << '\n';
    layers.push_back({{"layer", l.layer}, {"kernel", l.kernel}, {"laplacian", round6(l.laplacian)}});
  }
  double mean = 0.0;
  for (const auto& l : r.layers) mean += l.laplacian;
  if (!r.layers.empty()) mean /= static_cast<double>(r.layers.size());
  write_file(out_dir / "smoothness.csv", csv.str());
  write_json(out_dir / "smoothness.json", {{"layers", layers}, {"skipped", r.skipped}, {"mean_laplacian", round6(mean)}});
  out << csv.str();
  return kOk;
}

int cmd_distill(const ExperimentConfig& c, std::ostream& out) {
  if (!c.distill) throw ConfigError("config has no distill section");
  const auto& d = *c.distill;
  if (!fs::exists(d.target)) throw ConfigError("missing target kernel " + d.target.string());
  auto any = load_any_tensor(d.target);
  Tensor<double> target = std::holds_alternative<Tensor<double>>(any) ? std::get<Tensor<double>>(any)
                                                                        : std::get<Tensor<float>>(any).cast<double>();
  if (target.rank() == 2) target = target.reshaped(Shape{1, 1, target.dim(0), target.dim(1)});
  if (target.rank() != 4) throw ConfigError("target kernel must be [k,k] or [O,I,k,k]");

  auto r = recapitulate_kernel(target, d.hyper, d.iters, d.lr, c.seed);
  const auto dir = c.output_dir / "distill";
  save_tensor(dir / "kernel.hct", r.layer.kernel().value());
  const auto names = r.layer.parameter_names();
  const auto params = r.layer.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) save_tensor(dir / "theta" / (names[i] + ".hct"), params[i].value());

  double mu = 0.0, var = 0.0;
  for (std::int64_t i = 0; i < target.size(); ++i) mu += target[i];
  mu /= static_cast<double>(target.size());
  for (std::int64_t i = 0; i < target.size(); ++i) var += (target[i] - mu) * (target[i] - mu);
  var /= static_cast<double>(target.size());
  Json j{{"final_l2", round6(r.final_l2)},
         {"target_variance", round6(var)},
         {"best_iter", r.best_iter},
         {"iters", d.iters},
         {"diverged", r.diverged},
         {"hyper", d.hyper}};
  write_json(dir / "distill.json", j);
  out << "final_l2 " << g6(r.final_l2) << " (target variance " << g6(var) << ")\n";
  return r.diverged ? kNumericalError : kOk;
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"gen-data", "train", "eval", "report", "sweep", "analyze-kernels", "distill"};
  return names;
}

int run_command(const std::string& command, const CliOptions& opts, std::ostream& out, std::ostream& err) {
  try {
    if (opts.threads < 0) throw ConfigError("--threads must be >= 1");
    if (opts.threads > 0) set_num_threads(opts.threads);

    // `report` and `analyze-kernels` can run from a snapshot alone.
    const bool needs_config = !((command == "report" || command == "analyze-kernels") && opts.snapshot && opts.config.empty());
    ExperimentConfig c;
    if (needs_config) {
      if (opts.config.empty()) throw ConfigError("--config is required for " + command);
      c = load_experiment(opts.config);
    }
    if (opts.seed) c.seed = *opts.seed;
    if (opts.out) c.output_dir = *opts.out;
    const fs::path snapshot = opts.snapshot ? *opts.snapshot : c.snapshot_path();

    if (command == "gen-data") return cmd_gen_data(c, out);
    if (command == "train") return cmd_train(c, out);
    if (command == "eval") return cmd_eval(c, snapshot, out);
    if (command == "report") {
      if (opts.snapshot) return cmd_report(load_snapshot(snapshot).spec, c.output_dir, out);
      if (!c.architecture) throw ConfigError("report needs an architecture in the config or --snapshot");
      return cmd_report(*c.architecture, c.output_dir, out);
    }
    if (command == "sweep") return cmd_sweep(c, out);
    if (command == "analyze-kernels") return cmd_analyze_kernels(snapshot, c.output_dir, out, err);
    if (command == "distill") return cmd_distill(c, out);
    throw ConfigError("unknown command '" + command + "'");
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumericalError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  }
}

}  // namespace hconv
