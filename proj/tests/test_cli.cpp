#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "hyperconv/cli.hpp"
#include "hyperconv/io.hpp"

using namespace hconv;
namespace fs = std::filesystem;

namespace {

struct Workdir {
  fs::path root;
  explicit Workdir(const std::string& name) : root(fs::temp_directory_path() / ("hconv_cli_" + name)) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workdir() { fs::remove_all(root); }

  fs::path config(const Json& j, const std::string& file = "config.json") const {
    write_file(root / file, j.dump(2));
    return root / file;
  }
};

struct Result {
  int code;
  std::string out, err;
};

Result run(const std::string& cmd, const fs::path& config, std::optional<fs::path> snapshot = {}) {
  CliOptions o;
  o.config = config;
  o.snapshot = std::move(snapshot);
  std::ostringstream out, err;
  const int code = run_command(cmd, o, out, err);
  return {code, out.str(), err.str()};
}

Json tiny_seg() {
  return Json::parse(R"({
    "task": "segmentation", "seed": 5, "output_dir": "out",
    "dataset": {"size": 32, "splits": {"train": 8, "val": 4, "test": 4}},
    "architecture": {"family": "unet", "init_channels": 4, "kernel_size": 3},
    "run": {"lr": 3e-3, "epochs": 2, "batch_size": 4},
    "sweep": {"models": [{"name": "a", "snapshot": "out/model.hcts"}, {"name": "b", "snapshot": "out/model.hcts"}],
              "grid": [{"kind": "gaussian", "levels": [0, 0.05, 0.1, 0.15]},
                       {"kind": "salt_pepper", "levels": [0, 0.01, 0.02, 0.03]},
                       {"kind": "speckle", "levels": [0, 0.1, 0.2, 0.3]}]}
  })");
}

}  // namespace

TEST_CASE("gen-data is deterministic and respects split sizes") {
  Workdir w("gen");
  auto cfg = w.config(tiny_seg());
  REQUIRE(run("gen-data", cfg).code == 0);
  const auto data = w.root / "out" / "data";
  const auto first = read_file(data / "train_images.hct");
  const auto manifest = Json::parse(read_file(data / "manifest.json"));
  CHECK(manifest["counts"]["train"] == 8);
  CHECK(manifest["counts"]["test"] == 4);
  CHECK(load_dataset_split(data, "val").count() == 4);
  REQUIRE(run("gen-data", cfg).code == 0);
  CHECK(read_file(data / "train_images.hct") == first);

  // The --seed flag overrides the config.
  CliOptions o;
  o.config = cfg;
  o.seed = 6;
  std::ostringstream sink;
  REQUIRE(run_command("gen-data", o, sink, sink) == 0);
  CHECK(read_file(data / "train_images.hct") != first);
}

TEST_CASE("train, eval, sweep and analyze reproduce byte-identical outputs") {
  Workdir w("train");
  auto cfg = w.config(tiny_seg());
  REQUIRE(run("gen-data", cfg).code == 0);
  auto r = run("train", cfg);
  REQUIRE(r.code == 0);
  const auto out = w.root / "out";
  const auto report = read_file(out / "report.json");
  const auto snap = read_file(out / "model.hcts");
  CHECK(Json::parse(report)["best_epoch"].get<int>() >= 1);

  REQUIRE(run("eval", cfg).code == 0);
  REQUIRE(run("sweep", cfg).code == 0);
  REQUIRE(run("analyze-kernels", cfg).code == 0);
  const auto eval = read_file(out / "eval.json");
  const auto sweep = read_file(out / "sweep.json");
  const auto smooth = read_file(out / "smoothness.csv");

  // Two models, three kinds, four levels.
  CHECK(Json::parse(sweep)["rows"].size() == 24);
  // A zero level is the clean evaluation.
  CHECK(Json::parse(sweep)["rows"][0]["mean"] == Json::parse(eval)["mean"]);

  REQUIRE(run("train", cfg).code == 0);
  REQUIRE(run("eval", cfg).code == 0);
  REQUIRE(run("sweep", cfg).code == 0);
  REQUIRE(run("analyze-kernels", cfg).code == 0);
  CHECK(read_file(out / "report.json") == report);
  CHECK(read_file(out / "model.hcts") == snap);
  CHECK(read_file(out / "eval.json") == eval);
  CHECK(read_file(out / "sweep.json") == sweep);
  CHECK(read_file(out / "smoothness.csv") == smooth);
}

TEST_CASE("tiny overfit run through the CLI") {
  Workdir w("overfit");
  auto j = tiny_seg();
  j["dataset"]["splits"] = {{"train", 8}, {"val", 2}, {"test", 2}};
  j["run"] = {{"lr", 3e-3}, {"epochs", 200}, {"batch_size", 4}};
  auto cfg = w.config(j);
  REQUIRE(run("gen-data", cfg).code == 0);
  REQUIRE(run("train", cfg).code == 0);
  const auto rep = Json::parse(read_file(w.root / "out" / "report.json"));
  CHECK(rep["history"].back()["train_loss"].get<double>() < 0.1);
}

TEST_CASE("numerical blow-up exits with code 2 and a diagnostic") {
  Workdir w("nan");
  auto j = tiny_seg();
  j["run"] = {{"lr", 1e30}, {"epochs", 3}, {"batch_size", 4}};
  auto cfg = w.config(j);
  REQUIRE(run("gen-data", cfg).code == 0);
  auto r = run("train", cfg);
  CHECK(r.code == 2);
  CHECK(fs::exists(w.root / "out" / "diagnostic.json"));
  CHECK_FALSE(fs::exists(w.root / "out" / "model.hcts"));
}

TEST_CASE("report prints counts and receptive fields") {
  Workdir w("report");
  auto r = run("report", w.config({{"architecture", {{"family", "unet"}, {"kernel_size", 3}}}}));
  REQUIRE(r.code == 0);
  CHECK(r.out.find("receptive field  68\n") != std::string::npos);
  CHECK(r.out.find("2143329") != std::string::npos);

  r = run("report", w.config({{"architecture", {{"family", "unet"}, {"kernel_size", 5}, {"conv_mode", "hyper"}, {"hyper", {{"n_last", 4}}}}}}));
  REQUIRE(r.code == 0);
  const auto s = Json::parse(read_file(w.root / "out" / "summary.json"));
  CHECK(s["total_params_millions"].get<double>() == doctest::Approx(1.2).epsilon(0.05));

  r = run("report", w.config({{"architecture", {{"family", "flat_dilated_cnn"}}}}));
  CHECK(r.out.find("receptive field  89\n") != std::string::npos);

  CHECK(run("report", w.config({{"architecture", {{"family", "unet"}, {"kernel_size", 4}}}})).code == 1);
  CHECK(run("report", w.config(Json::object())).code == 1);
}

TEST_CASE("sweep failures are config errors") {
  Workdir w("sweepfail");
  auto j = tiny_seg();
  auto cfg = w.config(j);
  REQUIRE(run("gen-data", cfg).code == 0);
  auto r = run("sweep", cfg);
  CHECK(r.code == 1);
  CHECK(r.err.find("missing snapshot") != std::string::npos);

  REQUIRE(run("train", cfg).code == 0);
  j["sweep"]["grid"] = Json::array({{{"kind", "gaussian"}, {"levels", Json::array()}}});
  CHECK(run("sweep", w.config(j)).code == 1);
  j["sweep"]["grid"] = Json::array();
  CHECK(run("sweep", w.config(j)).code == 1);
}

TEST_CASE("reconstruction sweep adds reference rows") {
  Workdir w("recon");
  auto j = tiny_seg();
  j["task"] = "reconstruction";
  j["architecture"]["output"] = "identity";
  j["sweep"]["grid"] = Json::array({{{"kind", "kspace_gaussian"}, {"levels", {0, 0.05}}}});
  auto cfg = w.config(j);
  REQUIRE(run("gen-data", cfg).code == 0);
  REQUIRE(run("train", cfg).code == 0);
  REQUIRE(run("sweep", cfg).code == 0);
  const auto rows = Json::parse(read_file(w.root / "out" / "sweep.json"))["rows"];
  REQUIRE(rows.size() == 6);
  CHECK(rows[0]["model"] == "zero_filled");
  CHECK(rows[0]["reference"] == true);
  CHECK(rows[1]["useful"].is_boolean());
  // A segmentation dataset cannot feed a reconstruction run.
  j["task"] = "segmentation";
  j["dataset"]["dir"] = (w.root / "out" / "data").string();
  CHECK(run("train", w.config(j, "seg.json")).code == 1);
}

TEST_CASE("analyze-kernels on constant kernels reports zero") {
  Workdir w("analyze");
  ArchitectureConfig a;
  a.init_channels = 2;
  a.kernel_size = 5;
  a.conv_mode = ConvMode::Hyper;
  Model<float> m(build_architecture(a), 1);
  for (auto& p : m.parameters())
    if (p.name.find("theta0.weight") != std::string::npos) p.var.value_mut().fill(0.0f);
  save_snapshot(w.root / "m.hcts", snapshot_of(m));
  auto r = run("analyze-kernels", w.config({{"output_dir", "res"}}), w.root / "m.hcts");
  REQUIRE(r.code == 0);
  CHECK(r.err.find("skipping head") != std::string::npos);
  const auto s = Json::parse(read_file(w.root / "res" / "smoothness.json"));
  CHECK(s["layers"].size() == 17);
  for (const auto& l : s["layers"]) CHECK(l["laplacian"].get<double>() == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(fs::exists(w.root / "res" / "kernels" / "enc1.1.conv.hct"));
}

TEST_CASE("distill fits a constant kernel and exports it") {
  Workdir w("distill");
  save_tensor(w.root / "target.hct", Tensor<double>(Shape{5, 5}, -0.4));
  auto cfg = w.config({{"distill", {{"target", "target.hct"}, {"iters", 5000}, {"lr", 1e-2}}}});
  auto r = run("distill", cfg);
  REQUIRE(r.code == 0);
  const auto dir = w.root / "out" / "distill";
  const auto j = Json::parse(read_file(dir / "distill.json"));
  CHECK(j["final_l2"].get<double>() < 1e-8);
  const auto k = load_tensor<double>(dir / "kernel.hct");
  CHECK(k.shape() == Shape{1, 1, 5, 5});
  save_tensor(w.root / "again.hct", k);
  CHECK(read_file(w.root / "again.hct") == read_file(dir / "kernel.hct"));
  CHECK(fs::exists(dir / "theta"));

  CHECK(run("distill", w.config({{"distill", {{"target", "nothere.hct"}}}})).code == 1);
  CHECK(run("distill", w.config(Json::object())).code == 1);
}

TEST_CASE("experiment config round-trips and rejects unknown keys") {
  auto c = experiment_from_json(tiny_seg());
  Json once = c;
  Json twice = experiment_from_json(once);
  CHECK(once == twice);

  Workdir w("config");
  auto j = tiny_seg();
  j["dataset"]["sise"] = 32;
  auto r = run("gen-data", w.config(j));
  CHECK(r.code == 1);
  CHECK(r.err.find("sise") != std::string::npos);
  write_file(w.root / "broken.json", "{\"task\": ");
  CHECK(run("gen-data", w.root / "broken.json").code == 1);
  CHECK(run("frobnicate", w.config(tiny_seg())).code == 1);
  auto bad = tiny_seg();
  bad["task"] = "classification";
  CHECK(run("gen-data", w.config(bad)).code == 1);
}
