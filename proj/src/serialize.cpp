#include "hyperconv/serialize.hpp"

#include <cstdio>
#include <cstdlib>
#include <stdexcept>

namespace hconv {

double round6(double v) {
  if (!std::isfinite(v)) return v;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return std::strtod(buf, nullptr);
}

void reject_unknown_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || item.key() == a;
    if (!ok) throw std::invalid_argument(where + ": unknown key '" + item.key() + "'");
  }
}

void to_json(Json& j, const HyperNetConfig& c) { j = Json{{"hidden_widths", c.hidden_widths}}; }

void from_json(const Json& j, HyperNetConfig& c) {
  reject_unknown_keys(j, {"hidden_widths", "n_last"}, "hyper");
  c = HyperNetConfig{};
  if (j.contains("hidden_widths")) c.hidden_widths = j.at("hidden_widths").get<std::array<int, 4>>();
  if (j.contains("n_last")) c.hidden_widths[3] = j.at("n_last").get<int>();
  c.validate();
}

void to_json(Json& j, const LayerSpec& l) {
  j = Json{{"name", l.name},          {"kind", to_string(l.kind)},         {"inputs", l.inputs},
           {"kernel", l.kernel},      {"dilation", l.dilation},            {"stride", l.stride},
           {"in", l.in_channels},     {"out", l.out_channels},             {"activation", to_string(l.activation)},
           {"slope", l.slope},        {"dropout", l.dropout_p}};
  if (l.hyper) j["hyper"] = *l.hyper;
}

void from_json(const Json& j, LayerSpec& l) {
  reject_unknown_keys(j, {"name", "kind", "inputs", "kernel", "dilation", "stride", "in", "out", "activation", "slope", "dropout", "hyper"},
                      "layer");
  l = LayerSpec{};
  l.name = j.value("name", std::string());
  l.kind = parse_layer_kind(j.at("kind").get<std::string>());
  l.inputs = j.at("inputs").get<std::vector<int>>();
  l.kernel = j.value("kernel", 1);
  l.dilation = j.value("dilation", 1);
  l.stride = j.value("stride", 1);
  l.in_channels = j.value("in", 0);
  l.out_channels = j.value("out", 0);
  l.activation = parse_activation(j.value("activation", std::string("relu")));
  l.slope = j.value("slope", 0.0);
  l.dropout_p = j.value("dropout", 0.0);
  if (j.contains("hyper")) l.hyper = j.at("hyper").get<HyperNetConfig>();
}

void to_json(Json& j, const ArchitectureConfig& c) {
  j = Json{{"family", c.family},           {"in_channels", c.in_channels},    {"out_channels", c.out_channels},
           {"init_channels", c.init_channels}, {"kernel_size", c.kernel_size}, {"dilation", c.dilation},
           {"conv_mode", to_string(c.conv_mode)}, {"hyper", c.hyper},           {"nonlocal", c.nonlocal},
           {"output", to_string(c.output)}};
}

void from_json(const Json& j, ArchitectureConfig& c) {
  reject_unknown_keys(j, {"family", "in_channels", "out_channels", "init_channels", "kernel_size", "dilation", "conv_mode", "hyper",
                          "nonlocal", "output"},
                      "architecture");
  c = ArchitectureConfig{};
  c.family = j.value("family", c.family);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.out_channels = j.value("out_channels", c.out_channels);
  c.init_channels = j.value("init_channels", c.init_channels);
  c.kernel_size = j.value("kernel_size", c.kernel_size);
  c.dilation = j.value("dilation", c.dilation);
  c.conv_mode = parse_conv_mode(j.value("conv_mode", std::string("standard")));
  if (j.contains("hyper")) c.hyper = j.at("hyper").get<HyperNetConfig>();
  c.nonlocal = j.value("nonlocal", false);
  c.output = parse_activation(j.value("output", std::string("sigmoid")));
}

void to_json(Json& j, const ArchitectureSpec& s) { j = Json{{"name", s.name}, {"recipe", s.recipe}, {"layers", s.layers}}; }

void from_json(const Json& j, ArchitectureSpec& s) {
  if (!j.contains("layers")) {
    s = build_architecture(j.get<ArchitectureConfig>());
    return;
  }
  reject_unknown_keys(j, {"name", "recipe", "layers"}, "architecture spec");
  s = ArchitectureSpec{};
  s.name = j.value("name", std::string("custom"));
  if (j.contains("recipe")) s.recipe = j.at("recipe").get<ArchitectureConfig>();
  s.layers = j.at("layers").get<std::vector<LayerSpec>>();
  s.validate();
}

void to_json(Json& j, const RunConfig& c) {
  j = Json{{"lr", c.lr},           {"batch_size", c.batch_size},   {"epochs", c.epochs},          {"augment", c.augment},
           {"seed", c.seed},       {"loss", to_string(c.loss)},    {"metric", to_string(c.metric)}};
}

void from_json(const Json& j, RunConfig& c) {
  reject_unknown_keys(j, {"lr", "batch_size", "epochs", "augment", "seed", "loss", "metric"}, "run");
  c = RunConfig{};
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.augment = j.value("augment", c.augment);
  c.seed = j.value("seed", c.seed);
  c.loss = parse_loss(j.value("loss", to_string(c.loss)));
  c.metric = parse_metric(j.value("metric", to_string(c.metric)));
  c.validate();
}

void to_json(Json& j, const NoiseSpec& n) { j = Json{{"kind", to_string(n.kind)}, {"level", round6(n.level)}, {"seed", n.seed}}; }

Json summary_json(const ModelSummary& s) {
  Json layers = Json::array();
  for (const auto& l : s.layers) layers.push_back({{"name", l.name}, {"kind", to_string(l.kind)}, {"params", l.params}});
  Json rf = s.receptive_field.all ? Json("ALL") : Json(s.receptive_field.pixels);
  return Json{{"name", s.name},
              {"total_params", s.total},
              {"total_params_millions", round6(static_cast<double>(s.total) / 1e6)},
              {"receptive_field", rf},
              {"layers", layers}};
}

Json report_json(const RunReport& r) {
  Json hist = Json::array();
  for (const auto& e : r.history) {
    hist.push_back({{"epoch", e.epoch},
                    {"train_loss", round6(e.train_loss)},
                    {"val_loss", round6(e.val_loss)},
                    {"val_metric", round6(e.val_metric)}});
  }
  Json j{{"history", hist}, {"best_epoch", r.best_epoch}, {"best_val_loss", round6(r.best_val_loss)}, {"aborted", r.aborted}};
  j["test_metric"] = r.test_metric ? Json(round6(*r.test_metric)) : Json(nullptr);
  if (r.aborted) j["diagnostic"] = r.diagnostic;
  return j;
}

}  // namespace hconv
