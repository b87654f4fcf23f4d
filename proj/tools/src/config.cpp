#include "config.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>

#include "hts/error.hpp"
#include "hts/rng.hpp"

namespace hts::cli {

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError(key + ": '" + value + "' is not " + expected);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty()) bad_value(key, v, "a non-negative integer");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty() || !std::isfinite(out))
    bad_value(key, v, "a finite number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
  if (v == "off" || v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "on or off");
}

std::string fmt(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string fmt(bool v) { return v ? "on" : "off"; }

struct Entry {
  Setting setting;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename F>
Entry size_entry(std::string key, std::string flag, std::string help, F member) {
  return {{key, std::move(flag), std::move(help)},
          [key, member](RunConfig& c, const std::string& v) { c.*member = parse_size(key, v); },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

template <typename F>
Entry double_entry(std::string key, std::string flag, std::string help, F member) {
  return {{key, std::move(flag), std::move(help)},
          [key, member](RunConfig& c, const std::string& v) { c.*member = parse_double(key, v); },
          [member](const RunConfig& c) { return fmt(c.*member); }};
}

template <typename F>
Entry bool_entry(std::string key, std::string flag, std::string help, F member) {
  return {{key, std::move(flag), std::move(help)},
          [key, member](RunConfig& c, const std::string& v) { c.*member = parse_bool(key, v); },
          [member](const RunConfig& c) { return fmt(c.*member); }};
}

template <typename F>
Entry path_entry(std::string key, std::string flag, std::string help, F member) {
  return {{key, std::move(flag), std::move(help)},
          [member](RunConfig& c, const std::string& v) { c.*member = v; },
          [member](const RunConfig& c) { return (c.*member).string(); }};
}

template <typename F>
Entry augment_entry(std::string key, std::string flag, std::string help, F member) {
  return {{key, std::move(flag), std::move(help)},
          [key, member](RunConfig& c, const std::string& v) { c.augment_cfg.*member = parse_double(key, v); },
          [member](const RunConfig& c) { return fmt(c.augment_cfg.*member); }};
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    t.push_back({{"run.task", "--task", "age8 or gender2"},
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.task = model::parse_task(v);
                   } catch (const Error&) {
                     bad_value("run.task", v, "age8 or gender2");
                   }
                 },
                 [](const RunConfig& c) { return std::string(model::task_name(c.task)); }});
    t.push_back({{"run.preset", "--preset", "toy or vitb32"},
                 [](RunConfig& c, const std::string& v) {
                   if (v != "toy" && v != "vitb32") bad_value("run.preset", v, "toy or vitb32");
                   c.preset = v;
                 },
                 [](const RunConfig& c) { return c.preset; }});
    t.push_back({{"run.seed", "--seed", "master seed"},
                 [](RunConfig& c, const std::string& v) { c.seed = parse_u64("run.seed", v); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    t.push_back(path_entry("run.out", "--out", "output directory", &RunConfig::out));
    t.push_back({{"run.dtype", "--dtype", "f32 or f64"},
                 [](RunConfig& c, const std::string& v) {
                   if (v == "f32") c.dtype = DType::f32;
                   else if (v == "f64") c.dtype = DType::f64;
                   else bad_value("run.dtype", v, "f32 or f64");
                 },
                 [](const RunConfig& c) { return std::string(c.dtype == DType::f32 ? "f32" : "f64"); }});

    t.push_back(path_entry("data.manifest", "--manifest", "manifest CSV", &RunConfig::manifest));
    t.push_back(path_entry("data.images", "--images", "image directory (default: next to the manifest)",
                           &RunConfig::images));
    t.push_back({{"data.size", "--size", "working image size (default: preset input size)"},
                 [](RunConfig& c, const std::string& v) {
                   if (v.empty() || v == "auto") c.size.reset();
                   else c.size = parse_size("data.size", v);
                 },
                 [](const RunConfig& c) { return c.size ? std::to_string(*c.size) : std::string("auto"); }});
    t.push_back({{"data.detector", "--detector", "manifest or whole"},
                 [](RunConfig& c, const std::string& v) {
                   if (v != "manifest" && v != "whole") bad_value("data.detector", v, "manifest or whole");
                   c.detector = v;
                 },
                 [](const RunConfig& c) { return c.detector; }});
    t.push_back(double_entry("data.threshold", "--threshold", "minimum detection confidence", &RunConfig::threshold));
    t.push_back(size_entry("data.n", "--n", "synthetic sample count", &RunConfig::synth_n));
    t.push_back({{"data.classes", "--classes", "synthetic class count (default: per task)"},
                 [](RunConfig& c, const std::string& v) {
                   if (v.empty() || v == "auto") c.synth_classes.reset();
                   else c.synth_classes = parse_size("data.classes", v);
                 },
                 [](const RunConfig& c) {
                   return c.synth_classes ? std::to_string(*c.synth_classes) : std::string("auto");
                 }});
    t.push_back(double_entry("data.noise", "--noise", "synthetic pixel noise", &RunConfig::synth_noise));
    t.push_back(size_entry("data.bins", "--bins", "histogram bins", &RunConfig::histogram_bins));

    t.push_back(double_entry("train.lr", "--lr", "initial learning rate", &RunConfig::lr));
    t.push_back(size_entry("train.batch_size", "--batch-size", "batch size", &RunConfig::batch_size));
    t.push_back(size_entry("train.max_epochs", "--max-epochs", "epoch limit", &RunConfig::max_epochs));
    t.push_back({{"train.smoothing", "--smoothing", "label smoothing (default: per task)"},
                 [](RunConfig& c, const std::string& v) {
                   if (v.empty() || v == "auto") c.smoothing.reset();
                   else c.smoothing = parse_double("train.smoothing", v);
                 },
                 [](const RunConfig& c) { return c.smoothing ? fmt(*c.smoothing) : std::string("auto"); }});
    t.push_back(size_entry("train.patience", "--patience", "early stopping patience", &RunConfig::patience));
    t.push_back(double_entry("train.min_delta", "--min-delta", "minimum improvement", &RunConfig::min_delta));
    t.push_back(double_entry("train.plateau_factor", "--plateau-factor", "learning rate reduction factor",
                             &RunConfig::plateau_factor));
    t.push_back(double_entry("train.plateau_floor", "--plateau-floor", "learning rate floor",
                             &RunConfig::plateau_floor));
    t.push_back(size_entry("train.plateau_patience", "--plateau-patience", "epochs before a reduction",
                           &RunConfig::plateau_patience));
    t.push_back(double_entry("train.val_fraction", "--val-fraction", "validation share of the training pool",
                             &RunConfig::val_fraction));
    t.push_back(bool_entry("train.shuffle", "--shuffle", "reshuffle batches every epoch", &RunConfig::shuffle));

    t.push_back(bool_entry("augment.enabled", "--augment", "training augmentation on/off", &RunConfig::augment));
    t.push_back(augment_entry("augment.flip", "--flip-probability", "horizontal flip probability",
                              &data::AugmentConfig::flip_probability));
    t.push_back(augment_entry("augment.transpose", "--transpose-probability", "transpose probability",
                              &data::AugmentConfig::transpose_probability));
    t.push_back(augment_entry("augment.saturation_lo", "--saturation-lo", "lowest channel scale",
                              &data::AugmentConfig::saturation_lo));
    t.push_back(augment_entry("augment.saturation_hi", "--saturation-hi", "highest channel scale",
                              &data::AugmentConfig::saturation_hi));
    t.push_back(augment_entry("augment.rotation_lo", "--rotation-lo", "lowest rotation in degrees",
                              &data::AugmentConfig::rotation_lo));
    t.push_back(augment_entry("augment.rotation_hi", "--rotation-hi", "highest rotation in degrees",
                              &data::AugmentConfig::rotation_hi));

    t.push_back(size_entry("crossval.k", "--k", "fold count", &RunConfig::k));
    t.push_back(bool_entry("crossval.compare_augment", "--compare-augment", "run without and with augmentation",
                           &RunConfig::compare_augment));

    t.push_back(path_entry("evaluate.checkpoint", "--checkpoint", "checkpoint to evaluate", &RunConfig::checkpoint));
    t.push_back({{"evaluate.split", "--split", "all, train or val"},
                 [](RunConfig& c, const std::string& v) {
                   if (v != "all" && v != "train" && v != "val") bad_value("evaluate.split", v, "all, train or val");
                   c.split = v;
                 },
                 [](const RunConfig& c) { return c.split; }});

    t.push_back(size_entry("gradcheck.coordinates", "--coordinates", "coordinates probed per tensor",
                           &RunConfig::gradcheck_coordinates));
    t.push_back(double_entry("gradcheck.tolerance", "--tolerance", "maximum relative error",
                             &RunConfig::gradcheck_tolerance));
    return t;
  }();
  return table;
}

}  // namespace

model::ModelSpec RunConfig::spec() const {
  auto s = model::ModelSpec::preset(preset, task);
  if (size && (*size != s.patch.height || *size != s.patch.width)) {
    s.patch.height = *size;
    s.patch.width = *size;
  }
  s.validate();
  return s;
}

std::size_t RunConfig::working_size() const {
  return size ? *size : model::ModelSpec::preset(preset, task).patch.height;
}

std::filesystem::path RunConfig::image_root() const {
  if (!images.empty()) return images;
  return manifest.has_parent_path() ? manifest.parent_path() : std::filesystem::path(".");
}

train::LossConfig RunConfig::loss() const {
  auto l = train::LossConfig::for_task(task);
  if (smoothing) l.smoothing = *smoothing;
  return l;
}

train::RAdamOptions RunConfig::optimizer() const {
  train::RAdamOptions o;
  o.lr = lr;
  return o;
}

train::PlateauOptions RunConfig::plateau() const {
  return {plateau_factor, plateau_floor, plateau_patience, min_delta};
}

train::EarlyStopOptions RunConfig::early_stop() const { return {patience, min_delta}; }

std::optional<data::AugmentConfig> RunConfig::augmentation() const {
  if (!augment) return std::nullopt;
  auto a = augment_cfg;
  a.seed = mix_seed(seed, 0x617567);
  return a;
}

eval::CrossValConfig RunConfig::crossval_config() const {
  eval::CrossValConfig c;
  c.k = k;
  c.val_fraction = val_fraction;
  c.seed = seed;
  c.batch_size = batch_size;
  c.max_epochs = max_epochs;
  c.loss = loss();
  c.optimizer = optimizer();
  c.plateau = plateau();
  c.early_stop = early_stop();
  c.augment = augmentation();
  return c;
}

void RunConfig::validate() const {
  if (lr < 0) throw ConfigError("train.lr must be >= 0");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (max_epochs == 0) throw ConfigError("train.max_epochs must be positive");
  if (val_fraction < 0 || val_fraction >= 1) throw ConfigError("train.val_fraction must be in [0, 1)");
  if (plateau_factor <= 0 || plateau_factor >= 1) throw ConfigError("train.plateau_factor must be in (0, 1)");
  if (plateau_floor < 0) throw ConfigError("train.plateau_floor must be >= 0");
  if (min_delta < 0) throw ConfigError("train.min_delta must be >= 0");
  if (threshold < 0 || threshold > 1) throw ConfigError("data.threshold must be in [0, 1]");
  if (synth_n == 0) throw ConfigError("data.n must be positive");
  if (synth_classes && *synth_classes == 0) throw ConfigError("data.classes must be positive");
  if (synth_noise < 0) throw ConfigError("data.noise must be >= 0");
  if (histogram_bins == 0) throw ConfigError("data.bins must be positive");
  if (k < 2) throw ConfigError("crossval.k must be at least 2");
  if (gradcheck_coordinates == 0) throw ConfigError("gradcheck.coordinates must be positive");
  if (gradcheck_tolerance <= 0) throw ConfigError("gradcheck.tolerance must be positive");
  if (size && *size == 0) throw ConfigError("data.size must be positive");
  loss().validate();
  augment_cfg.validate();
  spec();
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& e : entries()) {
    if (e.setting.key == key) {
      e.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown setting '" + key + "'");
}

std::map<std::string, std::string> describe(const RunConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& e : entries()) out[e.setting.key] = e.get(cfg);
  return out;
}

const std::vector<Setting>& settings() {
  static const std::vector<Setting> list = [] {
    std::vector<Setting> s;
    for (const auto& e : entries()) s.push_back(e.setting);
    return s;
  }();
  return list;
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(in);
  } catch (const CLI::Error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    std::string value;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) value += (i ? "," : "") + item.inputs[i];
    try {
      apply_setting(cfg, item.fullname(), value);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  }
}

}  // namespace hts::cli
