#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hts/data.hpp"
#include "hts/evaluation.hpp"
#include "hts/model.hpp"
#include "hts/training.hpp"

namespace hts::cli {

enum class DType { f32, f64 };

/// Every knob of every subcommand. Keys are "section.name" and are shared by
/// the config file and the command-line flags.
struct RunConfig {
  // run
  model::Task task = model::Task::age8;
  std::string preset = "toy";
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";
  DType dtype = DType::f32;

  // data
  std::filesystem::path manifest;
  /// Image directory; the manifest's directory when empty.
  std::filesystem::path images;
  /// Working resolution; the preset's image size when unset.
  std::optional<std::size_t> size;
  std::string detector = "manifest";
  double threshold = 0.9;
  std::size_t synth_n = 64;
  /// Task class count (8 or 2) when unset.
  std::optional<std::size_t> synth_classes;
  double synth_noise = 24.0;
  std::size_t histogram_bins = 16;

  // train
  double lr = 1e-4;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 100;
  /// Task default (0.2 for age8, 0 for gender2) when unset.
  std::optional<double> smoothing;
  std::size_t patience = 5;
  double min_delta = 1e-4;
  double plateau_factor = 0.2;
  double plateau_floor = 1e-6;
  std::size_t plateau_patience = 2;
  double val_fraction = 0.2;
  bool shuffle = true;

  // augment
  bool augment = false;
  data::AugmentConfig augment_cfg;

  // crossval
  std::size_t k = 5;
  bool compare_augment = false;

  // evaluate
  std::filesystem::path checkpoint;
  std::string split = "all";

  // gradcheck
  std::size_t gradcheck_coordinates = 64;
  double gradcheck_tolerance = 1e-4;

  model::ModelSpec spec() const;
  std::size_t working_size() const;
  std::filesystem::path image_root() const;
  train::LossConfig loss() const;
  train::RAdamOptions optimizer() const;
  train::PlateauOptions plateau() const;
  train::EarlyStopOptions early_stop() const;
  /// Augmentation with its seed derived from `seed`; empty when disabled.
  std::optional<data::AugmentConfig> augmentation() const;
  eval::CrossValConfig crossval_config() const;
  /// ConfigError on any out-of-range value.
  void validate() const;
};

struct Setting {
  std::string key;   // "section.name"
  std::string flag;  // "--name"
  std::string help;
};

/// Sets one key from its text form. ConfigError for an unknown key or a bad value.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

/// Every known key with its current value, sorted by key.
std::map<std::string, std::string> describe(const RunConfig& cfg);

/// Every known setting in declaration order.
const std::vector<Setting>& settings();

/// Reads "key = value" lines under "[section]" headers and applies them.
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

}  // namespace hts::cli
