#include "commands.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <deque>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "hts/blockcheck.hpp"
#include "hts/error.hpp"
#include "hts/image.hpp"
#include "hts/rng.hpp"

#ifndef HTS_VERSION
#define HTS_VERSION "unknown"
#endif

namespace hts::cli {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f << text;
    f.flush();
    if (!f) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::vector<data::ManifestRow> labelled_rows(const RunConfig& cfg, std::ostream& out) {
  if (cfg.manifest.empty()) throw ConfigError("data.manifest (--manifest) is required");
  const auto rows = data::load_manifest(cfg.manifest);
  auto filtered = data::filter_rows(rows);
  if (filtered.rows.size() != rows.size())
    out << "skipped " << rows.size() - filtered.rows.size() << " unlabelled rows\n";
  if (filtered.rows.empty()) throw ConfigError(cfg.manifest.string() + " has no labelled rows");
  return std::move(filtered.rows);
}

data::Dataset load(const RunConfig& cfg, std::ostream& out) {
  const auto rows = labelled_rows(cfg, out);
  return data::load_dataset(rows, cfg.image_root(), cfg.task, cfg.working_size());
}

data::Detector detector_for(const RunConfig& cfg) {
  return cfg.detector == "whole" ? data::whole_image_detector() : data::manifest_box_detector();
}

/// [B x H x W x C] stack of equally sized images.
Tensor<float> stack(const std::vector<image::Image>& images) {
  Shape shape{images.size()};
  for (auto d : images.front().shape()) shape.push_back(d);
  std::vector<float> values;
  values.reserve(images.size() * images.front().size());
  for (const auto& img : images) values.insert(values.end(), img.data().begin(), img.data().end());
  return Tensor<float>(std::move(shape), std::move(values));
}

}  // namespace

Split train_val_split(std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0x73706c6974));
  rng.shuffle(std::span<std::size_t>(order));
  const auto nval = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  if (nval >= n) throw ConfigError("validation split leaves no training samples");
  Split s;
  s.validation.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(nval));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(nval), order.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

CommandResult cmd_synth(const RunConfig& cfg, std::ostream& out) {
  data::SynthOptions o;
  o.n = cfg.synth_n;
  o.classes = cfg.synth_classes ? *cfg.synth_classes : (cfg.task == model::Task::age8 ? 8 : 2);
  o.size = cfg.working_size();
  o.seed = cfg.seed;
  o.task = cfg.task;
  o.noise = cfg.synth_noise;
  const auto synth = data::synthesize_dataset(o);
  data::write_dataset(cfg.out, synth);

  CommandResult r;
  for (const auto& row : synth.rows) r.outputs.push_back(cfg.out / row.path);
  r.outputs.push_back(cfg.out / "manifest.csv");
  out << "wrote " << synth.rows.size() << " images (" << o.classes << " classes, " << o.size << "x" << o.size
      << ") and manifest.csv to " << cfg.out.string() << '\n';
  return r;
}

CommandResult cmd_preprocess(const RunConfig& cfg, std::ostream& out) {
  if (cfg.manifest.empty()) throw ConfigError("data.manifest (--manifest) is required");
  const auto rows = data::load_manifest(cfg.manifest);
  data::PreprocessOptions opts;
  opts.size = cfg.working_size();
  opts.threshold = cfg.threshold;
  const auto result = data::preprocess(rows, data::file_image_source(cfg.image_root()), detector_for(cfg), opts);

  CommandResult r;
  std::vector<data::ManifestRow> cropped;
  const double side = static_cast<double>(opts.size);
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "face_%06zu.ppm", i);
    image::save_image(cfg.out / name, result.faces[i]);
    r.outputs.push_back(cfg.out / name);
    data::ManifestRow row = result.rows[i];
    row.path = name;
    row.detection = data::Detection{0, 0, side, side, 1.0};
    cropped.push_back(std::move(row));
  }
  data::save_manifest(cfg.out / "manifest.csv", cropped);
  r.outputs.push_back(cfg.out / "manifest.csv");
  write_text(cfg.out / "filter_report.txt", result.report.to_text());
  r.outputs.push_back(cfg.out / "filter_report.txt");

  if (!result.faces.empty()) {
    const auto raw = stack(result.faces);
    const auto before = data::intensity_histogram(raw, cfg.histogram_bins, std::make_pair(0.0, 255.0));
    const auto after = data::intensity_histogram(data::normalize_batch(raw), cfg.histogram_bins);
    std::ostringstream csv;
    data::write_histogram_csv(csv, before, after);
    write_text(cfg.out / "histogram.csv", csv.str());
    r.outputs.push_back(cfg.out / "histogram.csv");
  }

  out << result.report.to_text();
  if (!result.report.missing_paths.empty())
    out << result.report.missing_paths.size() << " referenced images were missing (see filter_report.txt)\n";
  return r;
}

namespace {

template <typename T>
std::vector<train::Batch<T>> plain_batches(const data::Dataset& d, std::size_t batch_size) {
  data::BatchOptions o;
  o.batch_size = batch_size;
  return data::make_batches<T>(d, o);
}

template <typename T>
CommandResult train_typed(const RunConfig& cfg, std::ostream& out) {
  const auto spec = cfg.spec();
  const auto dataset = load(cfg, out);
  const Split split = train_val_split(dataset.size(), cfg.val_fraction, cfg.seed);
  const auto train_set = dataset.subset(split.train);
  const auto val_set = dataset.subset(split.validation);

  Rng init(mix_seed(cfg.seed, 1));
  auto params = model::init_parameters<T>(spec, init);
  const auto val_batches = plain_batches<T>(val_set, cfg.batch_size);
  const auto augment = cfg.augmentation();

  const fs::path epochs_csv = cfg.out / "epochs.csv";
  std::vector<train::EpochRecord> history;
  train::FitOptions<T> fit;
  fit.loss = cfg.loss();
  fit.optimizer = cfg.optimizer();
  fit.plateau = cfg.plateau();
  fit.early_stop = cfg.early_stop();
  fit.max_epochs = cfg.max_epochs;
  fit.seed = mix_seed(cfg.seed, 2);
  // Without validation data the training loss is the only signal that keeps improving after accuracy saturates.
  if (val_batches.empty()) fit.monitor = [](const train::EpochRecord& e) { return -e.train_loss; };
  fit.on_epoch = [&](const train::EpochRecord& e) {
    history.push_back(e);
    train::write_epoch_csv(epochs_csv, history);
    out << "epoch " << e.epoch << " train_loss=" << num(e.train_loss) << " train_acc=" << num(e.train_acc)
        << " val_loss=" << num(e.val_loss) << " val_acc=" << num(e.val_acc) << " lr=" << num(e.lr) << '\n';
  };
  const auto batches = [&](std::size_t epoch) {
    data::BatchOptions o;
    o.batch_size = cfg.batch_size;
    if (cfg.shuffle) o.shuffle_seed = mix_seed(cfg.seed, 100 + epoch);
    if (augment) {
      o.augment = *augment;
      o.augment->seed = mix_seed(augment->seed, epoch);
    }
    return data::make_batches<T>(train_set, o);
  };
  const auto result = train::fit<T>(spec, params, batches, val_batches, fit);

  train::save_checkpoint(cfg.out / "checkpoint.htsc", spec, params);
  const auto train_eval = train::evaluate(spec, params, plain_batches<T>(train_set, cfg.batch_size), fit.loss);
  std::ostringstream metrics;
  metrics << "train_samples=" << train_set.size() << "\nval_samples=" << val_set.size()
          << "\nepochs=" << result.records.size() << "\nbest_epoch=" << result.best_epoch
          << "\nstopped_early=" << (result.stopped_early ? "yes" : "no") << "\nfinal_lr=" << num(result.final_lr)
          << "\ntrain_loss=" << num(train_eval.loss) << "\ntrain_acc=" << num(train_eval.accuracy);
  if (!val_batches.empty()) {
    const auto val_eval = train::evaluate(spec, params, val_batches, fit.loss);
    metrics << "\nval_loss=" << num(val_eval.loss) << "\nval_acc=" << num(val_eval.accuracy);
  }
  metrics << '\n';
  write_text(cfg.out / "metrics.txt", metrics.str());
  out << metrics.str();
  return {kExitOk, {epochs_csv, cfg.out / "checkpoint.htsc", cfg.out / "metrics.txt"}};
}

template <typename T>
CommandResult evaluate_typed(const RunConfig& cfg, std::ostream& out) {
  if (cfg.checkpoint.empty()) throw ConfigError("evaluate.checkpoint (--checkpoint) is required");
  const auto spec = cfg.spec();
  auto ck = train::load_checkpoint<T>(cfg.checkpoint, spec);
  auto dataset = load(cfg, out);
  if (cfg.split != "all") {
    const Split split = train_val_split(dataset.size(), cfg.val_fraction, cfg.seed);
    const auto& ids = cfg.split == "train" ? split.train : split.validation;
    if (ids.empty()) throw ConfigError("the " + cfg.split + " split is empty");
    dataset = dataset.subset(ids);
  }
  const auto res = train::evaluate(spec, ck.params, plain_batches<T>(dataset, cfg.batch_size), cfg.loss());
  const auto cm = eval::confusion(res.labels, res.predictions, eval::task_classes(spec.task));

  std::ostringstream grid;
  eval::write_confusion_csv(grid, cm);
  write_text(cfg.out / "confusion.csv", grid.str());

  std::ostringstream metrics;
  metrics << "split=" << cfg.split << "\nsamples=" << cm.total() << "\nloss=" << num(res.loss)
          << "\naccuracy=" << num(eval::accuracy(cm)) << '\n';
  const auto f1 = eval::f1_scores(cm);
  for (std::size_t k = 0; k < f1.size(); ++k) metrics << "f1_" << k << '=' << num(f1[k]) << '\n';
  if (cfg.task == model::Task::age8) metrics << "adjacent_accuracy=" << num(eval::adjacent_accuracy(cm)) << '\n';
  write_text(cfg.out / "metrics.txt", metrics.str());
  out << metrics.str();
  return {kExitOk, {cfg.out / "confusion.csv", cfg.out / "metrics.txt"}};
}

template <typename T>
CommandResult crossval_typed(const RunConfig& cfg, std::ostream& out) {
  const auto spec = cfg.spec();
  const auto dataset = load(cfg, out);

  struct Variant {
    std::string name;
    std::string tag;
    bool augment;
  };
  std::vector<Variant> variants;
  if (cfg.compare_augment) {
    variants = {{"hybrid_sequencer", "plain", false}, {"hybrid_sequencer+augment", "augment", true}};
  } else {
    variants = {{cfg.augment ? "hybrid_sequencer+augment" : "hybrid_sequencer", cfg.augment ? "augment" : "plain",
                 cfg.augment}};
  }

  CommandResult r;
  std::vector<std::pair<std::string, eval::RunAggregate>> rows;
  for (const auto& v : variants) {
    RunConfig vc = cfg;
    vc.augment = v.augment;
    auto cv = vc.crossval_config();
    cv.on_epoch = [&out, &v](std::size_t fold, const train::EpochRecord& e) {
      out << v.tag << " fold " << fold << " epoch " << e.epoch << " train_acc=" << num(e.train_acc)
          << " val_acc=" << num(e.val_acc) << '\n';
    };
    const auto result = eval::crossval_run<T>(spec, dataset, cv);

    std::ostringstream folds;
    eval::write_folds_csv(folds, result.folds);
    const fs::path folds_path = cfg.out / ("folds_" + v.tag + ".csv");
    write_text(folds_path, folds.str());
    r.outputs.push_back(folds_path);

    eval::ConfusionMatrix total(eval::task_classes(spec.task));
    for (const auto& f : result.folds)
      for (std::size_t i = 0; i < total.counts.size(); ++i) total.counts[i] += f.test_confusion.counts[i];
    std::ostringstream grid;
    eval::write_confusion_csv(grid, total);
    const fs::path cm_path = cfg.out / ("confusion_" + v.tag + ".csv");
    write_text(cm_path, grid.str());
    r.outputs.push_back(cm_path);

    out << v.name << ": test_acc " << num(result.aggregate.test_acc.mean) << " (" << num(result.aggregate.test_acc.std)
        << ") over " << result.aggregate.folds << " folds\n";
    rows.emplace_back(v.name, result.aggregate);
  }
  std::ostringstream table;
  eval::write_results_csv(table, cfg.task, rows);
  write_text(cfg.out / "results.csv", table.str());
  r.outputs.push_back(cfg.out / "results.csv");
  return r;
}

}  // namespace

CommandResult cmd_train(const RunConfig& cfg, std::ostream& out) {
  return cfg.dtype == DType::f32 ? train_typed<float>(cfg, out) : train_typed<double>(cfg, out);
}

CommandResult cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
  return cfg.dtype == DType::f32 ? evaluate_typed<float>(cfg, out) : evaluate_typed<double>(cfg, out);
}

CommandResult cmd_crossval(const RunConfig& cfg, std::ostream& out) {
  return cfg.dtype == DType::f32 ? crossval_typed<float>(cfg, out) : crossval_typed<double>(cfg, out);
}

CommandResult cmd_gradcheck(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.preset != "toy") throw ConfigError("gradcheck runs on the toy preset only");
  model::BlockCheckOptions opts;
  opts.tolerance = cfg.gradcheck_tolerance;
  opts.max_coordinates = cfg.gradcheck_coordinates;
  opts.seed = mix_seed(cfg.seed, 3);
  const auto started = std::chrono::steady_clock::now();
  const auto report = model::check_blocks(cfg.spec(), opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  std::ostringstream text;
  std::vector<std::string> failing;
  for (const auto& b : report) {
    text << "block " << b.block << " max_rel_err=" << num(b.max_relative_error) << ' '
         << (b.passed ? "pass" : "FAIL") << '\n';
    for (const auto& t : b.tensors)
      text << "  " << t.name << " max_rel_err=" << num(t.max_relative_error) << " coordinates=" << t.coordinates
           << '\n';
    for (const auto& name : b.failing(opts.tolerance)) failing.push_back(b.block + "/" + name);
  }
  text << "tolerance=" << num(opts.tolerance) << " seconds=" << num(secs) << '\n';
  write_text(cfg.out / "gradcheck.txt", text.str());
  out << text.str();
  if (!failing.empty()) {
    err << "gradient check failed for:";
    for (const auto& f : failing) err << ' ' << f;
    err << '\n';
    return {kExitCheckFailed, {cfg.out / "gradcheck.txt"}};
  }
  return {kExitOk, {cfg.out / "gradcheck.txt"}};
}

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char full[48];
  std::snprintf(full, sizeof full, "%s.%03lldZ", buf, static_cast<long long>(ms));
  return full;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hybrid ViT + BiLSTM sequencer: data preparation, training and evaluation", "hts"};
  app.set_version_flag("--version", HTS_VERSION);
  app.require_subcommand(1, 1);

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth", "write a synthetic labelled image set and its manifest"},
      {"preprocess", "filter a manifest, crop faces and report the removals"},
      {"train", "train one model on a train/validation split"},
      {"crossval", "k-fold cross-validation with a results table"},
      {"evaluate", "confusion matrix, accuracy and F1 of a checkpoint"},
      {"gradcheck", "finite-difference check of every model block (toy preset)"},
  };

  std::string config_path;
  std::deque<std::string> storage;
  std::vector<std::pair<const Setting*, CLI::Option*>> flags;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "INI-style config file ([section] key = value)");
    for (const auto& s : settings()) {
      storage.emplace_back();
      flags.emplace_back(&s, sub->add_option(s.flag, storage.back(), s.help + " [" + s.key + "]"));
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  const std::string command = app.get_subcommands().front()->get_name();

  RunConfig cfg;
  nlohmann::json manifest;
  manifest["command"] = command;
  manifest["version"] = HTS_VERSION;
  manifest["start"] = utc_now();
  int status = kExitOk;
  CommandResult result;
  try {
    // An explicit --out is honoured even when the config file is rejected.
    for (const auto& [setting, opt] : flags)
      if (setting->key == "run.out" && opt->count() > 0) apply_setting(cfg, setting->key, opt->as<std::string>());
    if (!config_path.empty()) {
      apply_config_file(cfg, config_path);
      manifest["config_file"] = config_path;
    }
    for (const auto& [setting, opt] : flags)
      if (opt->count() > 0) apply_setting(cfg, setting->key, opt->as<std::string>());
    cfg.validate();
    ensure_dir(cfg.out);

    if (command == "synth") result = cmd_synth(cfg, out);
    else if (command == "preprocess") result = cmd_preprocess(cfg, out);
    else if (command == "train") result = cmd_train(cfg, out);
    else if (command == "crossval") result = cmd_crossval(cfg, out);
    else if (command == "evaluate") result = cmd_evaluate(cfg, out);
    else result = cmd_gradcheck(cfg, out, err);
    status = result.status;
  } catch (const std::exception& e) {
    err << "hts " << command << ": " << e.what() << '\n';
    manifest["error"] = e.what();
    status = kExitError;
  }

  manifest["config"] = describe(cfg);
  manifest["end"] = utc_now();
  manifest["exit_status"] = status;
  std::vector<std::string> outputs;
  for (const auto& p : result.outputs) outputs.push_back(p.filename().string());
  manifest["outputs"] = outputs;
  try {
    ensure_dir(cfg.out);
    write_text(cfg.out / "run_manifest.json", manifest.dump(2) + "\n");
  } catch (const std::exception& e) {
    err << "hts " << command << ": cannot write run manifest: " << e.what() << '\n';
    if (status == kExitOk) status = kExitError;
  }
  return status;
}

}  // namespace hts::cli
