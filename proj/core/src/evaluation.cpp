#include "hts/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <span>

namespace hts::eval {

std::size_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

std::size_t ConfusionMatrix::trace() const {
  std::size_t t = 0;
  for (std::size_t i = 0; i < classes; ++i) t += at(i, i);
  return t;
}

std::size_t task_classes(model::Task task) { return task == model::Task::age8 ? 8 : 2; }

ConfusionMatrix confusion(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t classes) {
  if (truth.size() != predicted.size()) {
    throw ContractError("confusion: " + std::to_string(truth.size()) + " labels but " +
                        std::to_string(predicted.size()) + " predictions");
  }
  ConfusionMatrix cm(classes);
  const auto check = [classes](int v) {
    if (v < 0 || static_cast<std::size_t>(v) >= classes) {
      throw ContractError("label " + std::to_string(v) + " outside [0, " + std::to_string(classes) + ")");
    }
    return static_cast<std::size_t>(v);
  };
  for (std::size_t i = 0; i < truth.size(); ++i) ++cm.at(check(truth[i]), check(predicted[i]));
  return cm;
}

double accuracy(const ConfusionMatrix& cm) {
  const std::size_t total = cm.total();
  if (total == 0) throw DomainError("accuracy of an empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

BinaryCounts class_counts(const ConfusionMatrix& cm, std::size_t k) {
  if (k >= cm.classes) throw ContractError("class " + std::to_string(k) + " out of range");
  BinaryCounts c;
  for (std::size_t t = 0; t < cm.classes; ++t) {
    for (std::size_t p = 0; p < cm.classes; ++p) {
      const std::size_t n = cm.at(t, p);
      if (t == k && p == k) c.tp += n;
      else if (t == k) c.fn += n;
      else if (p == k) c.fp += n;
      else c.tn += n;
    }
  }
  return c;
}

double binary_accuracy(const BinaryCounts& c) {
  const std::size_t total = c.tn + c.fp + c.tp + c.fn;
  if (total == 0) throw DomainError("accuracy with no samples");
  return static_cast<double>(c.tn + c.tp) / static_cast<double>(total);
}

std::vector<double> f1_scores(const ConfusionMatrix& cm) {
  if (cm.classes < 2) throw ContractError("F1 needs at least two classes");
  std::vector<double> out(cm.classes, 0.0);
  for (std::size_t k = 0; k < cm.classes; ++k) {
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < cm.classes; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const double diag = static_cast<double>(cm.at(k, k));
    const double precision = col ? diag / static_cast<double>(col) : 0.0;
    const double recall = row ? diag / static_cast<double>(row) : 0.0;
    out[k] = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  }
  return out;
}

double adjacent_accuracy(const ConfusionMatrix& cm) {
  const std::size_t total = cm.total();
  if (total == 0) throw DomainError("adjacent accuracy of an empty confusion matrix");
  std::size_t near = 0;
  for (std::size_t t = 0; t < cm.classes; ++t)
    for (std::size_t p = 0; p < cm.classes; ++p)
      if (t <= p + 1 && p <= t + 1) near += cm.at(t, p);
  return static_cast<double>(near) / static_cast<double>(total);
}

void write_confusion_csv(std::ostream& out, const ConfusionMatrix& cm) {
  for (std::size_t t = 0; t < cm.classes; ++t) {
    for (std::size_t p = 0; p < cm.classes; ++p) out << (p ? "," : "") << cm.at(t, p);
    out << '\n';
  }
}

FoldPlan kfold_plan(std::size_t n, std::size_t k, double val_fraction, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold needs k >= 2");
  if (n < k) throw ConfigError("k-fold needs at least k samples (n=" + std::to_string(n) + ", k=" + std::to_string(k) + ")");
  if (!(val_fraction >= 0 && val_fraction < 1)) throw ConfigError("validation fraction must be in [0, 1)");

  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(ids));

  FoldPlan plan{k, seed, {}};
  std::size_t start = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = n / k + (f < n % k ? 1 : 0);
    Fold fold;
    fold.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(start),
                     ids.begin() + static_cast<std::ptrdiff_t>(start + len));
    std::vector<std::size_t> pool(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(start));
    pool.insert(pool.end(), ids.begin() + static_cast<std::ptrdiff_t>(start + len), ids.end());
    Rng fold_rng = rng.fork(f);
    fold_rng.shuffle(std::span<std::size_t>(pool));
    const auto nval = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(pool.size())));
    fold.validation.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(nval));
    fold.train.assign(pool.begin() + static_cast<std::ptrdiff_t>(nval), pool.end());
    plan.folds.push_back(std::move(fold));
    start += len;
  }
  return plan;
}

Aggregate aggregate(const std::vector<double>& values) {
  if (values.empty()) throw ContractError("aggregate of no values");
  const double n = static_cast<double>(values.size());
  double mean = 0;
  for (double v : values) mean += v;
  mean /= n;
  double sq = 0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / n)};
}

RunAggregate aggregate_folds(const std::vector<FoldRecord>& records) {
  auto column = [&](double FoldRecord::*field) {
    std::vector<double> v;
    for (const auto& r : records) v.push_back(r.*field);
    return aggregate(v);
  };
  RunAggregate a;
  a.train_loss = column(&FoldRecord::train_loss);
  a.train_acc = column(&FoldRecord::train_acc);
  a.val_loss = column(&FoldRecord::val_loss);
  a.val_acc = column(&FoldRecord::val_acc);
  a.test_loss = column(&FoldRecord::test_loss);
  a.test_acc = column(&FoldRecord::test_acc);
  a.epoch_seconds = column(&FoldRecord::epoch_seconds);
  a.folds = records.size();
  return a;
}

CrossValResult crossval(const FoldPlan& plan, const FoldRunner& runner) {
  CrossValResult out;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    try {
      FoldRecord r = runner(f, plan.folds[f]);
      r.fold = f;
      out.folds.push_back(std::move(r));
    } catch (const FoldError&) {
      throw;
    } catch (const std::exception& e) {
      throw FoldError(f, e.what());
    }
  }
  out.aggregate = aggregate_folds(out.folds);
  return out;
}

template <typename T>
FoldRunner model_fold_runner(const model::ModelSpec& spec, const data::Dataset& dataset, const CrossValConfig& cfg) {
  return [spec, &dataset, cfg](std::size_t fold, const Fold& ids) {
    const data::Dataset train_set = dataset.subset(ids.train);
    const data::Dataset val_set = dataset.subset(ids.validation);
    const data::Dataset test_set = dataset.subset(ids.test);
    const std::uint64_t fold_seed = mix_seed(cfg.seed, fold);

    Rng init(mix_seed(fold_seed, 1));
    auto params = model::init_parameters<T>(spec, init);

    const auto eval_batches = [&](const data::Dataset& d) {
      data::BatchOptions o;
      o.batch_size = cfg.batch_size;
      return data::make_batches<T>(d, o);
    };
    const auto val_batches = eval_batches(val_set);
    const auto test_batches = eval_batches(test_set);

    train::FitOptions<T> fit;
    fit.loss = cfg.loss;
    fit.optimizer = cfg.optimizer;
    fit.plateau = cfg.plateau;
    fit.early_stop = cfg.early_stop;
    fit.max_epochs = cfg.max_epochs;
    fit.seed = mix_seed(fold_seed, 2);
    if (val_batches.empty()) fit.monitor = [](const train::EpochRecord& r) { return r.train_acc; };
    if (cfg.on_epoch) fit.on_epoch = [&cfg, fold](const train::EpochRecord& r) { cfg.on_epoch(fold, r); };

    const auto train_batches = [&](std::size_t epoch) {
      data::BatchOptions o;
      o.batch_size = cfg.batch_size;
      o.shuffle_seed = mix_seed(fold_seed, 100 + epoch);
      if (cfg.augment) {
        o.augment = *cfg.augment;
        o.augment->seed = mix_seed(mix_seed(cfg.augment->seed, fold_seed), epoch);
      }
      return data::make_batches<T>(train_set, o);
    };
    const auto result = train::fit<T>(spec, params, train_batches, val_batches, fit);

    FoldRecord rec;
    rec.fold = fold;
    rec.epochs = result.records.size();
    rec.best_epoch = result.best_epoch;
    const auto& best = result.records.at(result.best_epoch - 1);
    rec.train_loss = best.train_loss;
    rec.train_acc = best.train_acc;
    rec.val_loss = best.val_loss;
    rec.val_acc = best.val_acc;
    double secs = 0;
    for (const auto& r : result.records) secs += r.seconds;
    rec.epoch_seconds = secs / static_cast<double>(result.records.size());

    const auto test = train::evaluate(spec, params, test_batches, cfg.loss);
    rec.test_loss = test.loss;
    rec.test_acc = test.accuracy;
    rec.test_confusion = confusion(test.labels, test.predictions, task_classes(spec.task));
    return rec;
  };
}

template <typename T>
CrossValResult crossval_run(const model::ModelSpec& spec, const data::Dataset& dataset, const CrossValConfig& cfg) {
  const FoldPlan plan = kfold_plan(dataset.size(), cfg.k, cfg.val_fraction, cfg.seed);
  return crossval(plan, model_fold_runner<T>(spec, dataset, cfg));
}

std::vector<std::string> results_columns(model::Task task) {
  return {task == model::Task::age8 ? "Age classification models" : "Gender classification models",
          "Training loss mean (Std)",
          "Training accuracy mean (Std)",
          "Validation loss mean (Std)",
          "Validation accuracy mean (Std)",
          "Test loss mean (Std)",
          "Test accuracy mean (Std)",
          "Epoch Time Mean in Sec (Std)"};
}

namespace {

std::string cell(const Aggregate& a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f (%.6f)", a.mean, a.std);
  return buf;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void write_results_csv(std::ostream& out, model::Task task,
                       const std::vector<std::pair<std::string, RunAggregate>>& variants) {
  const auto cols = results_columns(task);
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& [name, a] : variants) {
    if (name.find_first_of(",\n") != std::string::npos) throw FormatError("variant name '" + name + "' has a separator");
    out << name << ',' << cell(a.train_loss) << ',' << cell(a.train_acc) << ',' << cell(a.val_loss) << ','
        << cell(a.val_acc) << ',' << cell(a.test_loss) << ',' << cell(a.test_acc) << ',' << cell(a.epoch_seconds)
        << '\n';
  }
}

void write_folds_csv(std::ostream& out, const std::vector<FoldRecord>& records) {
  out << kFoldCsvHeader << '\n';
  for (const auto& r : records) {
    out << r.fold << ',' << num(r.train_loss) << ',' << num(r.train_acc) << ',' << num(r.val_loss) << ','
        << num(r.val_acc) << ',' << num(r.test_loss) << ',' << num(r.test_acc) << ',' << num(r.epoch_seconds) << ','
        << r.epochs << ',' << r.best_epoch << '\n';
  }
}

template FoldRunner model_fold_runner<float>(const model::ModelSpec&, const data::Dataset&, const CrossValConfig&);
template FoldRunner model_fold_runner<double>(const model::ModelSpec&, const data::Dataset&, const CrossValConfig&);
template CrossValResult crossval_run<float>(const model::ModelSpec&, const data::Dataset&, const CrossValConfig&);
template CrossValResult crossval_run<double>(const model::ModelSpec&, const data::Dataset&, const CrossValConfig&);

}  // namespace hts::eval
