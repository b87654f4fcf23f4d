#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "hts/data.hpp"
#include "hts/error.hpp"
#include "hts/training.hpp"

namespace hts::eval {

/// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;  // row-major classes x classes

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t k) : classes(k), counts(k * k, 0) {}

  std::size_t& at(std::size_t t, std::size_t p) { return counts[t * classes + p]; }
  std::size_t at(std::size_t t, std::size_t p) const { return counts[t * classes + p]; }
  std::size_t total() const;
  std::size_t trace() const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// Label classes of a task: 8 age groups, or 2 genders (one sigmoid output).
std::size_t task_classes(model::Task task);

/// ContractError on length mismatch or a label outside [0, K).
ConfusionMatrix confusion(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t classes);

/// trace / total. DomainError on an empty matrix.
double accuracy(const ConfusionMatrix& cm);

/// One-vs-rest counts for class k.
struct BinaryCounts {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
};
BinaryCounts class_counts(const ConfusionMatrix& cm, std::size_t k);

/// (TN + TP) / (TN + FP + TP + FN). DomainError when all four are zero.
double binary_accuracy(const BinaryCounts& c);

/// precision = diag / column sum, recall = diag / row sum, 2PR / (P + R),
/// with 0 wherever a denominator is 0. Needs K >= 2.
std::vector<double> f1_scores(const ConfusionMatrix& cm);

/// Fraction of samples whose prediction is within one class index of the truth.
double adjacent_accuracy(const ConfusionMatrix& cm);

/// K lines of K comma-separated counts.
void write_confusion_csv(std::ostream& out, const ConfusionMatrix& cm);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;

  friend bool operator==(const Fold&, const Fold&) = default;
};

struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<Fold> folds;

  friend bool operator==(const FoldPlan&, const FoldPlan&) = default;
};

/// Shuffles 0..n-1 with `seed` and cuts k test folds whose sizes differ by at
/// most one. For each fold the remaining ids are reshuffled and the first
/// round(val_fraction * pool) become validation. ConfigError when n < k.
FoldPlan kfold_plan(std::size_t n, std::size_t k = 5, double val_fraction = 0.2, std::uint64_t seed = 0);

struct Aggregate {
  double mean = 0;
  double std = 0;  // population

  friend bool operator==(const Aggregate&, const Aggregate&) = default;
};

/// ContractError on an empty list.
Aggregate aggregate(const std::vector<double>& values);

struct FoldRecord {
  std::size_t fold = 0;
  double train_loss = 0, train_acc = 0;
  double val_loss = 0, val_acc = 0;
  double test_loss = 0, test_acc = 0;
  double epoch_seconds = 0;  // mean over the fold's epochs
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  ConfusionMatrix test_confusion;
};

struct RunAggregate {
  Aggregate train_loss, train_acc, val_loss, val_acc, test_loss, test_acc, epoch_seconds;
  std::size_t folds = 0;
};

RunAggregate aggregate_folds(const std::vector<FoldRecord>& records);

/// Thrown when a fold fails; wraps the original message.
class FoldError : public Error {
 public:
  FoldError(std::size_t fold, const std::string& what)
      : Error("fold " + std::to_string(fold) + ": " + what), fold_(fold) {}
  std::size_t fold() const { return fold_; }

 private:
  std::size_t fold_;
};

using FoldRunner = std::function<FoldRecord(std::size_t fold, const Fold& ids)>;

struct CrossValResult {
  std::vector<FoldRecord> folds;
  RunAggregate aggregate;
};

/// Runs every fold in order and aggregates. The first failure aborts with FoldError.
CrossValResult crossval(const FoldPlan& plan, const FoldRunner& runner);

struct CrossValConfig {
  std::size_t k = 5;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 100;
  train::LossConfig loss;
  train::RAdamOptions optimizer;
  train::PlateauOptions plateau;
  train::EarlyStopOptions early_stop;
  /// Training-set augmentation; off when empty.
  std::optional<data::AugmentConfig> augment;
  /// Called after every epoch of every fold.
  std::function<void(std::size_t fold, const train::EpochRecord&)> on_epoch;
};

/// Fold runner that trains the model from a fresh seeded initialization on
/// the fold's training ids, monitors the validation ids, restores the best
/// epoch and evaluates the test ids. Train/validation metrics are those of
/// the best epoch.
template <typename T>
FoldRunner model_fold_runner(const model::ModelSpec& spec, const data::Dataset& dataset, const CrossValConfig& cfg);

/// kfold_plan + model_fold_runner + crossval.
template <typename T>
CrossValResult crossval_run(const model::ModelSpec& spec, const data::Dataset& dataset, const CrossValConfig& cfg);

/// Header of the results table: the model column then the seven metric columns.
std::vector<std::string> results_columns(model::Task task);

/// One row per variant, cells "mean (std)" with six decimals.
void write_results_csv(std::ostream& out, model::Task task,
                       const std::vector<std::pair<std::string, RunAggregate>>& variants);

inline constexpr std::string_view kFoldCsvHeader =
    "fold,train_loss,train_acc,val_loss,val_acc,test_loss,test_acc,epoch_seconds,epochs,best_epoch";
void write_folds_csv(std::ostream& out, const std::vector<FoldRecord>& records);

}  // namespace hts::eval
