#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "hts/model.hpp"

namespace hts::train {

enum class LossKind { categorical, binary };

struct LossConfig {
  LossKind kind = LossKind::categorical;
  double smoothing = 0.2;

  /// Categorical with 0.2 smoothing for age8, binary without for gender2.
  static LossConfig for_task(model::Task task);
  void validate() const;
};

/// (1 - alpha) * onehot + alpha / K.
std::vector<double> smoothed_targets(int label, std::size_t classes, double alpha);

/// Batch mean of -sum(target * log(max(p, 1e-12))) over rows of probs [B x K].
/// Throws ContractError for a label outside [0, K).
template <typename T>
Var smoothed_cross_entropy(Tape<T>& tape, Var probs, const std::vector<int>& labels, double alpha);

/// Batch mean of -[y log p + (1 - y) log(1 - p)] with p clamped to
/// [1e-12, 1 - 1e-12] and y smoothed to y (1 - alpha) + alpha / 2.
template <typename T>
Var binary_cross_entropy(Tape<T>& tape, Var probs, const std::vector<int>& labels, double alpha = 0.0);

template <typename T>
Var loss(Tape<T>& tape, Var probs, const std::vector<int>& labels, const LossConfig& cfg);

struct RAdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Scale the adaptive step by r_t. Off gives plain bias-corrected Adam
  /// once combined with force_adaptive.
  bool rectify = true;
  /// Take the adaptive branch even while rho_t <= 4.
  bool force_adaptive = false;
};

/// rho_inf = 2 / (1 - beta2) - 1.
double rho_infinity(double beta2);
/// rho_t = rho_inf - 2 t beta2^t / (1 - beta2^t).
double rho(std::size_t t, double beta2);
/// r_t when rho_t > 4, otherwise nullopt (momentum-only step).
std::optional<double> rectification(std::size_t t, double beta2);

template <typename T>
class RAdam {
 public:
  explicit RAdam(RAdamOptions options = {});

  /// One update of every tensor named in `grads`.
  void step(model::Parameters<T>& params, const model::Parameters<T>& grads);

  std::size_t steps() const { return t_; }
  double lr() const { return options_.lr; }
  void set_lr(double lr) { options_.lr = lr; }
  const RAdamOptions& options() const { return options_; }
  const model::Parameters<T>& first_moment() const { return m_; }
  const model::Parameters<T>& second_moment() const { return v_; }

 private:
  RAdamOptions options_;
  std::size_t t_ = 0;
  model::Parameters<T> m_;
  model::Parameters<T> v_;
};

struct PlateauOptions {
  double factor = 0.2;
  double floor = 1e-6;
  std::size_t patience = 2;
  double min_delta = 1e-4;
};

struct PlateauState {
  std::optional<double> best;
  std::size_t wait = 0;
  double lr = 1e-4;

  friend bool operator==(const PlateauState&, const PlateauState&) = default;
};

/// Monitors a metric where larger is better. After `patience` epochs
/// without an improvement of at least min_delta the learning rate becomes
/// max(lr * factor, floor) and the counter restarts.
PlateauState plateau_update(PlateauState state, const PlateauOptions& options, double metric);

struct EarlyStopOptions {
  std::size_t patience = 5;
  double min_delta = 1e-4;
};

struct EarlyStopState {
  std::optional<double> best;
  std::size_t best_epoch = 0;
  std::size_t epoch = 0;
  std::size_t wait = 0;

  friend bool operator==(const EarlyStopState&, const EarlyStopState&) = default;
};

struct EarlyStopStep {
  EarlyStopState state;
  /// The caller should snapshot the current weights.
  bool improved = false;
  /// The caller should stop and restore the snapshot from state.best_epoch.
  bool stop = false;
};

EarlyStopStep early_stop_update(EarlyStopState state, const EarlyStopOptions& options, double metric);

template <typename T>
struct Batch {
  Tensor<T> images;  // [B x H x W x C]
  std::vector<int> labels;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double seconds = 0.0;
  double lr = 0.0;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<int> predictions;
  std::vector<int> labels;
};

/// Inference-mode loss, accuracy and predictions over `batches`.
template <typename T>
EvalResult evaluate(const model::ModelSpec& spec, model::Parameters<T>& params,
                    const std::vector<Batch<T>>& batches, const LossConfig& loss_cfg);

/// forward(train) -> loss -> backward -> RAdam step for every batch. Fills
/// the train fields and wall-clock seconds. A non-finite loss throws
/// NumericError naming the batch and the first non-finite tensor.
template <typename T>
EpochRecord train_epoch(const model::ModelSpec& spec, model::Parameters<T>& params,
                        const std::vector<Batch<T>>& batches, const LossConfig& loss_cfg, RAdam<T>& optimizer,
                        Rng* dropout_rng = nullptr);

template <typename T>
struct FitOptions {
  LossConfig loss;
  RAdamOptions optimizer;
  PlateauOptions plateau;
  EarlyStopOptions early_stop;
  std::size_t max_epochs = 100;
  std::uint64_t seed = 0;
  /// Monitored value, validation accuracy by default.
  std::function<double(const EpochRecord&)> monitor;
  /// Called after every epoch, e.g. to append to a CSV file.
  std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
  std::vector<EpochRecord> records;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  double final_lr = 0.0;
};

/// Runs epochs until max_epochs or early stopping, then leaves the
/// parameters of the best monitored epoch in `params`. `train_batches(e)`
/// supplies the (possibly reshuffled or augmented) batches for epoch e.
template <typename T>
FitResult fit(const model::ModelSpec& spec, model::Parameters<T>& params,
              const std::function<std::vector<Batch<T>>(std::size_t epoch)>& train_batches,
              const std::vector<Batch<T>>& val_batches, const FitOptions<T>& options);

inline constexpr std::string_view kEpochCsvHeader = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";
std::string epoch_csv_row(const EpochRecord& r);
void write_epoch_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& records);

// Checkpoint file:
//   "HTSC" | u16 version | spec text | u32 count | (name, tensor) * count | u64 FNV-1a of everything before it
inline constexpr std::uint16_t kCheckpointVersion = 2;

template <typename T>
struct Checkpoint {
  model::ModelSpec spec;
  model::Parameters<T> params;
};

template <typename T>
void write_checkpoint(std::ostream& out, const model::ModelSpec& spec, const model::Parameters<T>& params);

/// Reads the whole stream and verifies the checksum before parsing; any
/// corruption is a FormatError. When `expected` is given the stored spec and
/// every tensor must match it (SchemaError otherwise).
template <typename T>
Checkpoint<T> read_checkpoint(std::istream& in, const std::optional<model::ModelSpec>& expected = std::nullopt);

/// Writes to a temporary sibling and renames it into place.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const model::ModelSpec& spec,
                     const model::Parameters<T>& params);

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path,
                              const std::optional<model::ModelSpec>& expected = std::nullopt);

}  // namespace hts::train
