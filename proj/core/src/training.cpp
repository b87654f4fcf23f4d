#include "hts/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <streambuf>
#include <sstream>

#include "hts/serialize.hpp"

namespace hts::train {

using model::Parameters;

LossConfig LossConfig::for_task(model::Task task) {
  if (task == model::Task::age8) return {LossKind::categorical, 0.2};
  return {LossKind::binary, 0.0};
}

void LossConfig::validate() const {
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ConfigError("label smoothing must be in [0, 1)");
}

std::vector<double> smoothed_targets(int label, std::size_t classes, double alpha) {
  if (classes == 0) throw ContractError("smoothed targets need at least one class");
  if (label < 0 || static_cast<std::size_t>(label) >= classes) {
    throw ContractError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
  }
  std::vector<double> t(classes, alpha / static_cast<double>(classes));
  t[static_cast<std::size_t>(label)] += 1.0 - alpha;
  return t;
}

namespace {

constexpr double kLogFloor = 1e-12;

void check_batch(std::size_t rows, const std::vector<int>& labels) {
  if (labels.size() != rows) {
    throw DimensionError("loss got " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                         " prediction rows");
  }
  if (rows == 0) throw ContractError("loss over an empty batch");
}

}  // namespace

template <typename T>
Var smoothed_cross_entropy(Tape<T>& tape, Var probs, const std::vector<int>& labels, double alpha) {
  const Tensor<T>& p = tape.value(probs);
  const std::size_t rows = p.rows(), k = p.cols();
  check_batch(rows, labels);
  std::vector<std::vector<double>> targets;
  targets.reserve(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    targets.push_back(smoothed_targets(labels[r], k, alpha));
    for (std::size_t c = 0; c < k; ++c) {
      total -= targets[r][c] * std::log(std::max(static_cast<double>(p[r * k + c]), kLogFloor));
    }
  }
  const double n = static_cast<double>(rows);
  return tape.record("cross_entropy", Tensor<T>::scalar(static_cast<T>(total / n)), {probs},
                     [probs, targets = std::move(targets), k, n](Tape<T>& t, const Tensor<T>& g) {
                       const Tensor<T>& pv = t.value(probs);
                       Tensor<T>& gp = t.grad_buffer(probs);
                       const double scale = static_cast<double>(g.item()) / n;
                       for (std::size_t r = 0; r < targets.size(); ++r)
                         for (std::size_t c = 0; c < k; ++c) {
                           const double pc = static_cast<double>(pv[r * k + c]);
                           if (pc > kLogFloor) gp[r * k + c] += static_cast<T>(-scale * targets[r][c] / pc);
                         }
                     });
}

template <typename T>
Var binary_cross_entropy(Tape<T>& tape, Var probs, const std::vector<int>& labels, double alpha) {
  const Tensor<T>& p = tape.value(probs);
  if (p.cols() != 1 && p.rank() > 1) throw DimensionError("binary loss expects one probability per row");
  const std::size_t rows = p.size();
  check_batch(rows, labels);
  std::vector<double> y(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] != 0 && labels[r] != 1) throw ContractError("binary label must be 0 or 1");
    y[r] = labels[r] * (1.0 - alpha) + alpha / 2.0;
    const double pc = std::clamp(static_cast<double>(p[r]), kLogFloor, 1.0 - kLogFloor);
    total -= y[r] * std::log(pc) + (1.0 - y[r]) * std::log(1.0 - pc);
  }
  const double n = static_cast<double>(rows);
  return tape.record("binary_cross_entropy", Tensor<T>::scalar(static_cast<T>(total / n)), {probs},
                     [probs, y = std::move(y), n](Tape<T>& t, const Tensor<T>& g) {
                       const Tensor<T>& pv = t.value(probs);
                       Tensor<T>& gp = t.grad_buffer(probs);
                       const double scale = static_cast<double>(g.item()) / n;
                       for (std::size_t r = 0; r < y.size(); ++r) {
                         const double pc = static_cast<double>(pv[r]);
                         if (pc <= kLogFloor || pc >= 1.0 - kLogFloor) continue;
                         gp[r] += static_cast<T>(-scale * (y[r] / pc - (1.0 - y[r]) / (1.0 - pc)));
                       }
                     });
}

template <typename T>
Var loss(Tape<T>& tape, Var probs, const std::vector<int>& labels, const LossConfig& cfg) {
  cfg.validate();
  return cfg.kind == LossKind::categorical ? smoothed_cross_entropy(tape, probs, labels, cfg.smoothing)
                                           : binary_cross_entropy(tape, probs, labels, cfg.smoothing);
}

double rho_infinity(double beta2) { return 2.0 / (1.0 - beta2) - 1.0; }

double rho(std::size_t t, double beta2) {
  const double bt = std::pow(beta2, static_cast<double>(t));
  return rho_infinity(beta2) - 2.0 * static_cast<double>(t) * bt / (1.0 - bt);
}

std::optional<double> rectification(std::size_t t, double beta2) {
  const double r = rho(t, beta2);
  if (!(r > 4.0)) return std::nullopt;
  const double inf = rho_infinity(beta2);
  return std::sqrt(((r - 4.0) * (r - 2.0) * inf) / ((inf - 4.0) * (inf - 2.0) * r));
}

template <typename T>
RAdam<T>::RAdam(RAdamOptions options) : options_(options) {
  if (!(options_.lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (!(options_.beta1 >= 0.0 && options_.beta1 < 1.0) || !(options_.beta2 > 0.0 && options_.beta2 < 1.0)) {
    throw ConfigError("RAdam betas must lie in [0, 1)");
  }
  if (!(options_.eps > 0.0)) throw ConfigError("RAdam epsilon must be positive");
}

template <typename T>
void RAdam<T>::step(Parameters<T>& params, const Parameters<T>& grads) {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double t = static_cast<double>(t_);
  const double bc1 = 1.0 - std::pow(b1, t);
  const double bc2 = 1.0 - std::pow(b2, t);
  std::optional<double> r = rectification(t_, b2);
  const bool adaptive = r.has_value() || options_.force_adaptive;
  const double rt = (options_.rectify && r) ? *r : 1.0;

  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw SchemaError("gradient for unknown parameter " + name);
    Tensor<T>& p = it->second;
    if (g.shape() != p.shape()) {
      throw DimensionError("gradient " + shape_string(g.shape()) + " does not match parameter " + name + " " +
                           shape_string(p.shape()));
    }
    Tensor<T>& m = m_.try_emplace(name, p.shape()).first->second;
    Tensor<T>& v = v_.try_emplace(name, p.shape()).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi_new = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
      const double vi_new = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi_new);
      v[i] = static_cast<T>(vi_new);
      const double m_hat = mi_new / bc1;
      double update;
      if (adaptive) {
        const double v_hat = std::sqrt(vi_new / bc2);
        update = options_.lr * rt * m_hat / (v_hat + options_.eps);
      } else {
        update = options_.lr * m_hat;
      }
      p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
    }
  }
}

PlateauState plateau_update(PlateauState state, const PlateauOptions& options, double metric) {
  if (!std::isfinite(metric)) throw NumericError("plateau monitor received a non-finite metric");
  if (!state.best || metric - *state.best >= options.min_delta) {
    state.best = metric;
    state.wait = 0;
    return state;
  }
  if (++state.wait >= options.patience) {
    state.lr = std::max(state.lr * options.factor, options.floor);
    state.wait = 0;
  }
  return state;
}

EarlyStopStep early_stop_update(EarlyStopState state, const EarlyStopOptions& options, double metric) {
  if (!std::isfinite(metric)) throw NumericError("early stopping received a non-finite metric");
  ++state.epoch;
  EarlyStopStep out;
  if (!state.best || metric - *state.best >= options.min_delta) {
    state.best = metric;
    state.best_epoch = state.epoch;
    state.wait = 0;
    out.improved = true;
  } else {
    ++state.wait;
    out.stop = state.wait >= options.patience;
  }
  out.state = state;
  return out;
}

namespace {

template <typename T>
std::size_t count_correct(const Tensor<T>& probs, const std::vector<int>& labels, model::Task task,
                          std::vector<int>* predictions = nullptr) {
  const auto pred = model::predicted_classes(probs, task);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
  if (predictions) predictions->insert(predictions->end(), pred.begin(), pred.end());
  return correct;
}

template <typename T>
std::string first_non_finite(const Parameters<T>& params, const Parameters<T>& grads) {
  for (const auto& [name, t] : params)
    if (!t.all_finite()) return name;
  for (const auto& [name, t] : grads)
    if (!t.all_finite()) return "gradient of " + name;
  return "loss";
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

template <typename T>
EvalResult evaluate(const model::ModelSpec& spec, Parameters<T>& params, const std::vector<Batch<T>>& batches,
                    const LossConfig& loss_cfg) {
  EvalResult out;
  double loss_sum = 0.0;
  std::size_t samples = 0, correct = 0;
  for (const auto& batch : batches) {
    Tape<T> tape;
    const auto bound = model::bind(tape, params);
    const Var probs = model::forward(tape, bound, spec, batch.images, model::ForwardOptions<T>{});
    const Var l = loss(tape, probs, batch.labels, loss_cfg);
    loss_sum += static_cast<double>(tape.value(l).item()) * static_cast<double>(batch.labels.size());
    samples += batch.labels.size();
    correct += count_correct(tape.value(probs), batch.labels, spec.task, &out.predictions);
    out.labels.insert(out.labels.end(), batch.labels.begin(), batch.labels.end());
  }
  if (samples > 0) {
    out.loss = loss_sum / static_cast<double>(samples);
    out.accuracy = static_cast<double>(correct) / static_cast<double>(samples);
  }
  return out;
}

template <typename T>
EpochRecord train_epoch(const model::ModelSpec& spec, Parameters<T>& params, const std::vector<Batch<T>>& batches,
                        const LossConfig& loss_cfg, RAdam<T>& optimizer, Rng* dropout_rng) {
  if (batches.empty()) throw ContractError("train_epoch needs at least one batch");
  const auto start = std::chrono::steady_clock::now();
  double loss_sum = 0.0;
  std::size_t samples = 0, correct = 0;
  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    const auto& batch = batches[bi];
    Tape<T> tape;
    const auto bound = model::bind(tape, params);
    const Var probs = model::forward(tape, bound, spec, batch.images,
                                     model::ForwardOptions<T>{ad::Mode::train, dropout_rng, nullptr});
    const Var l = loss(tape, probs, batch.labels, loss_cfg);
    const double lv = static_cast<double>(tape.value(l).item());
    tape.backward(l);
    const auto grads = model::gradients(tape, bound);
    if (!std::isfinite(lv)) {
      throw NumericError("non-finite loss in batch " + std::to_string(bi) + "; first offending tensor: " +
                         first_non_finite(params, grads));
    }
    optimizer.step(params, grads);
    loss_sum += lv * static_cast<double>(batch.labels.size());
    samples += batch.labels.size();
    correct += count_correct(tape.value(probs), batch.labels, spec.task);
  }
  for (const auto& [name, t] : params) validate_finite(t, name);

  EpochRecord r;
  r.train_loss = loss_sum / static_cast<double>(samples);
  r.train_acc = static_cast<double>(correct) / static_cast<double>(samples);
  r.lr = optimizer.lr();
  r.seconds = seconds_since(start);
  return r;
}

template <typename T>
FitResult fit(const model::ModelSpec& spec, Parameters<T>& params,
              const std::function<std::vector<Batch<T>>(std::size_t epoch)>& train_batches,
              const std::vector<Batch<T>>& val_batches, const FitOptions<T>& options) {
  options.loss.validate();
  RAdam<T> optimizer(options.optimizer);
  PlateauState plateau;
  plateau.lr = options.optimizer.lr;
  EarlyStopState stop_state;
  Parameters<T> best = params;
  Rng dropout_rng = Rng(options.seed).fork(0x64726f70);
  const auto monitor = options.monitor ? options.monitor : [](const EpochRecord& r) { return r.val_acc; };

  FitResult result;
  for (std::size_t epoch = 1; epoch <= options.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto batches = train_batches(epoch);
    EpochRecord rec = train_epoch(spec, params, batches, options.loss, optimizer, &dropout_rng);
    rec.epoch = epoch;
    if (!val_batches.empty()) {
      const EvalResult val = evaluate(spec, params, val_batches, options.loss);
      rec.val_loss = val.loss;
      rec.val_acc = val.accuracy;
    }
    rec.seconds = seconds_since(start);
    result.records.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);

    const double metric = monitor(rec);
    const EarlyStopStep es = early_stop_update(stop_state, options.early_stop, metric);
    stop_state = es.state;
    if (es.improved) best = params;
    if (es.stop) {
      result.stopped_early = true;
      break;
    }
    plateau = plateau_update(plateau, options.plateau, metric);
    optimizer.set_lr(plateau.lr);
  }
  params = std::move(best);
  result.best_epoch = stop_state.best_epoch;
  result.final_lr = optimizer.lr();
  return result;
}

std::string epoch_csv_row(const EpochRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.6f", r.epoch, r.train_loss, r.train_acc, r.val_loss,
                r.val_acc, r.seconds);
  return buf;
}

void write_epoch_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << kEpochCsvHeader << '\n';
  for (const auto& r : records) out << epoch_csv_row(r) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

namespace {

constexpr char kCheckpointMagic[4] = {'H', 'T', 'S', 'C'};
constexpr std::uint32_t kMaxString = 1u << 20;

void write_string(std::ostream& out, const std::string& s) {
  le::write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const std::uint32_t n = le::read_u32(in);
  if (n > kMaxString) throw FormatError("checkpoint string too long");
  std::string s(n, '\0');
  le::read_exact(in, s.data(), n);
  return s;
}

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

std::uint64_t fnv1a(std::uint64_t h, const char* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(p[i]);
    h *= kFnvPrime;
  }
  return h;
}

/// Forwards writes to another buffer while hashing them.
class HashingBuf : public std::streambuf {
 public:
  explicit HashingBuf(std::streambuf* dst) : dst_(dst) {}
  std::uint64_t hash() const { return hash_; }

 protected:
  int_type overflow(int_type c) override {
    if (traits_type::eq_int_type(c, traits_type::eof())) return traits_type::not_eof(c);
    const char ch = traits_type::to_char_type(c);
    hash_ = fnv1a(hash_, &ch, 1);
    return dst_->sputc(ch);
  }
  std::streamsize xsputn(const char* s, std::streamsize n) override {
    hash_ = fnv1a(hash_, s, static_cast<std::size_t>(n));
    return dst_->sputn(s, n);
  }

 private:
  std::streambuf* dst_;
  std::uint64_t hash_ = kFnvOffset;
};

/// Read-only view of a byte range.
class ViewBuf : public std::streambuf {
 public:
  ViewBuf(char* begin, char* end) { setg(begin, begin, end); }
};

}  // namespace

template <typename T>
void write_checkpoint(std::ostream& out, const model::ModelSpec& spec, const Parameters<T>& params) {
  model::check_schema(spec, params);
  HashingBuf buf(out.rdbuf());
  std::ostream body(&buf);
  body.write(kCheckpointMagic, 4);
  le::write_u16(body, kCheckpointVersion);
  write_string(body, spec.to_text());
  le::write_u32(body, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    write_string(body, name);
    write_tensor(body, t);
  }
  if (!body) out.setstate(std::ios::badbit);
  le::write_u64(out, buf.hash());
  if (!out) throw IoError("failed writing checkpoint");
}

template <typename T>
Checkpoint<T> read_checkpoint(std::istream& in, const std::optional<model::ModelSpec>& expected) {
  std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (bytes.size() < 4 + 2 + 8) throw FormatError("checkpoint truncated");
  if (!std::equal(bytes.begin(), bytes.begin() + 4, kCheckpointMagic)) throw FormatError("bad checkpoint magic");
  {
    ViewBuf vb(bytes.data() + 4, bytes.data() + 6);
    std::istream vin(&vb);
    const std::uint16_t version = le::read_u16(vin);
    if (version != kCheckpointVersion) {
      throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
  }
  const std::size_t body_size = bytes.size() - 8;
  {
    ViewBuf tb(bytes.data() + body_size, bytes.data() + bytes.size());
    std::istream tin(&tb);
    if (le::read_u64(tin) != fnv1a(kFnvOffset, bytes.data(), body_size)) {
      throw FormatError("checkpoint checksum mismatch (file corrupted or truncated)");
    }
  }

  ViewBuf buf(bytes.data() + 6, bytes.data() + body_size);
  std::istream body(&buf);
  Checkpoint<T> ck;
  ck.spec = model::ModelSpec::from_text(read_string(body));
  const std::uint32_t count = le::read_u32(body);
  std::string previous;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = read_string(body);
    if (i > 0 && !(previous < name)) throw FormatError("checkpoint tensor names not strictly sorted");
    Tensor<T> t = read_tensor<T>(body);
    previous = name;
    ck.params.emplace(std::move(name), std::move(t));
  }
  if (body.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint");

  if (expected && !(ck.spec == *expected)) {
    throw SchemaError("checkpoint model spec does not match the requested one:\n" + ck.spec.to_text() +
                      "expected:\n" + expected->to_text());
  }
  model::check_schema(expected ? *expected : ck.spec, ck.params);
  return ck;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const model::ModelSpec& spec, const Parameters<T>& params) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    write_checkpoint(out, spec, params);
    out.flush();
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into " + path.string() + ": " + ec.message());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const std::optional<model::ModelSpec>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_checkpoint<T>(in, expected);
}

#define HTS_INSTANTIATE(T)                                                                                      \
  template Var smoothed_cross_entropy<T>(Tape<T>&, Var, const std::vector<int>&, double);                     \
  template Var binary_cross_entropy<T>(Tape<T>&, Var, const std::vector<int>&, double);                       \
  template Var loss<T>(Tape<T>&, Var, const std::vector<int>&, const LossConfig&);                            \
  template class RAdam<T>;                                                                                    \
  template EvalResult evaluate<T>(const model::ModelSpec&, Parameters<T>&, const std::vector<Batch<T>>&,      \
                                  const LossConfig&);                                                         \
  template EpochRecord train_epoch<T>(const model::ModelSpec&, Parameters<T>&, const std::vector<Batch<T>>&,  \
                                      const LossConfig&, RAdam<T>&, Rng*);                                    \
  template FitResult fit<T>(const model::ModelSpec&, Parameters<T>&,                                          \
                            const std::function<std::vector<Batch<T>>(std::size_t)>&,                         \
                            const std::vector<Batch<T>>&, const FitOptions<T>&);                              \
  template void write_checkpoint<T>(std::ostream&, const model::ModelSpec&, const Parameters<T>&);            \
  template Checkpoint<T> read_checkpoint<T>(std::istream&, const std::optional<model::ModelSpec>&);           \
  template void save_checkpoint<T>(const std::filesystem::path&, const model::ModelSpec&, const Parameters<T>&); \
  template Checkpoint<T> load_checkpoint<T>(const std::filesystem::path&, const std::optional<model::ModelSpec>&);

HTS_INSTANTIATE(float)
HTS_INSTANTIATE(double)
#undef HTS_INSTANTIATE

}  // namespace hts::train
