#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "hts/gradcheck.hpp"
#include "hts/training.hpp"

using namespace hts;
using namespace hts::train;
using model::ModelSpec;
using model::Parameters;
using model::Task;
using TapeD = Tape<double>;

namespace {

// Values from a standalone scalar evaluation of rho_t and r_t at
// beta2 = 0.999, frozen before the optimizer was written.
constexpr double kRhoInf = 1998.9999999999982;
constexpr double kRho[] = {1.0, 1.999499749846109, 2.9986659997755396, 3.9974987498546852,
                           4.995998000395048};
constexpr double kR5 = 0.017311503166315034;
constexpr double kR6 = 0.02582111280185855;
constexpr double kR7 = 0.032738814409964026;
constexpr double kR8 = 0.03873827701983062;

// Scalar RAdam written directly from the update rule, one coordinate at a time.
struct ScalarRAdam {
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  bool rectify = true, force_adaptive = false;
  double m = 0, v = 0;
  int t = 0;
  double step(double theta, double g) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double inf = 2 / (1 - b2) - 1;
    const double bt = std::pow(b2, t);
    const double rho = inf - 2 * t * bt / (1 - bt);
    if (rho > 4 || force_adaptive) {
      const double r = rho > 4 && rectify ? std::sqrt((rho - 4) * (rho - 2) * inf / ((inf - 4) * (inf - 2) * rho)) : 1.0;
      return theta - lr * r * mh / (std::sqrt(v / (1 - bt)) + eps);
    }
    return theta - lr * mh;
  }
};

Parameters<double> single(const std::string& name, TensorD t) {
  Parameters<double> p;
  p.emplace(name, std::move(t));
  return p;
}

TensorD probs_row(std::vector<double> v) {
  const std::size_t k = v.size();
  return TensorD(Shape{1, k}, std::move(v));
}

double ce(const TensorD& probs, const std::vector<int>& labels, double alpha) {
  TapeD tape;
  return tape.value(smoothed_cross_entropy(tape, tape.constant(probs), labels, alpha)).item();
}

double bce(const TensorD& probs, const std::vector<int>& labels) {
  TapeD tape;
  return tape.value(binary_cross_entropy(tape, tape.constant(probs), labels)).item();
}

}  // namespace

TEST(Loss, CrossEntropyExamples) {
  EXPECT_DOUBLE_EQ(ce(probs_row({0, 1, 0}), {1}, 0.0), 0.0);
  EXPECT_NEAR(ce(probs_row(std::vector<double>(8, 0.125)), {3}, 0.0), std::log(8.0), 1e-9);
  EXPECT_THROW(ce(probs_row({0.5, 0.5}), {2}, 0.0), ContractError);
  EXPECT_THROW(ce(probs_row({0.5, 0.5}), {-1}, 0.0), ContractError);
}

TEST(Loss, SmoothedTargetsAndDirectFormula) {
  const auto t = smoothed_targets(2, 8, 0.2);
  double sum = 0;
  for (std::size_t k = 0; k < 8; ++k) {
    EXPECT_NEAR(t[k], k == 2 ? 0.825 : 0.025, 1e-15);
    sum += t[k];
  }
  EXPECT_NEAR(sum, 1.0, 1e-15);

  const std::vector<double> p = {0.05, 0.1, 0.3, 0.05, 0.2, 0.1, 0.15, 0.05};
  double direct = 0;
  for (std::size_t k = 0; k < 8; ++k) direct -= (k == 2 ? 0.825 : 0.025) * std::log(p[k]);
  EXPECT_NEAR(ce(probs_row(p), {2}, 0.2), direct, 1e-12);
}

TEST(Loss, SmoothedTargetsSumToOneForAnyAlpha) {
  for (double alpha : {0.0, 0.05, 0.2, 0.5, 0.99})
    for (std::size_t k : {2u, 3u, 8u, 17u}) {
      const auto t = smoothed_targets(0, k, alpha);
      EXPECT_NEAR(std::accumulate(t.begin(), t.end(), 0.0), 1.0, 1e-15);
    }
}

TEST(Loss, BinaryExamples) {
  EXPECT_NEAR(bce(TensorD(Shape{2, 1}, 0.5), {0, 1}), std::log(2.0), 1e-12);
  EXPECT_NEAR(bce(TensorD(Shape{1, 1}, 0.9), {1}), -std::log(0.9), 1e-12);
  EXPECT_NEAR(bce(TensorD(Shape{1, 1}, 0.9), {1}), 0.10536051565782628, 1e-12);
  const double exact = bce(TensorD(Shape{2, 1}, std::vector<double>{1.0, 0.0}), {1, 0});
  EXPECT_GT(exact, 0.0);
  EXPECT_LT(exact, 1e-10);
}

TEST(Loss, GradientsMatchFiniteDifferences) {
  Rng rng(4);
  TensorD logits(Shape{3, 5});
  for (auto& v : logits.data()) v = rng.normal();
  const std::vector<int> labels = {0, 4, 2};
  auto f = [&](const TensorD& x) {
    TapeD tape;
    return tape.value(smoothed_cross_entropy(tape, ad::softmax_rows(tape, tape.leaf(x)), labels, 0.2)).item();
  };
  TapeD tape;
  const Var x = tape.leaf(logits);
  tape.backward(smoothed_cross_entropy(tape, ad::softmax_rows(tape, x), labels, 0.2));
  EXPECT_LE(finite_difference_check(f, logits, tape.grad(x), 1e-5).max_relative_error, 1e-6);

  TensorD z(Shape{4, 1});
  for (auto& v : z.data()) v = rng.normal();
  const std::vector<int> y = {1, 0, 0, 1};
  auto g = [&](const TensorD& x) {
    TapeD t;
    return t.value(binary_cross_entropy(t, ad::sigmoid(t, t.leaf(x)), y, 0.1)).item();
  };
  TapeD t2;
  const Var zx = t2.leaf(z);
  t2.backward(binary_cross_entropy(t2, ad::sigmoid(t2, zx), y, 0.1));
  EXPECT_LE(finite_difference_check(g, z, t2.grad(zx), 1e-5).max_relative_error, 1e-6);
}

TEST(RAdam, RhoAndRectificationFrozenValues) {
  EXPECT_NEAR(rho_infinity(0.999), kRhoInf, 1e-9);
  EXPECT_NEAR(rho_infinity(0.999), 1999.0, 1e-9);
  for (std::size_t t = 1; t <= 5; ++t) EXPECT_NEAR(rho(t, 0.999), kRho[t - 1], 1e-9) << t;
  for (std::size_t t = 1; t <= 4; ++t) EXPECT_FALSE(rectification(t, 0.999).has_value()) << t;
  ASSERT_TRUE(rectification(5, 0.999).has_value());
  EXPECT_NEAR(*rectification(5, 0.999), kR5, 1e-12);
  EXPECT_NEAR(*rectification(6, 0.999), kR6, 1e-12);
  EXPECT_NEAR(*rectification(7, 0.999), kR7, 1e-12);
  EXPECT_NEAR(*rectification(8, 0.999), kR8, 1e-12);
  EXPECT_NEAR(*rectification(1000000, 0.999), 1.0, 1e-3);
}

TEST(RAdam, MatchesScalarOracleForHundredSteps) {
  // f(theta) = sum_i c_i (theta_i - s_i)^2 with distinct curvatures.
  const std::vector<double> c = {1.0, 0.3, 2.5}, s = {0.7, -1.2, 0.05};
  TensorD theta(Shape{3}, std::vector<double>{0.1, 0.4, -0.3});
  Parameters<double> params = single("w", theta);
  RAdam<double> opt(RAdamOptions{0.05});
  std::vector<ScalarRAdam> oracle(3, ScalarRAdam{0.05});
  std::vector<double> ref = {0.1, 0.4, -0.3};
  for (int step = 0; step < 100; ++step) {
    TensorD g(Shape{3});
    for (std::size_t i = 0; i < 3; ++i) g[i] = 2 * c[i] * (params.at("w")[i] - s[i]);
    opt.step(params, single("w", g));
    for (std::size_t i = 0; i < 3; ++i) {
      ref[i] = oracle[i].step(ref[i], 2 * c[i] * (ref[i] - s[i]));
      ASSERT_NEAR(params.at("w")[i], ref[i], 1e-10) << "step " << step;
    }
  }
  EXPECT_EQ(opt.steps(), 100u);
}

TEST(RAdam, EarlyStepsUseMomentumOnly) {
  Parameters<double> params = single("w", TensorD::vector({1.0}));
  RAdam<double> opt(RAdamOptions{0.1});
  opt.step(params, single("w", TensorD::vector({2.0})));
  // t = 1: m_hat = g, so theta = 1 - 0.1 * 2.
  EXPECT_NEAR(params.at("w")[0], 0.8, 1e-15);
}

TEST(RAdam, UnrectifiedForcedAdaptiveIsAdam) {
  const std::vector<double> s = {0.5, -0.25, 2.0};
  Parameters<double> params = single("w", TensorD(Shape{3}));
  RAdam<double> opt(RAdamOptions{0.01, 0.9, 0.999, 1e-8, false, true});
  std::vector<double> ref(3, 0.0);
  std::vector<ScalarRAdam> oracle(3, ScalarRAdam{0.01, 0.9, 0.999, 1e-8, false, true});
  for (int step = 0; step < 50; ++step) {
    TensorD g(Shape{3});
    for (std::size_t i = 0; i < 3; ++i) g[i] = 2 * (params.at("w")[i] - s[i]);
    opt.step(params, single("w", g));
    for (std::size_t i = 0; i < 3; ++i) {
      ref[i] = oracle[i].step(ref[i], 2 * (ref[i] - s[i]));
      ASSERT_NEAR(params.at("w")[i], ref[i], 1e-12);
    }
  }
  // First Adam step has magnitude lr regardless of gradient scale.
  Parameters<double> p1 = single("w", TensorD::vector({0.0}));
  RAdam<double> adam(RAdamOptions{0.01, 0.9, 0.999, 1e-8, false, true});
  adam.step(p1, single("w", TensorD::vector({1234.0})));
  EXPECT_NEAR(p1.at("w")[0], -0.01, 1e-12);
}

TEST(RAdam, ConvergesOnQuadratic) {
  const std::vector<double> target = {1.0, -2.0, 0.5, 3.0};
  Parameters<double> params = single("w", TensorD(Shape{4}));
  RAdam<double> opt(RAdamOptions{1e-2});
  double dist = 0;
  int steps = 0;
  for (; steps < 2000; ++steps) {
    TensorD g(Shape{4});
    dist = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      const double d = params.at("w")[i] - target[i];
      g[i] = 2 * d;
      dist += d * d;
    }
    if (std::sqrt(dist) <= 1e-3) break;
    opt.step(params, single("w", g));
  }
  EXPECT_LE(std::sqrt(dist), 1e-3) << "after " << steps << " steps";
}

TEST(RAdam, RejectsMismatchedGradient) {
  Parameters<double> params = single("w", TensorD(Shape{2}));
  RAdam<double> opt;
  EXPECT_THROW(opt.step(params, single("w", TensorD(Shape{3}))), DimensionError);
  EXPECT_THROW(opt.step(params, single("v", TensorD(Shape{2}))), SchemaError);
}

TEST(Plateau, ReductionSequenceClampsAtFloor) {
  PlateauOptions opts;  // factor 0.2, floor 1e-6, patience 2
  PlateauState s;
  s.lr = 1e-4;
  std::vector<double> lrs = {s.lr};
  for (int epoch = 0; epoch < 12; ++epoch) {
    s = plateau_update(s, opts, 0.5);
    if (s.lr != lrs.back()) lrs.push_back(s.lr);
  }
  ASSERT_EQ(lrs.size(), 4u);
  EXPECT_DOUBLE_EQ(lrs[1], 2e-5);
  EXPECT_DOUBLE_EQ(lrs[2], 4e-6);
  EXPECT_DOUBLE_EQ(lrs[3], 1e-6);
  EXPECT_EQ(s.lr, 1e-6);
}

TEST(Plateau, ImprovingMetricKeepsRate) {
  PlateauState s;
  for (int e = 0; e < 10; ++e) s = plateau_update(s, {}, 0.1 * e);
  EXPECT_EQ(s.lr, 1e-4);
  EXPECT_EQ(s.wait, 0u);
}

TEST(Plateau, PatienceOneFlatThreeEpochsReducesTwice) {
  PlateauOptions opts;
  opts.patience = 1;
  PlateauState s;
  s.lr = 1.0;
  int reductions = 0;
  for (int e = 0; e < 3; ++e) {
    const double before = s.lr;
    s = plateau_update(s, opts, 0.7);
    reductions += s.lr < before ? 1 : 0;
  }
  EXPECT_EQ(reductions, 2);
}

TEST(Plateau, SubThresholdGainIsNotImprovement) {
  PlateauState s;
  s = plateau_update(s, {}, 0.5);
  s = plateau_update(s, {}, 0.50005);
  EXPECT_EQ(s.wait, 1u);
  EXPECT_EQ(*s.best, 0.5);
  // Pure: same input, same output.
  EXPECT_EQ(plateau_update(s, {}, 0.4), plateau_update(s, {}, 0.4));
}

TEST(EarlyStop, WalkThroughStopsAfterFiveStaleEpochs) {
  const std::vector<double> metrics = {0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6};
  EarlyStopState s;
  std::size_t stopped_at = 0;
  for (std::size_t e = 0; e < metrics.size(); ++e) {
    const auto step = early_stop_update(s, {}, metrics[e]);
    s = step.state;
    if (step.stop) {
      stopped_at = e + 1;
      break;
    }
  }
  EXPECT_EQ(stopped_at, 7u);
  EXPECT_EQ(s.best_epoch, 2u);
}

TEST(EarlyStop, PatienceOneAndStrictlyImproving) {
  EarlyStopState s;
  auto a = early_stop_update(s, {1, 1e-4}, 0.5);
  EXPECT_TRUE(a.improved);
  auto b = early_stop_update(a.state, {1, 1e-4}, 0.4);
  EXPECT_TRUE(b.stop);
  EXPECT_EQ(b.state.best_epoch, 1u);

  EarlyStopState r;
  for (int e = 0; e < 50; ++e) {
    const auto step = early_stop_update(r, {}, 0.01 * e);
    EXPECT_FALSE(step.stop);
    r = step.state;
  }
}

namespace {

ModelSpec toy() { return ModelSpec::preset("toy", Task::age8); }

std::vector<Batch<double>> random_batches(const ModelSpec& spec, std::size_t count, std::size_t size, Rng& rng) {
  std::vector<Batch<double>> out;
  for (std::size_t b = 0; b < count; ++b) {
    Batch<double> batch{TensorD(Shape{size, spec.patch.height, spec.patch.width, spec.patch.channels}), {}};
    for (auto& v : batch.images.data()) v = rng.normal();
    for (std::size_t i = 0; i < size; ++i) batch.labels.push_back(static_cast<int>(rng.below(8)));
    out.push_back(std::move(batch));
  }
  return out;
}

bool trainable_equal(const ModelSpec& spec, const Parameters<double>& a, const Parameters<double>& b) {
  for (const auto& ps : model::parameter_schema(spec))
    if (ps.trainable && !(a.at(ps.name) == b.at(ps.name))) return false;
  return true;
}

}  // namespace

TEST(TrainEpoch, ZeroLearningRateKeepsParametersAndLoss) {
  const auto spec = toy();
  Rng rng(1);
  auto params = model::init_parameters<double>(spec, rng);
  const auto initial = params;
  const auto batches = random_batches(spec, 2, 3, rng);
  RAdam<double> opt(RAdamOptions{0.0});
  const auto r1 = train_epoch(spec, params, batches, LossConfig{}, opt);
  const auto r2 = train_epoch(spec, params, batches, LossConfig{}, opt);
  EXPECT_TRUE(trainable_equal(spec, params, initial));
  EXPECT_EQ(r1.train_loss, r2.train_loss);
  EXPECT_GE(r1.seconds, 0.0);
  EXPECT_GE(r1.train_acc, 0.0);
  EXPECT_LE(r1.train_acc, 1.0);
  EXPECT_GT(r1.train_loss, 0.0);
}

TEST(TrainEpoch, SmallStepDecreasesUnsmoothedLoss) {
  const auto spec = toy();
  Rng rng(2);
  auto params = model::init_parameters<double>(spec, rng);
  const auto batches = random_batches(spec, 1, 1, rng);
  const LossConfig cfg{LossKind::categorical, 0.0};

  auto train_loss = [&](Parameters<double>& p) {
    TapeD tape;
    const auto bound = model::bind(tape, p);
    const Var probs = model::forward(tape, bound, spec, batches[0].images,
                                     model::ForwardOptions<double>{ad::Mode::train, nullptr, nullptr});
    return tape.value(loss(tape, probs, batches[0].labels, cfg)).item();
  };
  auto probe = params;
  const double before = train_loss(probe);
  RAdam<double> opt(RAdamOptions{1e-6});
  train_epoch(spec, params, batches, cfg, opt);
  EXPECT_LT(train_loss(params), before);
}

TEST(TrainEpoch, NonFiniteLossNamesBatchAndTensor) {
  const auto spec = toy();
  Rng rng(3);
  auto params = model::init_parameters<double>(spec, rng);
  params.at("head/bias")[0] = std::nan("");
  const auto batches = random_batches(spec, 1, 2, rng);
  RAdam<double> opt;
  try {
    train_epoch(spec, params, batches, LossConfig{}, opt);
    FAIL();
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("batch 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("head/bias"), std::string::npos) << msg;
  }
  EXPECT_THROW(train_epoch(spec, params, {}, LossConfig{}, opt), ContractError);
}

TEST(TrainEpoch, OverfitsEightSamples) {
  const auto spec = toy();
  Rng rng(4);
  auto params = model::init_parameters<float>(spec, rng);
  Batch<float> batch{TensorF(Shape{8, 32, 32, 3}), {0, 1, 2, 3, 4, 5, 6, 7}};
  for (auto& v : batch.images.data()) v = static_cast<float>(rng.normal());
  RAdam<float> opt(RAdamOptions{1e-3});
  double acc = 0;
  int epoch = 0;
  for (; epoch < 300 && acc < 0.99; ++epoch) acc = train_epoch(spec, params, {batch}, LossConfig{}, opt).train_acc;
  EXPECT_GE(acc, 0.99) << "after " << epoch << " epochs";
}

TEST(Fit, ConstantMonitorStopsEarlyAndRestoresBest) {
  const auto spec = toy();
  Rng rng(5);
  auto params = model::init_parameters<double>(spec, rng);
  const auto batches = random_batches(spec, 1, 2, rng);

  FitOptions<double> opts;
  opts.max_epochs = 50;
  opts.optimizer.lr = 1e-3;
  opts.monitor = [](const EpochRecord&) { return 0.3; };
  std::vector<Parameters<double>> after_epoch;
  std::size_t seen = 0;
  opts.on_epoch = [&](const EpochRecord& r) { EXPECT_EQ(r.epoch, ++seen); };

  const auto result = fit<double>(
      spec, params, [&](std::size_t) { return batches; }, batches, opts);
  EXPECT_TRUE(result.stopped_early);
  EXPECT_EQ(result.records.size(), 6u);
  EXPECT_EQ(result.best_epoch, 1u);

  // Re-run the first epoch by hand; the restored weights must match it bit for bit.
  Rng rng2(5);
  auto replay = model::init_parameters<double>(spec, rng2);
  RAdam<double> opt(opts.optimizer);
  train_epoch(spec, replay, batches, opts.loss, opt);
  EXPECT_TRUE(trainable_equal(spec, params, replay));
}

TEST(Checkpoint, RoundTripIsBitwise) {
  for (const char* preset : {"toy", "vitb32"}) {
    const auto spec = ModelSpec::preset(preset, Task::gender2);
    Rng rng(6);
    const auto params = model::init_parameters<float>(spec, rng);
    std::stringstream s;
    write_checkpoint(s, spec, params);
    const auto ck = read_checkpoint<float>(s, spec);
    EXPECT_EQ(ck.spec, spec);
    ASSERT_EQ(ck.params.size(), params.size());
    for (const auto& [name, t] : params) {
      const auto& u = ck.params.at(name);
      ASSERT_EQ(u.shape(), t.shape());
      EXPECT_EQ(std::memcmp(u.data().data(), t.data().data(), t.size() * sizeof(float)), 0) << name;
    }
  }
}

TEST(Checkpoint, RejectsCorruptionAndMismatch) {
  const auto spec = toy();
  Rng rng(7);
  const auto params = model::init_parameters<double>(spec, rng);
  std::stringstream s;
  write_checkpoint(s, spec, params);
  const std::string good = s.str();

  std::stringstream truncated(good.substr(0, good.size() / 2));
  EXPECT_THROW(read_checkpoint<double>(truncated), FormatError);
  std::string bad = good;
  bad[1] = 'X';
  std::stringstream bad_magic(bad);
  EXPECT_THROW(read_checkpoint<double>(bad_magic), FormatError);
  bad = good;
  bad[4] = 7;
  std::stringstream bad_version(bad);
  EXPECT_THROW(read_checkpoint<double>(bad_version), FormatError);
  std::stringstream wrong_dtype(good);
  EXPECT_THROW(read_checkpoint<float>(wrong_dtype), FormatError);
  std::stringstream other_spec(good);
  EXPECT_THROW(read_checkpoint<double>(other_spec, ModelSpec::preset("vitb32", Task::age8)), SchemaError);

  // A single flipped bit anywhere in the payload or trailer is caught.
  for (std::size_t pos = 6; pos < good.size(); pos += good.size() / 97) {
    bad = good;
    bad[pos] = static_cast<char>(bad[pos] ^ 0x10);
    std::stringstream flipped(bad);
    EXPECT_THROW(read_checkpoint<double>(flipped), FormatError) << "byte " << pos;
  }
  bad = good;
  bad.back() = static_cast<char>(bad.back() ^ 1);
  std::stringstream bad_trailer(bad);
  EXPECT_THROW(read_checkpoint<double>(bad_trailer), FormatError);
}

TEST(Checkpoint, FileSaveIsAtomicAndLoads) {
  const auto dir = std::filesystem::temp_directory_path() / "hts_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.htsc";
  const auto spec = toy();
  Rng rng(8);
  const auto params = model::init_parameters<float>(spec, rng);
  save_checkpoint(path, spec, params);
  EXPECT_FALSE(std::filesystem::exists(dir / "model.htsc.tmp"));
  const auto ck = load_checkpoint<float>(path, spec);
  EXPECT_EQ(ck.params.at("head/kernel"), params.at("head/kernel"));
  EXPECT_THROW(load_checkpoint<float>(dir / "missing.htsc"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(EpochCsv, HeaderAndRows) {
  EXPECT_EQ(kEpochCsvHeader, "epoch,train_loss,train_acc,val_loss,val_acc,seconds");
  EpochRecord r{3, 0.5, 0.75, 0.625, 0.5, 1.25, 1e-4};
  EXPECT_EQ(epoch_csv_row(r), "3,0.5,0.75,0.625,0.5,1.250000");
}
