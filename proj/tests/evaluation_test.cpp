#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "hts/evaluation.hpp"

using namespace hts;
using namespace hts::eval;

namespace {

ConfusionMatrix random_matrix(Rng& rng, std::size_t k, std::size_t max_count = 20) {
  ConfusionMatrix cm(k);
  for (auto& c : cm.counts) c = rng.below(max_count);
  if (cm.total() == 0) cm.at(0, 0) = 1;
  return cm;
}

}  // namespace

TEST(Confusion, PerfectAndEmpty) {
  const auto cm = confusion({0, 1, 2, 2, 1}, {0, 1, 2, 2, 1}, 3);
  EXPECT_EQ(cm.at(0, 0), 1u);
  EXPECT_EQ(cm.at(1, 1), 2u);
  EXPECT_EQ(cm.at(2, 2), 2u);
  EXPECT_EQ(cm.trace(), cm.total());
  const auto empty = confusion({}, {}, 4);
  EXPECT_EQ(empty.total(), 0u);
  EXPECT_EQ(empty.counts.size(), 16u);
}

TEST(Confusion, MatchesCountingOracle) {
  Rng rng(1);
  std::vector<int> t(100), p(100);
  for (int i = 0; i < 100; ++i) {
    t[i] = static_cast<int>(rng.below(8));
    p[i] = static_cast<int>(rng.below(8));
  }
  const auto cm = confusion(t, p, 8);
  for (int a = 0; a < 8; ++a)
    for (int b = 0; b < 8; ++b) {
      std::size_t n = 0;
      for (int i = 0; i < 100; ++i) n += t[i] == a && p[i] == b;
      EXPECT_EQ(cm.at(a, b), n);
    }
  EXPECT_EQ(cm.total(), 100u);
}

TEST(Confusion, Errors) {
  EXPECT_THROW(confusion({0, 3}, {0, 1}, 3), ContractError);
  EXPECT_THROW(confusion({0, 1}, {0, -1}, 3), ContractError);
  EXPECT_THROW(confusion({0, 1}, {0}, 3), ContractError);
}

TEST(Accuracy, BinaryFormulaExample) {
  ConfusionMatrix cm(2);
  cm.at(1, 1) = 3;  // TP
  cm.at(0, 0) = 5;  // TN
  cm.at(0, 1) = 1;  // FP
  cm.at(1, 0) = 1;  // FN
  EXPECT_DOUBLE_EQ(accuracy(cm), 0.8);
  const auto c = class_counts(cm, 1);
  EXPECT_EQ(c.tp, 3u);
  EXPECT_EQ(c.tn, 5u);
  EXPECT_EQ(c.fp, 1u);
  EXPECT_EQ(c.fn, 1u);
  EXPECT_DOUBLE_EQ(binary_accuracy(c), 0.8);
}

TEST(Accuracy, DiagonalEmptyAndRandom) {
  ConfusionMatrix diag(4);
  for (std::size_t i = 0; i < 4; ++i) diag.at(i, i) = i + 1;
  EXPECT_EQ(accuracy(diag), 1.0);
  EXPECT_THROW(accuracy(ConfusionMatrix(3)), DomainError);
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto cm = random_matrix(rng, 2 + rng.below(7));
    double tr = 0, tot = 0;
    for (std::size_t i = 0; i < cm.classes; ++i)
      for (std::size_t j = 0; j < cm.classes; ++j) {
        tot += cm.at(i, j);
        if (i == j) tr += cm.at(i, j);
      }
    EXPECT_DOUBLE_EQ(accuracy(cm), tr / tot);
    EXPECT_GE(accuracy(cm), 0.0);
    EXPECT_LE(accuracy(cm), 1.0);
  }
}

TEST(Accuracy, BinaryFormulaAndMicroAveragesAgreeWithTrace) {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const auto cm2 = random_matrix(rng, 2);
    EXPECT_NEAR(binary_accuracy(class_counts(cm2, 1)), accuracy(cm2), 1e-15);
    EXPECT_NEAR(binary_accuracy(class_counts(cm2, 0)), accuracy(cm2), 1e-15);

    const auto cm = random_matrix(rng, 2 + rng.below(7));
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t k = 0; k < cm.classes; ++k) {
      const auto c = class_counts(cm, k);
      EXPECT_EQ(c.tp + c.tn + c.fp + c.fn, cm.total());
      tp += c.tp;
      fp += c.fp;
      fn += c.fn;
    }
    EXPECT_NEAR(static_cast<double>(tp) / static_cast<double>(tp + fp), accuracy(cm), 1e-15);
    EXPECT_NEAR(static_cast<double>(tp) / static_cast<double>(tp + fn), accuracy(cm), 1e-15);
  }
}

TEST(F1, PerfectAndDegenerate) {
  const auto perfect = f1_scores(confusion({0, 1, 2, 1}, {0, 1, 2, 1}, 3));
  for (double f : perfect) EXPECT_EQ(f, 1.0);
  // Class 2 is neither present nor predicted.
  const auto f = f1_scores(confusion({0, 1, 0}, {0, 1, 1}, 3));
  EXPECT_EQ(f[2], 0.0);
  EXPECT_THROW(f1_scores(ConfusionMatrix(1)), ContractError);
}

TEST(F1, HandBuiltThreeClassMatrix) {
  ConfusionMatrix cm(3);
  // rows = truth
  const std::size_t v[3][3] = {{5, 2, 1}, {0, 7, 3}, {4, 1, 6}};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) cm.at(i, j) = v[i][j];
  const auto f = f1_scores(cm);
  // Class 0: P = 5/9, R = 5/8. Class 1: P = 7/10, R = 7/10. Class 2: P = 6/10, R = 6/11.
  const double expect[3] = {2 * (5.0 / 9) * (5.0 / 8) / (5.0 / 9 + 5.0 / 8), 0.7,
                            2 * 0.6 * (6.0 / 11) / (0.6 + 6.0 / 11)};
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(f[k], expect[k], 1e-15);
}

TEST(F1, HarmonicMeanOfPrecisionAndRecall) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto cm = random_matrix(rng, 2 + rng.below(6));
    const auto f = f1_scores(cm);
    for (std::size_t k = 0; k < cm.classes; ++k) {
      const auto c = class_counts(cm, k);
      if (c.tp == 0) continue;
      const double p = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
      const double r = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
      EXPECT_NEAR(f[k], 2.0 / (1.0 / p + 1.0 / r), 1e-12);
    }
  }
}

TEST(AdjacentAccuracy, BandExamplesAndOracle) {
  ConfusionMatrix diag(5);
  for (std::size_t i = 0; i < 5; ++i) diag.at(i, i) = 3;
  EXPECT_EQ(adjacent_accuracy(diag), 1.0);
  ConfusionMatrix off(5);
  for (std::size_t i = 0; i + 1 < 5; ++i) off.at(i, i + 1) = off.at(i + 1, i) = 2;
  EXPECT_EQ(adjacent_accuracy(off), 1.0);
  EXPECT_EQ(accuracy(off), 0.0);

  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto cm = random_matrix(rng, 2 + rng.below(7));
    double band = 0, tot = 0;
    for (std::size_t i = 0; i < cm.classes; ++i)
      for (std::size_t j = 0; j < cm.classes; ++j) {
        tot += cm.at(i, j);
        if (std::abs(static_cast<long>(i) - static_cast<long>(j)) <= 1) band += cm.at(i, j);
      }
    ASSERT_DOUBLE_EQ(adjacent_accuracy(cm), band / tot);
    ASSERT_GE(adjacent_accuracy(cm), accuracy(cm));
  }
}

TEST(ConfusionCsv, Grid) {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 4;
  cm.at(0, 1) = 1;
  cm.at(1, 1) = 7;
  std::stringstream s;
  write_confusion_csv(s, cm);
  EXPECT_EQ(s.str(), "4,1\n0,7\n");
}

TEST(KFold, HundredIntoFive) {
  const auto plan = kfold_plan(100, 5, 0.2, 42);
  ASSERT_EQ(plan.folds.size(), 5u);
  std::set<std::size_t> all;
  for (const auto& f : plan.folds) {
    EXPECT_EQ(f.test.size(), 20u);
    EXPECT_EQ(f.validation.size(), 16u);
    EXPECT_EQ(f.train.size(), 64u);
    for (auto id : f.test) EXPECT_TRUE(all.insert(id).second) << "test folds overlap at " << id;
  }
  EXPECT_EQ(all.size(), 100u);
  EXPECT_EQ(*all.rbegin(), 99u);
  EXPECT_EQ(kfold_plan(100, 5, 0.2, 42), plan);
  EXPECT_NE(kfold_plan(100, 5, 0.2, 43), plan);
  EXPECT_THROW(kfold_plan(4, 5), ConfigError);
}

TEST(KFold, PartitionPropertiesExhaustive) {
  for (std::size_t n = 5; n <= 500; ++n) {
    const auto plan = kfold_plan(n, 5, 0.2, n);
    std::vector<int> seen(n, 0);
    std::size_t lo = n, hi = 0;
    for (const auto& f : plan.folds) {
      lo = std::min(lo, f.test.size());
      hi = std::max(hi, f.test.size());
      for (auto id : f.test) ++seen[id];
      const std::size_t pool = n - f.test.size();
      ASSERT_EQ(f.validation.size(), static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(pool))));
      std::vector<int> owner(n, 0);
      for (auto id : f.train) owner[id] |= 1;
      for (auto id : f.validation) owner[id] |= 2;
      for (auto id : f.test) owner[id] |= 4;
      for (std::size_t id = 0; id < n; ++id) {
        ASSERT_TRUE(owner[id] == 1 || owner[id] == 2 || owner[id] == 4) << "n=" << n << " id=" << id;
      }
    }
    ASSERT_LE(hi - lo, 1u);
    for (int s : seen) ASSERT_EQ(s, 1);
  }
}

TEST(Aggregate, Examples) {
  EXPECT_EQ(aggregate({0.8, 0.8, 0.8, 0.8, 0.8}), (Aggregate{0.8, 0.0}));
  EXPECT_EQ(aggregate({0.0, 1.0}), (Aggregate{0.5, 0.5}));
  EXPECT_THROW(aggregate({}), ContractError);
  Rng rng(6);
  std::vector<double> v(37);
  for (auto& x : v) x = rng.normal(3, 2);
  long double mean = 0, sq = 0;
  for (double x : v) mean += x;
  mean /= v.size();
  for (double x : v) sq += (x - mean) * (x - mean);
  const auto a = aggregate(v);
  EXPECT_NEAR(a.mean, static_cast<double>(mean), 1e-13);
  EXPECT_NEAR(a.std, static_cast<double>(std::sqrt(sq / v.size())), 1e-13);
}

TEST(CrossVal, ConstantPredictorScoresMajorityFrequency) {
  std::vector<int> labels(53);
  Rng rng(7);
  for (auto& l : labels) l = rng.bernoulli(0.7) ? 2 : static_cast<int>(rng.below(4));
  const auto plan = kfold_plan(labels.size(), 5, 0.2, 1);
  const auto result = crossval(plan, [&](std::size_t, const Fold& f) {
    std::vector<int> t, p;
    for (auto id : f.test) {
      t.push_back(labels[id]);
      p.push_back(2);
    }
    FoldRecord r;
    r.test_confusion = confusion(t, p, 4);
    r.test_acc = accuracy(r.test_confusion);
    return r;
  });
  ASSERT_EQ(result.folds.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(result.folds[k].fold, k);
    double majority = 0;
    for (auto id : plan.folds[k].test) majority += labels[id] == 2;
    EXPECT_DOUBLE_EQ(result.folds[k].test_acc, majority / plan.folds[k].test.size());
  }
}

TEST(CrossVal, IdenticalFoldsHaveZeroSpread) {
  const auto plan = kfold_plan(10, 5, 0.2, 0);
  const auto result = crossval(plan, [](std::size_t, const Fold&) {
    FoldRecord r;
    r.train_loss = 0.3;
    r.test_acc = 0.9;
    r.epoch_seconds = 1.5;
    return r;
  });
  EXPECT_EQ(result.aggregate.folds, 5u);
  EXPECT_EQ(result.aggregate.test_acc.std, 0.0);
  EXPECT_EQ(result.aggregate.train_loss.std, 0.0);
  EXPECT_DOUBLE_EQ(result.aggregate.epoch_seconds.mean, 1.5);
}

TEST(CrossVal, FailureNamesTheFold) {
  const auto plan = kfold_plan(10, 5, 0.2, 0);
  std::size_t calls = 0;
  try {
    crossval(plan, [&](std::size_t fold, const Fold&) {
      ++calls;
      if (fold == 2) throw NumericError("loss is nan");
      return FoldRecord{};
    });
    FAIL();
  } catch (const FoldError& e) {
    EXPECT_EQ(e.fold(), 2u);
    EXPECT_NE(std::string(e.what()).find("fold 2: loss is nan"), std::string::npos);
  }
  EXPECT_EQ(calls, 3u);
}

TEST(CrossVal, ToyRunIsReproducible) {
  const auto spec = model::ModelSpec::preset("toy", model::Task::age8);
  const auto synth = data::synthesize_dataset({24, 8, 32, 3});
  CrossValConfig cfg;
  cfg.k = 2;
  cfg.seed = 9;
  cfg.batch_size = 8;
  cfg.max_epochs = 2;
  cfg.optimizer.lr = 1e-3;
  std::size_t epochs_seen = 0;
  cfg.on_epoch = [&](std::size_t, const train::EpochRecord&) { ++epochs_seen; };
  const auto a = crossval_run<double>(spec, synth.dataset, cfg);
  const auto b = crossval_run<double>(spec, synth.dataset, cfg);
  EXPECT_EQ(epochs_seen, 8u);
  ASSERT_EQ(a.folds.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(a.folds[k].train_loss, b.folds[k].train_loss);
    EXPECT_EQ(a.folds[k].val_acc, b.folds[k].val_acc);
    EXPECT_EQ(a.folds[k].test_loss, b.folds[k].test_loss);
    EXPECT_EQ(a.folds[k].test_confusion, b.folds[k].test_confusion);
    EXPECT_EQ(a.folds[k].test_confusion.total(), 12u);
    EXPECT_EQ(a.folds[k].epochs, 2u);
  }
  EXPECT_EQ(a.aggregate.test_acc, b.aggregate.test_acc);

  cfg.augment = data::AugmentConfig{};
  const auto c = crossval_run<double>(spec, synth.dataset, cfg);
  const auto d = crossval_run<double>(spec, synth.dataset, cfg);
  EXPECT_EQ(c.aggregate.train_loss, d.aggregate.train_loss);
  EXPECT_NE(c.aggregate.train_loss, a.aggregate.train_loss);
}

TEST(CrossVal, GenderFoldsUseTwoByTwoMatrices) {
  const auto spec = model::ModelSpec::preset("toy", model::Task::gender2);
  data::SynthOptions o;
  o.n = 16;
  o.classes = 2;
  o.task = model::Task::gender2;
  const auto synth = data::synthesize_dataset(o);
  CrossValConfig cfg;
  cfg.k = 2;
  cfg.max_epochs = 1;
  cfg.loss = train::LossConfig::for_task(model::Task::gender2);
  const auto r = crossval_run<float>(spec, synth.dataset, cfg);
  for (const auto& f : r.folds) {
    EXPECT_EQ(f.test_confusion.classes, 2u);
    EXPECT_EQ(f.test_confusion.total(), 8u);
    EXPECT_DOUBLE_EQ(accuracy(f.test_confusion), f.test_acc);
  }
  EXPECT_EQ(task_classes(model::Task::age8), 8u);
  EXPECT_EQ(task_classes(model::Task::gender2), 2u);
}

TEST(ResultsCsv, ColumnsAndCells) {
  const auto cols = results_columns(model::Task::age8);
  ASSERT_EQ(cols.size(), 8u);
  EXPECT_EQ(cols[1], "Training loss mean (Std)");
  EXPECT_EQ(cols[6], "Test accuracy mean (Std)");
  EXPECT_EQ(cols[7], "Epoch Time Mean in Sec (Std)");
  RunAggregate a;
  a.test_acc = {0.5, 0.25};
  std::stringstream s;
  write_results_csv(s, model::Task::gender2, {{"toy", a}});
  std::string header, row;
  std::getline(s, header);
  std::getline(s, row);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 7);
  EXPECT_EQ(header.substr(0, header.find(',')), "Gender classification models");
  EXPECT_EQ(row, "toy,0.000000 (0.000000),0.000000 (0.000000),0.000000 (0.000000),0.000000 (0.000000),"
                 "0.000000 (0.000000),0.500000 (0.250000),0.000000 (0.000000)");

  std::stringstream f;
  FoldRecord r;
  r.fold = 1;
  r.test_acc = 0.75;
  r.epochs = 3;
  r.best_epoch = 2;
  write_folds_csv(f, {r});
  EXPECT_EQ(f.str(), std::string(kFoldCsvHeader) + "\n1,0,0,0,0,0,0.75,0,3,2\n");
}
