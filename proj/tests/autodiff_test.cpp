#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "hts/autodiff.hpp"
#include "hts/gradcheck.hpp"
#include "hts/ops.hpp"

using namespace hts;
using TapeD = Tape<double>;

namespace {

TensorD random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  TensorD t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-scale, scale);
  return t;
}

using Builder = std::function<Var(TapeD&, const std::vector<Var>&)>;

// Checks every input of `build` against central differences of a random
// linear functional of its output. Returns the worst relative error.
double check_op(const Builder& build, const std::vector<TensorD>& inputs, std::uint64_t seed = 1) {
  Rng rng(seed);
  TensorD weights;
  {
    TapeD probe;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(probe.leaf(t));
    weights = random_tensor(probe.value(build(probe, vars)).shape(), rng);
  }
  double worst = 0.0;
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    TapeD tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    const Var loss = ad::weighted_sum(tape, build(tape, vars), weights);
    tape.backward(loss);
    const TensorD analytic = tape.grad(vars[which]);
    auto f = [&](const TensorD& theta) {
      TapeD t2;
      std::vector<Var> v2;
      for (std::size_t i = 0; i < inputs.size(); ++i) v2.push_back(t2.leaf(i == which ? theta : inputs[i]));
      return t2.value(ad::weighted_sum(t2, build(t2, v2), weights)).item();
    };
    worst = std::max(worst, finite_difference_check(f, inputs[which], analytic, 1e-5).max_relative_error);
  }
  return worst;
}

}  // namespace

TEST(Backward, ProductRule) {
  TapeD tape;
  const Var x = tape.leaf(TensorD::scalar(3.0));
  const Var y = tape.leaf(TensorD::scalar(5.0));
  tape.backward(ad::mul(tape, x, y));
  EXPECT_DOUBLE_EQ(tape.grad(x).item(), 5.0);
  EXPECT_DOUBLE_EQ(tape.grad(y).item(), 3.0);
}

TEST(Backward, UnusedNodeHasZeroGradient) {
  TapeD tape;
  const Var x = tape.leaf(TensorD::vector({1, 2}));
  const Var unused = tape.leaf(TensorD::vector({3, 4}));
  tape.backward(ad::sum(tape, x));
  EXPECT_FALSE(tape.has_grad(unused));
  EXPECT_EQ(tape.grad(unused), TensorD(Shape{2}));
}

TEST(Backward, SeedIsOneAndFanOutAccumulates) {
  TapeD tape;
  const Var x = tape.leaf(TensorD::vector({1.5, -2}));
  const Var twice = ad::add(tape, x, x);
  const Var loss = ad::sum(tape, twice);
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(tape.grad(loss).item(), 1.0);
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 2.0);
  EXPECT_DOUBLE_EQ(tape.grad(x)[1], 2.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  TapeD tape;
  const Var x = tape.leaf(TensorD::vector({1, 2}));
  EXPECT_THROW(tape.backward(x), ContractError);
}

TEST(Backward, ParameterGradientsMatchShapes) {
  Rng rng(2);
  TapeD tape;
  const Var x = tape.constant(random_tensor({4, 3}, rng));
  const Var w = tape.leaf(random_tensor({3, 5}, rng));
  const Var b = tape.leaf(random_tensor({5}, rng));
  tape.backward(ad::sum(tape, ad::tanh(tape, ad::linear(tape, x, w, b))));
  EXPECT_EQ(tape.grad(w).shape(), tape.value(w).shape());
  EXPECT_EQ(tape.grad(b).shape(), tape.value(b).shape());
  EXPECT_FALSE(tape.has_grad(x));
}

TEST(FiniteDifference, QuadraticAndConstant) {
  const TensorD theta = TensorD::vector({1, 2});
  auto sq = [](const TensorD& t) { return t[0] * t[0] + t[1] * t[1]; };
  const auto r = finite_difference_check(sq, theta, TensorD::vector({2, 4}), 1e-5);
  EXPECT_LE(r.max_relative_error, 1e-8);
  EXPECT_EQ(r.coordinates_checked, 2u);

  auto constant = [](const TensorD&) { return 3.0; };
  const auto c = finite_difference_check(constant, theta, TensorD(Shape{2}), 1e-5);
  EXPECT_EQ(c.max_relative_error, 0.0);

  EXPECT_THROW(finite_difference_check(sq, theta, theta, 0.0), ContractError);
}

TEST(FiniteDifference, DetectsWrongGradient) {
  auto sq = [](const TensorD& t) { return t[0] * t[0]; };
  const auto r = finite_difference_check(sq, TensorD::vector({1}), TensorD::vector({2.1}), 1e-5);
  EXPECT_GT(r.max_relative_error, 1e-2);
}

TEST(OpGradients, ElementwiseAndLinear) {
  Rng rng(3);
  const auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  EXPECT_LE(check_op([](TapeD& t, const std::vector<Var>& v) { return ad::add(t, v[0], v[1]); }, {a, b}), 1e-4);
  EXPECT_LE(check_op([](TapeD& t, const std::vector<Var>& v) { return ad::mul(t, v[0], v[1]); }, {a, b}), 1e-4);
  EXPECT_LE(check_op([](TapeD& t, const std::vector<Var>& v) { return ad::scale(t, v[0], -1.7); }, {a}), 1e-4);
  EXPECT_LE(check_op([](TapeD& t, const std::vector<Var>& v) { return ad::gelu(t, v[0]); }, {a}), 1e-4);
  EXPECT_LE(check_op([](TapeD& t, const std::vector<Var>& v) { return ad::sigmoid(t, v[0]); }, {a}), 1e-4);
  EXPECT_LE(check_op([](TapeD& t, const std::vector<Var>& v) { return ad::tanh(t, v[0]); }, {a}), 1e-4);
  EXPECT_LE(check_op([](TapeD& t, const std::vector<Var>& v) { return ad::softmax_rows(t, v[0]); }, {a}), 1e-4);

  const auto w = random_tensor({4, 2}, rng), bias = random_tensor({2}, rng);
  EXPECT_LE(check_op([](TapeD& t, const std::vector<Var>& v) { return ad::matmul(t, v[0], v[1]); }, {a, w}), 1e-4);
  EXPECT_LE(check_op([](TapeD& t, const std::vector<Var>& v) { return ad::linear(t, v[0], v[1], v[2]); },
                     {a, w, bias}),
            1e-4);
  const auto tile = random_tensor({1, 4}, rng);
  EXPECT_LE(check_op([](TapeD& t, const std::vector<Var>& v) { return ad::add_tiled(t, v[0], v[1]); }, {a, tile}),
            1e-4);
}

TEST(OpGradients, Normalization) {
  Rng rng(4);
  const auto x = random_tensor({6, 5}, rng, 2.0);
  const auto gamma = random_tensor({5}, rng), beta = random_tensor({5}, rng);
  EXPECT_LE(check_op(
                [](TapeD& t, const std::vector<Var>& v) { return ad::layer_norm(t, v[0], v[1], v[2], 1e-6); },
                {x, gamma, beta}),
            1e-4);
  EXPECT_LE(check_op(
                [](TapeD& t, const std::vector<Var>& v) {
                  return ad::batch_norm(t, v[0], v[1], v[2], ad::Mode::train, {}, 0.99, 1e-5);
                },
                {x, gamma, beta}),
            1e-4);
  TensorD mean(Shape{5}, 0.3), var(Shape{5}, 1.7);
  EXPECT_LE(check_op(
                [&](TapeD& t, const std::vector<Var>& v) {
                  return ad::batch_norm(t, v[0], v[1], v[2], ad::Mode::infer, {&mean, &var}, 0.99, 1e-5);
                },
                {x, gamma, beta}),
            1e-4);
}

TEST(OpGradients, Structural) {
  Rng rng(5);
  const auto a = random_tensor({4, 3}, rng), b = random_tensor({4, 2}, rng), c = random_tensor({2, 3}, rng);
  EXPECT_LE(check_op([](TapeD& t, const std::vector<Var>& v) { return ad::concat_cols(t, {v[0], v[1], v[0]}); },
                     {a, b}),
            1e-4);
  EXPECT_LE(check_op([](TapeD& t, const std::vector<Var>& v) { return ad::concat_rows(t, {v[0], v[1]}); }, {a, c}),
            1e-4);
  EXPECT_LE(check_op([](TapeD& t, const std::vector<Var>& v) { return ad::gather_rows(t, v[0], {3, 0, 3, 1}); },
                     {a}),
            1e-4);
  EXPECT_LE(check_op([](TapeD& t, const std::vector<Var>& v) { return ad::group_mean_rows(t, v[0], 2); }, {a}),
            1e-4);
}

TEST(OpGradients, AttentionAndLstm) {
  Rng rng(6);
  const std::size_t batch = 2, tokens = 3, width = 4;
  const auto q = random_tensor({batch * tokens, width}, rng), k = random_tensor({batch * tokens, width}, rng),
             v = random_tensor({batch * tokens, width}, rng);
  EXPECT_LE(check_op(
                [&](TapeD& t, const std::vector<Var>& in) {
                  return ad::multi_head_attention(t, in[0], in[1], in[2], batch, tokens, 2);
                },
                {q, k, v}),
            1e-4);

  const std::size_t features = 3, units = 2;
  const auto x = random_tensor({batch * tokens, features}, rng);
  const auto wx = random_tensor({features, 4 * units}, rng, 0.8);
  const auto wh = random_tensor({units, 4 * units}, rng, 0.8);
  const auto bias = random_tensor({4 * units}, rng);
  for (bool reverse : {false, true}) {
    EXPECT_LE(check_op(
                  [&](TapeD& t, const std::vector<Var>& in) {
                    return ad::lstm(t, in[0], in[1], in[2], in[3], batch, tokens, reverse);
                  },
                  {x, wx, wh, bias}),
              1e-4)
        << "reverse=" << reverse;
  }
}

TEST(OpGradients, RandomComposedGraphs) {
  // Random chains of the ops above; each draw must pass the oracle.
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    Rng rng(100 + seed);
    const auto x = random_tensor({4, 4}, rng);
    const auto w = random_tensor({4, 4}, rng);
    std::vector<int> plan(5);
    for (auto& p : plan) p = static_cast<int>(rng.below(6));
    const Builder build = [plan](TapeD& t, const std::vector<Var>& v) {
      Var h = v[0];
      for (int p : plan) {
        switch (p) {
          case 0: h = ad::matmul(t, h, v[1]); break;
          case 1: h = ad::tanh(t, h); break;
          case 2: h = ad::softmax_rows(t, h); break;
          case 3: h = ad::add(t, h, v[0]); break;
          case 4: h = ad::gelu(t, h); break;
          default: h = ad::mul(t, h, h); break;
        }
      }
      return h;
    };
    EXPECT_LE(check_op(build, {x, w}, seed), 1e-4) << "seed " << seed;
  }
}

TEST(BatchNorm, IdenticalSamplesGiveZero) {
  TapeD tape;
  TensorD x(Shape{4, 3});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) x.at(r, c) = 1.0 + c;
  const Var out = ad::batch_norm(tape, tape.leaf(x), tape.leaf(TensorD(Shape{3}, 1.0)),
                                 tape.leaf(TensorD(Shape{3}, 0.0)), ad::Mode::train, {}, 0.99, 1e-5);
  for (double v : tape.value(out).data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, NormalizesPerFeature) {
  Rng rng(8);
  TapeD tape;
  const auto x = random_tensor({8 * 5, 6}, rng, 3.0);
  const Var out = ad::batch_norm(tape, tape.leaf(x), tape.leaf(TensorD(Shape{6}, 1.0)),
                                 tape.leaf(TensorD(Shape{6}, 0.0)), ad::Mode::train, {}, 0.99, 1e-5);
  const auto mean = reduce(tape.value(out), {0}, Reduction::mean);
  const auto var = reduce(tape.value(out), {0}, Reduction::variance);
  for (std::size_t c = 0; c < 6; ++c) {
    EXPECT_LE(std::abs(mean[c]), 1e-6);
    EXPECT_NEAR(var[c], 1.0, 1e-4);
  }
}

TEST(BatchNorm, TwoSampleHandComputed) {
  // x = [1, 3]: mean 2, variance 1 -> (x - 2) / sqrt(1 + 1e-5), then 2x + 0.5.
  TapeD tape;
  TensorD mean_state, var_state;
  const Var out = ad::batch_norm(tape, tape.leaf(TensorD(Shape{2, 1}, std::vector<double>{1, 3})),
                                 tape.leaf(TensorD::vector({2.0})), tape.leaf(TensorD::vector({0.5})),
                                 ad::Mode::train, {&mean_state, &var_state}, 0.99, 1e-5);
  const double s = std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(tape.value(out)[0], 2.0 * (-1.0 / s) + 0.5, 1e-12);
  EXPECT_NEAR(tape.value(out)[1], 2.0 * (1.0 / s) + 0.5, 1e-12);
  // Moving statistics start at (0, 1) and move 1% toward the batch.
  EXPECT_NEAR(mean_state[0], 0.01 * 2.0, 1e-15);
  EXPECT_NEAR(var_state[0], 0.99 * 1.0 + 0.01 * 1.0, 1e-15);
}

TEST(BatchNorm, InferWithoutStatsIsStateError) {
  TapeD tape;
  TensorD mean, var;
  EXPECT_THROW(ad::batch_norm(tape, tape.leaf(TensorD(Shape{2, 1}, 1.0)), tape.leaf(TensorD::vector({1.0})),
                              tape.leaf(TensorD::vector({0.0})), ad::Mode::infer, {&mean, &var}, 0.99, 1e-5),
               StateError);
}

TEST(Lstm, ZeroWeightsStayAtZero) {
  Rng rng(1);
  TapeD tape;
  const Var out = ad::lstm(tape, tape.leaf(random_tensor({2 * 5, 3}, rng)), tape.leaf(TensorD(Shape{3, 8})),
                           tape.leaf(TensorD(Shape{2, 8})), tape.leaf(TensorD(Shape{8})), 2, 5, false);
  for (double v : tape.value(out).data()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, ScalarRecurrenceOracle) {
  // F = 1, U = 1, T = 2, gate weights hand-set.
  const double wx[4] = {0.5, -0.3, 0.8, 0.2};
  const double wh[4] = {0.1, 0.4, -0.6, 0.7};
  const double b[4] = {0.05, 1.0, -0.1, 0.0};
  const double xs[2] = {0.9, -1.2};
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  double h = 0, c = 0, expected[2];
  for (int t = 0; t < 2; ++t) {
    const double i = sig(wx[0] * xs[t] + wh[0] * h + b[0]);
    const double f = sig(wx[1] * xs[t] + wh[1] * h + b[1]);
    const double g = std::tanh(wx[2] * xs[t] + wh[2] * h + b[2]);
    const double o = sig(wx[3] * xs[t] + wh[3] * h + b[3]);
    c = f * c + i * g;
    h = o * std::tanh(c);
    expected[t] = h;
  }
  TapeD tape;
  const Var out = ad::lstm(tape, tape.leaf(TensorD(Shape{2, 1}, std::vector<double>{xs[0], xs[1]})),
                           tape.leaf(TensorD(Shape{1, 4}, std::vector<double>(wx, wx + 4))),
                           tape.leaf(TensorD(Shape{1, 4}, std::vector<double>(wh, wh + 4))),
                           tape.leaf(TensorD(Shape{4}, std::vector<double>(b, b + 4))), 1, 2, false);
  EXPECT_NEAR(tape.value(out)[0], expected[0], 1e-12);
  EXPECT_NEAR(tape.value(out)[1], expected[1], 1e-12);
}

TEST(Lstm, ReverseDirectionEqualsForwardOnReversedSequence) {
  Rng rng(12);
  const std::size_t steps = 6;
  const auto x = random_tensor({steps, 3}, rng);
  TensorD x_rev(x.shape());
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t f = 0; f < 3; ++f) x_rev.at(t, f) = x.at(steps - 1 - t, f);
  const auto wx = random_tensor({3, 8}, rng), wh = random_tensor({2, 8}, rng), b = random_tensor({8}, rng);
  TapeD tape;
  const Var backward = ad::lstm(tape, tape.leaf(x), tape.leaf(wx), tape.leaf(wh), tape.leaf(b), 1, steps, true);
  const Var forward = ad::lstm(tape, tape.leaf(x_rev), tape.leaf(wx), tape.leaf(wh), tape.leaf(b), 1, steps, false);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t u = 0; u < 2; ++u)
      EXPECT_NEAR(tape.value(backward).at(t, u), tape.value(forward).at(steps - 1 - t, u), 1e-14);
}

TEST(Attention, SingleTokenAndIdenticalTokens) {
  Rng rng(13);
  std::vector<TensorD> probs;
  TapeD tape;
  const auto v1 = random_tensor({1, 4}, rng);
  const Var out = ad::multi_head_attention(tape, tape.leaf(random_tensor({1, 4}, rng)),
                                           tape.leaf(random_tensor({1, 4}, rng)), tape.leaf(v1), 1, 1, 2, &probs);
  EXPECT_EQ(tape.value(out), v1);
  ASSERT_EQ(probs.size(), 2u);
  EXPECT_EQ(probs[0][0], 1.0);

  probs.clear();
  TensorD same(Shape{5, 4});
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 4; ++c) same.at(r, c) = 0.3 * c - 0.2;
  ad::multi_head_attention(tape, tape.leaf(random_tensor({5, 4}, rng)), tape.leaf(same),
                           tape.leaf(random_tensor({5, 4}, rng)), 1, 5, 2, &probs);
  for (const auto& a : probs)
    for (double v : a.data()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(FaultInjection, CorruptedRuleIsCaught) {
  Rng rng(14);
  const auto a = random_tensor({3, 3}, rng);
  set_backward_fault("tanh", 1.5);
  const double err = check_op([](TapeD& t, const std::vector<Var>& v) { return ad::tanh(t, v[0]); }, {a});
  set_backward_fault(std::nullopt);
  EXPECT_GT(err, 0.1);
}
