#include <gtest/gtest.h>

#include <random>

#include "ccst/tensor.hpp"

namespace ccst::ad {
namespace {

using TD = Tensor<double>;

TD random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  TD t(std::move(shape));
  for (auto& v : t.data) v = u(rng);
  return t;
}

// Contracts the last axis against a fixed random vector and sums, so every
// output entry receives a distinct upstream gradient.
Var<double> probe(Var<double> y, std::uint64_t seed) {
  auto& tape = y.tape();
  auto r = tape.constant(random_tensor(Shape{y.value().cols(), 1}, seed));
  return sum(matmul(y, r));
}

GradCheckReport check(const LossBuilder& fn, std::vector<TD>& params) {
  std::vector<TD*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  return finite_diff_check(fn, std::span<TD* const>(ptrs), 1e-5, 1e-4);
}

TEST(Ops, MatmulIdentityAndAddZero) {
  Tape<double> tape;
  const auto a = random_tensor(Shape{3, 4}, 1);
  TD eye(Shape{4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.data[i * 4 + i] = 1.0;
  auto va = tape.constant(a);
  EXPECT_EQ(matmul(va, tape.constant(eye)).value(), a);
  EXPECT_EQ(add(va, tape.constant(TD(Shape{3, 4}))).value(), a);
}

TEST(Ops, ShapeMismatchNamesBothShapes) {
  Tape<double> tape;
  auto a = tape.constant(TD(Shape{3, 4}));
  auto b = tape.constant(TD(Shape{5, 2}));
  try {
    matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[3x4]"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("[5x2]"), std::string::npos) << e.what();
  }
  EXPECT_THROW(add(a, b), ShapeError);
}

TEST(Ops, ConcatThenSliceRecoversOperands) {
  Tape<double> tape;
  const auto a = random_tensor(Shape{2, 3}, 1);
  const auto b = random_tensor(Shape{2, 2, 3}, 2);
  auto cat = concat_tokens({tape.constant(a), tape.constant(b)});
  EXPECT_EQ(cat.shape(), (Shape{2, 3, 3}));
  EXPECT_EQ(slice_token(cat, 0).value(), a);
  EXPECT_EQ(slice_tokens(cat, 1, 3).value(), b);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 3; ++c)
        EXPECT_EQ(slice_token(cat, i + 1).value().data[r * 3 + c], b.data[(r * 2 + i) * 3 + c]);
}

TEST(Ops, ReluDefinition) {
  Tape<double> tape;
  auto x = tape.variable(TD(Shape{3}, {-1.0, 0.0, 2.0}));
  auto y = relu(x);
  EXPECT_EQ(y.value().data, (std::vector<double>{0.0, 0.0, 2.0}));
  tape.backward(sum(y));
  EXPECT_EQ(tape.gradient(x).data, (std::vector<double>{0.0, 0.0, 1.0}));
  auto pos = tape.constant(TD(Shape{2}, {0.5, 3.0}));
  // value() refers into tape storage that recording may reallocate
  const auto rp = relu(pos);
  EXPECT_EQ(rp.value(), pos.value());
}

TEST(Ops, SoftmaxExamples) {
  Tape<double> tape;
  auto uniform = softmax_rows(tape.constant(TD(Shape{1, 4}, 7.0)));
  for (double v : uniform.value().data) EXPECT_DOUBLE_EQ(v, 0.25);
  auto big = softmax_rows(tape.constant(TD(Shape{1, 2}, {5.0, 1005.0})));
  EXPECT_NEAR(big.value().data[0], 0.0, 1e-300);
  EXPECT_DOUBLE_EQ(big.value().data[1], 1.0);
  EXPECT_DOUBLE_EQ(softmax_rows(tape.constant(TD(Shape{3, 1}, -2.0))).value().data[2], 1.0);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Tape<float> tape;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-80.0f, 80.0f);
  Tensor<float> x(Shape{4, 50, 9});
  for (auto& v : x.data) v = u(rng);
  const auto y = softmax_rows(tape.constant(x)).value();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < y.cols(); ++c) {
      EXPECT_GE(y.data[r * y.cols() + c], 0.0f);
      s += y.data[r * y.cols() + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(BatchNorm, TrainModeNormalises) {
  Tape<double> tape;
  BatchNormStats<double> stats(5);
  const auto x = random_tensor(Shape{16, 5}, 9, -3.0, 7.0);
  auto y = batchnorm(tape.constant(x), tape.constant(TD(Shape{5}, 1.0)), tape.constant(TD(Shape{5}, 0.0)), stats,
                     Mode::train);
  for (std::size_t c = 0; c < 5; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t r = 0; r < 16; ++r) mean += y.value().data[r * 5 + c] / 16.0;
    for (std::size_t r = 0; r < 16; ++r) var += std::pow(y.value().data[r * 5 + c] - mean, 2) / 16.0;
    EXPECT_LT(std::abs(mean), 1e-5);
    EXPECT_LT(std::abs(var - 1.0), 1e-4);  // eps shrinks it by ~eps / var
  }
}

TEST(BatchNorm, RunningStatisticsUseMomentum) {
  Tape<double> tape;
  BatchNormStats<double> stats(1);
  const TD x(Shape{4, 1}, {1.0, 2.0, 3.0, 6.0});
  batchnorm(tape.constant(x), tape.constant(TD(Shape{1}, 1.0)), tape.constant(TD(Shape{1}, 0.0)), stats, Mode::train,
            {.eps = 1e-5, .momentum = 0.1});
  // mean 3, unbiased variance 14/3
  EXPECT_DOUBLE_EQ(stats.running_mean.data[0], 0.3);
  EXPECT_NEAR(stats.running_var.data[0], 0.9 + 0.1 * 14.0 / 3.0, 1e-12);
}

TEST(BatchNorm, InferWithUnitStatsIsIdentity) {
  Tape<double> tape;
  BatchNormStats<double> stats(3);
  const auto x = random_tensor(Shape{1, 3}, 4);
  auto y = batchnorm(tape.constant(x), tape.constant(TD(Shape{3}, 1.0)), tape.constant(TD(Shape{3}, 0.0)), stats,
                     Mode::infer, {.eps = 0.0});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(y.value().data[i], x.data[i]);
}

TEST(BatchNorm, ConstantFeatureGivesZeroAndBatchOfOneFails) {
  Tape<double> tape;
  BatchNormStats<double> stats(2);
  auto g = tape.constant(TD(Shape{2}, 1.0));
  auto b = tape.constant(TD(Shape{2}, 0.0));
  auto y = batchnorm(tape.constant(TD(Shape{8, 2}, 4.5)), g, b, stats, Mode::train);
  for (double v : y.value().data) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(batchnorm(tape.constant(TD(Shape{1, 2}, 1.0)), g, b, stats, Mode::train), ShapeError);
}

TEST(Backward, SquareAtThree) {
  Tape<double> tape;
  auto x = tape.variable(TD(Shape{1, 1}, 3.0));
  tape.backward(matmul(x, x));
  EXPECT_DOUBLE_EQ(tape.gradient(x).data[0], 6.0);
}

TEST(Backward, UnusedParameterHasZeroGradient) {
  Tape<double> tape;
  auto x = tape.variable(random_tensor(Shape{2, 3}, 1));
  auto unused = tape.variable(random_tensor(Shape{3}, 2));
  tape.backward(sum(x));
  for (double v : tape.gradient(unused).data) EXPECT_EQ(v, 0.0);
}

TEST(Backward, LinearityOverLosses) {
  const auto x0 = random_tensor(Shape{3, 4}, 5);
  auto grad_of = [&](int which) {
    Tape<double> tape;
    auto x = tape.variable(x0);
    auto l1 = probe(relu(x), 11);
    auto l2 = probe(softmax_rows(x), 12);
    tape.backward(which == 0 ? l1 : which == 1 ? l2 : add(l1, l2));
    return tape.gradient(x);
  };
  const auto g1 = grad_of(0), g2 = grad_of(1), g12 = grad_of(2);
  for (std::size_t i = 0; i < g12.numel(); ++i) EXPECT_NEAR(g12.data[i], g1.data[i] + g2.data[i], 1e-14);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape<double> tape;
  auto x = tape.variable(TD(Shape{2}, 1.0));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Backward, DeterministicAcrossRuns) {
  Tape<float> tape;
  std::mt19937_64 rng(8);
  std::normal_distribution<float> n;
  Tensor<float> a(Shape{32, 6, 16}), w(Shape{16, 16});
  for (auto& v : a.data) v = n(rng);
  for (auto& v : w.data) v = n(rng);
  auto x = tape.variable(a);
  auto q = matmul(x, tape.variable(w));
  auto att = softmax_rows(batched_matmul(q, x, true));
  auto out = sum(batched_matmul(att, x, false));
  tape.backward(out);
  const auto g1 = tape.gradient(x);
  tape.backward(out);
  EXPECT_EQ(g1, tape.gradient(x));
}

TEST(Numerics, NonFiniteValueRaises) {
  Tape<double> tape;
  auto x = tape.constant(TD(Shape{2}, {1.0, 2.0}));
  EXPECT_THROW(scale(x, std::numeric_limits<double>::infinity()), NumericError);
  EXPECT_THROW(scale(x, std::numeric_limits<double>::quiet_NaN()), NumericError);
}

TEST(GradCheck, RelativeErrorFormula) {
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-9 / kGradCheckFloor);
}

TEST(GradCheck, LinearFunctionIsExactToRounding) {
  std::vector<TD> params{random_tensor(Shape{3, 4}, 1)};
  const auto w = random_tensor(Shape{4, 1}, 2);
  const auto rep = check([&](Tape<double>& t, std::span<const Var<double>> p) { return sum(matmul(p[0], t.constant(w))); },
                         params);
  EXPECT_LT(rep.max_rel_error, 1e-9);
}

TEST(GradCheck, CorruptedGradientIsReported) {
  // An op whose backward is twice the truth: |2n - n| / (2n + n) = 1/3.
  const auto doubled = [](Var<double> x) {
    const std::size_t ix = x.id();
    return x.tape().record(
        x.value(), {ix},
        [ix](Tape<double>& tp, std::size_t self) {
          auto& g = tp.grad(ix);
          const auto& up = tp.grad(self);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * up[i];
        },
        "doubled");
  };
  std::vector<TD> params{random_tensor(Shape{2, 3}, 3, 0.5, 1.0)};
  const auto rep = check([&](Tape<double>&, std::span<const Var<double>> p) { return probe(doubled(p[0]), 4); }, params);
  EXPECT_NEAR(rep.max_rel_error, 1.0 / 3.0, 1e-6);
  EXPECT_FALSE(rep.passed());
}

// Every differentiable op against central differences.
class OpGradient : public ::testing::Test {
 protected:
  void expect_passes(const LossBuilder& fn, std::vector<TD> params) {
    const auto rep = check(fn, params);
    EXPECT_TRUE(rep.passed()) << "max relative error " << rep.max_rel_error;
  }
};

TEST_F(OpGradient, Matmul) {
  expect_passes([](Tape<double>&, auto p) { return probe(matmul(p[0], p[1]), 1); },
                {random_tensor(Shape{2, 3, 4}, 1), random_tensor(Shape{4, 5}, 2)});
}

TEST_F(OpGradient, BatchedMatmulBothLayouts) {
  expect_passes([](Tape<double>&, auto p) { return probe(batched_matmul(p[0], p[1], true), 1); },
                {random_tensor(Shape{2, 3, 4}, 1), random_tensor(Shape{2, 5, 4}, 2)});
  expect_passes([](Tape<double>&, auto p) { return probe(batched_matmul(p[0], p[1], false), 1); },
                {random_tensor(Shape{2, 3, 4}, 1), random_tensor(Shape{2, 4, 5}, 2)});
}

TEST_F(OpGradient, AddBiasScaleSum) {
  expect_passes([](Tape<double>&, auto p) { return probe(scale(add_bias(add(p[0], p[1]), p[2]), 1.7), 3); },
                {random_tensor(Shape{2, 3, 4}, 1), random_tensor(Shape{2, 3, 4}, 2), random_tensor(Shape{4}, 3)});
}

TEST_F(OpGradient, TokenConcatAndSlices) {
  expect_passes(
      [](Tape<double>&, auto p) {
        auto cat = concat_tokens({p[0], p[1]});
        return add(probe(slice_token(cat, 1), 5), probe(slice_tokens(cat, 0, 2), 6));
      },
      {random_tensor(Shape{2, 3}, 1), random_tensor(Shape{2, 3, 3}, 2)});
}

TEST_F(OpGradient, ConcatFeatures) {
  expect_passes(
      [](Tape<double>&, auto p) {
        std::vector<Var<double>> parts{p[0], p[1]};
        return probe(concat_features(std::span<const Var<double>>(parts)), 7);
      },
      {random_tensor(Shape{2, 3, 2}, 1), random_tensor(Shape{2, 3, 4}, 2)});
}

TEST_F(OpGradient, ReluAwayFromKink) {
  auto x = random_tensor(Shape{3, 5}, 1, 0.1, 1.0);
  for (std::size_t i = 0; i < x.numel(); i += 2) x.data[i] = -x.data[i];
  expect_passes([](Tape<double>&, auto p) { return probe(relu(p[0]), 2); }, {x});
}

TEST_F(OpGradient, Softmax) {
  expect_passes([](Tape<double>&, auto p) { return probe(softmax_rows(p[0]), 3); },
                {random_tensor(Shape{2, 3, 4}, 1, -3.0, 3.0)});
}

TEST_F(OpGradient, BatchNormTrainAndInfer) {
  for (const Mode mode : {Mode::train, Mode::infer}) {
    BatchNormStats<double> stats(4);
    stats.running_mean = random_tensor(Shape{4}, 10);
    stats.running_var = random_tensor(Shape{4}, 11, 0.5, 2.0);
    expect_passes(
        [&](Tape<double>&, auto p) {
          auto s = stats;
          // softmax downstream makes the upstream gradient non-constant per column
          return probe(softmax_rows(batchnorm(p[0], p[1], p[2], s, mode)), 4);
        },
        {random_tensor(Shape{6, 4}, 1, -2.0, 2.0), random_tensor(Shape{4}, 2, 0.5, 1.5), random_tensor(Shape{4}, 3)});
  }
}

}  // namespace
}  // namespace ccst::ad
