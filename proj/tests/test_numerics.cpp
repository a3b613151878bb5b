#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "maskgit/ops.hpp"

namespace maskgit {
namespace {

using testing::max_gradient_error;
using testing::random_tensor;

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor<double>({r, c}, std::move(v));
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  GradTape<double> tape(false);
  const Var a = tape.constant(mat(2, 2, {1, 0, 0, 1}));
  const Var b = tape.constant(mat(2, 2, {5, 6, 7, 8}));
  EXPECT_EQ(tape.value(matmul(tape, a, b)), mat(2, 2, {5, 6, 7, 8}));
}

TEST(Matmul, RowTimesColumn) {
  GradTape<double> tape(false);
  const Var a = tape.constant(mat(1, 2, {1, 2}));
  const Var b = tape.constant(mat(2, 1, {3, 4}));
  EXPECT_EQ(tape.value(matmul(tape, a, b)).item(), 11.0);
}

TEST(Matmul, MatchesNaiveTripleLoopExactly) {
  Rng rng(3);
  const auto a = random_tensor({3, 4}, rng);
  const auto b = random_tensor({4, 2}, rng);
  GradTape<double> tape(false);
  const auto& c = tape.value(matmul(tape, tape.constant(a), tape.constant(b)));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
      EXPECT_EQ(c(i, j), s);
    }
  }
}

TEST(Matmul, RejectsInnerExtentMismatch) {
  GradTape<double> tape(false);
  const Var a = tape.constant(Tensor<double>({2, 3}));
  const Var b = tape.constant(Tensor<double>({2, 3}));
  EXPECT_THROW(matmul(tape, a, b), ShapeError);
}

TEST(Softmax, UniformInputGivesUniformOutput) {
  GradTape<double> tape(false);
  const auto& y = tape.value(softmax(tape, tape.constant(Tensor<double>({3}, 0.0))));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  GradTape<double> tape(false);
  const auto& y = tape.value(softmax(tape, tape.constant(Tensor<double>({2}, {1000.0, 0.0}))));
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
}

TEST(Softmax, MatchesLongDoubleReference) {
  GradTape<double> tape(false);
  const auto& y = tape.value(softmax(tape, tape.constant(Tensor<double>({3}, {1.0, 2.0, 3.0}))));
  long double z = 0;
  for (int i = 1; i <= 3; ++i) z += std::exp(static_cast<long double>(i));
  for (int i = 1; i <= 3; ++i) {
    EXPECT_NEAR(y[static_cast<std::size_t>(i - 1)],
                static_cast<double>(std::exp(static_cast<long double>(i)) / z), 1e-15);
  }
}

TEST(Softmax, RowsSumToOneForExtremeInputs) {
  Rng rng(11);
  GradTape<float> tape(false);
  Tensor<float> x({50, 17});
  for (float& v : x.data()) v = static_cast<float>(1e4 * (2.0 * uniform01(rng) - 1.0));
  const auto& y = tape.value(softmax(tape, tape.constant(x), 1));
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double s = 0.0;
    for (float v : y.row(r)) {
      EXPECT_GE(v, 0.0f);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, ColumnAxisNormalisesColumns) {
  GradTape<double> tape(false);
  const auto& y = tape.value(softmax(tape, tape.constant(mat(2, 3, {1, 2, 3, 4, 5, 6})), 0));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(y(0, c) + y(1, c), 1.0, 1e-15);
  EXPECT_THROW(softmax(tape, tape.constant(mat(2, 2, {0, 0, 0, 0})), 2), ShapeError);
}

TEST(Backward, SumGivesOnes) {
  Rng rng(1);
  const auto p = random_tensor({3, 4}, rng);
  GradTape<double> tape;
  const Var v = tape.parameter(0, p);
  const auto grads = tape.backward(sum(tape, v));
  for (double g : grads[0].data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwiceInput) {
  Rng rng(2);
  const auto p = random_tensor({5}, rng);
  GradTape<double> tape;
  const Var v = tape.parameter(0, p);
  const auto grads = tape.backward(sum(tape, mul(tape, v, v)));
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(grads[0][i], 2.0 * p[i]);
}

TEST(Backward, SecondCallIsAnError) {
  const Tensor<double> p({2}, 1.0);
  GradTape<double> tape;
  const Var loss = sum(tape, tape.parameter(0, p));
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), TapeError);
}

TEST(Backward, NonScalarLossIsAnError) {
  const Tensor<double> p({2}, 1.0);
  GradTape<double> tape;
  const Var v = tape.parameter(0, p);
  EXPECT_THROW(tape.backward(scale(tape, v, 2.0)), TapeError);
}

TEST(Backward, NonRecordingTapeRefusesBackward) {
  const Tensor<double> p({2}, 1.0);
  GradTape<double> tape(false);
  EXPECT_THROW(tape.backward(sum(tape, tape.parameter(0, p))), TapeError);
}

TEST(Kernels, NonFiniteResultRaises) {
  GradTape<double> tape(false);
  const Var a = tape.constant(Tensor<double>({2}, 1e308));
  EXPECT_THROW(add(tape, a, a), NumericError);
}

TEST(Gradients, MatmulAndBias) {
  Rng rng(5);
  const auto fn = [](GradTape<double>& t, const std::vector<Var>& p) {
    return sum(t, mul(t, add_bias(t, matmul(t, p[0], p[1]), p[2]), p[3]));
  };
  EXPECT_LT(max_gradient_error(fn, {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng),
                                    random_tensor({5}, rng), random_tensor({3, 5}, rng)}),
            1e-6);
}

TEST(Gradients, LayernormGeluSoftmax) {
  Rng rng(6);
  const auto fn = [](GradTape<double>& t, const std::vector<Var>& p) {
    const Var h = layernorm(t, p[0], p[1], p[2]);
    const Var g = gelu(t, h);
    return sum(t, mul(t, softmax(t, g, 1), p[3]));
  };
  EXPECT_LT(max_gradient_error(fn, {random_tensor({4, 6}, rng, 2.0), random_tensor({6}, rng),
                                    random_tensor({6}, rng), random_tensor({4, 6}, rng)}),
            1e-6);
}

TEST(Gradients, ColumnSoftmax) {
  Rng rng(7);
  const auto fn = [](GradTape<double>& t, const std::vector<Var>& p) {
    return sum(t, mul(t, softmax(t, p[0], 0), p[1]));
  };
  EXPECT_LT(max_gradient_error(fn, {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}), 1e-6);
}

TEST(Gradients, AttentionAllInputs) {
  Rng rng(8);
  const auto fn = [](GradTape<double>& t, const std::vector<Var>& p) {
    return sum(t, mul(t, attention(t, p[0], p[1], p[2], 2, 3, 2), p[3]));
  };
  EXPECT_LT(max_gradient_error(fn, {random_tensor({6, 4}, rng), random_tensor({6, 4}, rng),
                                    random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)}),
            1e-6);
}

TEST(Gradients, GatherAndCrossEntropyWithSmoothing) {
  Rng rng(9);
  const std::vector<std::int32_t> ids = {2, 0, 2, 1};
  const std::vector<std::int32_t> targets = {1, 2, 0, 2};
  const std::vector<double> weights = {0.5, 0.0, 0.25, 0.25};
  const auto fn = [&](GradTape<double>& t, const std::vector<Var>& p) {
    const Var x = gather_rows<double>(t, p[0], ids);
    return weighted_cross_entropy<double>(t, matmul(t, x, p[1]), targets, weights, 0.1);
  };
  EXPECT_LT(max_gradient_error(fn, {random_tensor({3, 4}, rng), random_tensor({4, 3}, rng)}), 1e-6);
}

TEST(Gradients, DropoutUsesFixedMask) {
  Rng rng(10);
  const auto key = CounterRng::make(1, 2, 3);
  const auto fn = [&](GradTape<double>& t, const std::vector<Var>& p) {
    return sum(t, mul(t, dropout(t, p[0], 0.3, key), p[1]));
  };
  EXPECT_LT(max_gradient_error(fn, {random_tensor({4, 5}, rng), random_tensor({4, 5}, rng)}), 1e-6);
}

TEST(Dropout, KeyedMaskIsReproducibleAndHasExpectedRate) {
  GradTape<double> tape(false);
  const Var x = tape.constant(Tensor<double>({100, 100}, 1.0));
  const auto& a = tape.value(dropout(tape, x, 0.25, CounterRng::make(4, 1, 9)));
  const auto& b = tape.value(dropout(tape, x, 0.25, CounterRng::make(4, 1, 9)));
  const auto& c = tape.value(dropout(tape, x, 0.25, CounterRng::make(4, 1, 10)));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  const double dropped = static_cast<double>(std::count(a.data().begin(), a.data().end(), 0.0));
  EXPECT_NEAR(dropped / 1e4, 0.25, 0.02);
  EXPECT_EQ(dropout(tape, x, 0.0, CounterRng{}).id, x.id);
}

TEST(Kernels, DeterministicAcrossRuns) {
  Rng rng(12);
  const auto q = random_tensor({8, 4}, rng).cast<float>();
  auto run = [&] {
    GradTape<float> tape(false);
    const Var v = tape.constant(q);
    return tape.value(softmax(tape, attention(tape, v, v, v, 2, 4, 2), 1));
  };
  EXPECT_EQ(run(), run());
}

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor<double>({0, 2}), ShapeError);
}

}  // namespace
}  // namespace maskgit
