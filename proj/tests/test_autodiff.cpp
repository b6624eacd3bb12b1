#include <bit>
#include <cmath>
#include <numbers>
#include <tuple>

#include <gtest/gtest.h>

#include "cliplite/autodiff.hpp"
#include "cliplite/gradcheck.hpp"
#include "cliplite/gradcheck_suite.hpp"
#include "cliplite/rng.hpp"

using namespace cliplite;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  Rng rng(seed, "test/autodiff");
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

long double softplus_ld(long double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

TEST(Elementwise, SoftplusAtZeroIsLn2) {
  Tape tape;
  EXPECT_NEAR(softplus(tape.scalar(0.0)).item(), std::numbers::ln2, 1e-15);
}

TEST(Elementwise, Relu) {
  Tape tape;
  Var y = relu(tape.constant({2}, {-3.5, 2.0}));
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_EQ(y.value()[1], 2.0);
}

TEST(Elementwise, SoftplusLargeInputMatchesExtendedPrecision) {
  Tape tape;
  for (double x : {50.0, 200.0, 700.0, 1000.0, -50.0, -700.0, 1e-3}) {
    const double v = softplus(tape.scalar(x)).item();
    ASSERT_TRUE(std::isfinite(v)) << x;
    const long double ref = softplus_ld(x);
    EXPECT_NEAR(v, static_cast<double>(ref), 1e-15 * std::max(1.0L, std::fabs(ref))) << x;
  }
}

TEST(Elementwise, SoftplusOddPartIsIdentity) {
  Rng rng(1, "test/softplus");
  Tape tape(Tape::Mode::inference);
  for (int i = 0; i < 2000; ++i) {
    const double x = rng.uniform(-30.0, 30.0);
    const double d = softplus(tape.scalar(x)).item() - softplus(tape.scalar(-x)).item();
    ASSERT_NEAR(d, x, 1e-12) << x;
  }
}

TEST(Elementwise, ScalarBroadcastAndShapeMismatch) {
  Tape tape;
  Var a = tape.constant({2, 2}, {1, 2, 3, 4});
  Var s = tape.scalar(10.0);
  EXPECT_EQ((a + s).value(), (std::vector<double>{11, 12, 13, 14}));
  EXPECT_EQ((s - a).value(), (std::vector<double>{9, 8, 7, 6}));
  EXPECT_THROW(a + tape.constant({3}, {1, 2, 3}), ShapeError);
  Var one = tape.constant(Shape{1, 1}, {2.0});
  EXPECT_EQ((one * s).shape(), (Shape{1, 1}));
  EXPECT_EQ((s * one).shape(), (Shape{1, 1}));
}

TEST(Elementwise, LogOfNonPositiveThrows) {
  Tape tape;
  EXPECT_THROW(log(tape.constant({2}, {1.0, 0.0})), NumericError);
  EXPECT_THROW(log(tape.scalar(-1.0)), NumericError);
}

TEST(Elementwise, DispatcherMatchesNamedOps) {
  Tape tape;
  Var a = tape.constant({3}, {-1.0, 0.5, 2.0});
  Var b = tape.constant({3}, {2.0, 2.0, 3.0});
  EXPECT_EQ(elementwise(ElementwiseOp::mul, a, &b).value(), (a * b).value());
  EXPECT_EQ(elementwise(ElementwiseOp::scale, a, nullptr, 3.0).value(), scale(a, 3.0).value());
  EXPECT_THROW(elementwise(ElementwiseOp::add, a), std::invalid_argument);
}

TEST(Linear, IdentityAndHandAffine) {
  Tape tape;
  Var eye = tape.constant({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(linear(eye, eye, tape.constant({2}, {0, 0})).value(), (std::vector<double>{1, 0, 0, 1}));
  Var y = linear(tape.constant({1, 2}, {1, 2}), eye, tape.constant({2}, {3, 3}));
  EXPECT_EQ(y.value(), (std::vector<double>{4, 5}));
}

TEST(Linear, MatmulMatchesTripleLoop) {
  const Tensor a = random_tensor({4, 3}, 2), b = random_tensor({3, 2}, 3);
  Tape tape;
  const Var c = matmul(tape.constant(a), tape.constant(b));
  ASSERT_EQ(c.shape(), (Shape{4, 2}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += static_cast<long double>(a.data[i * 3 + k]) * b.data[k * 2 + j];
      EXPECT_NEAR(c.value()[i * 2 + j], static_cast<double>(s), 1e-15);
    }
}

TEST(Linear, MatmulNtMatchesTranspose) {
  const Tensor a = random_tensor({3, 4}, 4), b = random_tensor({5, 4}, 5);
  Tensor bt({4, 5});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) bt.data[j * 5 + i] = b.data[i * 4 + j];
  Tape tape;
  const auto x = matmul_nt(tape.constant(a), tape.constant(b)).value();
  const auto y = matmul(tape.constant(a), tape.constant(bt)).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], y[i], 1e-15);
}

TEST(Conv2d, HandConvolution) {
  Tape tape;
  Var x = tape.constant({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Var k = tape.constant({1, 1, 2, 2}, {1, 1, 1, 1});
  Var y = conv2d(x, k, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y.value(), (std::vector<double>{12, 16, 24, 28}));
}

TEST(Conv2d, OneByOneIdentityKernel) {
  const Tensor x = random_tensor({2, 3, 4, 4}, 6);
  Tensor k({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) k.data[c * 3 + c] = 1.0;
  Tape tape;
  EXPECT_EQ(conv2d(tape.constant(x), tape.constant(k), 1, 0).value(), x.data);
}

TEST(Conv2d, OutputShapeFormula) {
  Tape tape;
  Var y = conv2d(tape.constant(Tensor({1, 3, 16, 16})), tape.constant(Tensor({4, 3, 3, 3})), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 8, 8}));
}

TEST(Conv2d, MatchesDirectLoopsWithPadding) {
  const Tensor x = random_tensor({2, 2, 5, 5}, 7), k = random_tensor({3, 2, 3, 3}, 8);
  Tape tape;
  const Var y = conv2d(tape.constant(x), tape.constant(k), 2, 1);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 3, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c) {
          double s = 0.0;
          for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t dr = 0; dr < 3; ++dr)
              for (std::size_t dc = 0; dc < 3; ++dc) {
                const long rr = static_cast<long>(2 * r + dr) - 1, cc = static_cast<long>(2 * c + dc) - 1;
                if (rr < 0 || cc < 0 || rr >= 5 || cc >= 5) continue;
                s += x.data[((n * 2 + i) * 5 + rr) * 5 + cc] * k.data[((o * 2 + i) * 3 + dr) * 3 + dc];
              }
          EXPECT_NEAR(y.value()[((n * 3 + o) * 3 + r) * 3 + c], s, 1e-14);
        }
}

TEST(Reduce, MeanAndLogSumExp) {
  Tape tape;
  EXPECT_DOUBLE_EQ(mean(tape.constant({4}, {1, 2, 3, 4})).item(), 2.5);
  EXPECT_NEAR(log_sum_exp(tape.constant({2}, {0, 0})).item(), std::numbers::ln2, 1e-15);
  const double big = log_sum_exp(tape.constant({2}, {1000, 1000})).item();
  ASSERT_TRUE(std::isfinite(big));
  const long double ref = 1000.0L + std::log(2.0L);
  EXPECT_NEAR(big, static_cast<double>(ref), 1e-12);
}

TEST(Reduce, LogSumExpShiftInvariance) {
  Rng rng(3, "test/lse");
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor x = random_tensor({7}, 100 + trial, -20.0, 20.0);
    const double c = rng.uniform(-500.0, 500.0);
    Tensor xc = x;
    for (double& v : xc.data) v += c;
    Tape tape(Tape::Mode::inference);
    const double a = log_sum_exp(tape.constant(x)).item();
    const double b = log_sum_exp(tape.constant(xc)).item();
    ASSERT_NEAR(b, a + c, 1e-12 * std::max(1.0, std::abs(a + c)));
  }
}

TEST(Reduce, AxesDropReducedDims) {
  Tape tape;
  Var x = tape.constant({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(sum(x, {1}).value(), (std::vector<double>{6, 15}));
  EXPECT_EQ(sum(x, {0}).value(), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ(mean(x, {0}).shape(), (Shape{3}));
  Var g = global_avg_pool(tape.constant({1, 2, 2, 2}, {1, 2, 3, 4, 10, 10, 10, 10}));
  EXPECT_EQ(g.shape(), (Shape{1, 2}));
  EXPECT_EQ(g.value(), (std::vector<double>{2.5, 10}));
}

TEST(Gather, RowsFlatDiagonalRowdot) {
  Tape tape;
  Var x = tape.constant({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(gather_rows(x, {2, 0}).value(), (std::vector<double>{5, 6, 1, 2}));
  EXPECT_EQ(gather_flat(x, {5, 0}).value(), (std::vector<double>{6, 1}));
  EXPECT_EQ(rowdot(x, x).value(), (std::vector<double>{5, 25, 61}));
  EXPECT_EQ(diagonal(tape.constant({2, 2}, {1, 2, 3, 4})).value(), (std::vector<double>{1, 4}));
  EXPECT_THROW(gather_rows(x, {3}), ShapeError);
}

TEST(EmbedMean, PadsIgnored) {
  Tape tape;
  Var table = tape.constant({3, 2}, {0, 0, 1, 2, 3, 6});
  Var y = embed_mean(table, {{1, 2}, {1, 2, 0, 0}, {2}}, 0);
  EXPECT_EQ(y.value(), (std::vector<double>{2, 4, 2, 4, 3, 6}));
}

TEST(NormalizeRows, UnitNormAndZeroRowThrows) {
  Tape tape;
  Var y = normalize_rows(tape.constant({2, 2}, {3, 4, 0, 2}));
  const std::vector<double> want{0.6, 0.8, 0, 1};
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y.value()[i], want[i], 1e-15);
  EXPECT_THROW(normalize_rows(tape.constant({1, 2}, {0, 0})), NumericError);
}

TEST(Backward, SumOfSquares) {
  Tensor x({3}, std::vector<double>{1, 2, 3});
  Tape tape;
  Var v = tape.param(x, "x");
  tape.backward(sum(v * v));
  EXPECT_EQ(x.grad, (std::vector<double>{2, 4, 6}));
}

TEST(Backward, SoftplusOfProductAtZero) {
  Tensor w = Tensor::scalar(0.0);
  Tape tape;
  tape.backward(softplus(tape.param(w, "w") * tape.scalar(1.0)));
  EXPECT_DOUBLE_EQ(w.grad[0], 0.5);
}

TEST(Backward, GradientsAccumulateAcrossUses) {
  Tensor x = Tensor::scalar(3.0);
  Tape tape;
  Var v = tape.param(x, "x");
  tape.backward(v * v + v);  // 2x + 1
  EXPECT_DOUBLE_EQ(x.grad[0], 7.0);
}

TEST(Backward, EachNodeVisitedOnceAndRecordTopological) {
  Tensor x = Tensor::scalar(2.0);
  Tape tape;
  Var v = tape.param(x, "x");
  int calls = 0;
  Var shared = tape.record(OpKind::custom, "double", {v.id()}, {}, {2.0 * v.item()},
                           [&calls](Tape& t, const Tape::Entry& self) {
                             ++calls;
                             t.grad(self.inputs[0])[0] += 2.0 * self.grad[0];
                           });
  Var loss = shared * shared + shared;  // diamond: shared feeds three uses
  for (std::size_t id = 0; id < tape.size(); ++id)
    for (std::size_t in : tape.entry(id).inputs) EXPECT_LT(in, id);
  tape.backward(loss);
  EXPECT_EQ(calls, 1);
  EXPECT_DOUBLE_EQ(x.grad[0], 2.0 * (2.0 * 4.0 + 1.0));
}

TEST(Backward, TapeIsSingleUseAndLossMustBeScalar) {
  Tensor x({2}, std::vector<double>{1, 2});
  Tape tape;
  Var v = tape.param(x, "x");
  EXPECT_THROW(tape.backward(v), ShapeError);
  Tape t2;
  Var s = sum(t2.param(x, "x"));
  t2.backward(s);
  EXPECT_THROW(t2.backward(s), std::logic_error);
}

TEST(Backward, FrozenTapeLeavesParamsUntouchedButReturnsCaptures) {
  Tensor w({2}, std::vector<double>{1, -2});
  Tape tape(Tape::Mode::frozen);
  Var h = tape.param(static_cast<const Tensor&>(w), "w") * tape.constant({2}, {3, 4});
  const Var cap[] = {h};
  const auto g = tape.backward(sum(h * h), cap);
  EXPECT_TRUE(w.grad.empty());
  EXPECT_EQ(g.front().data, (std::vector<double>{6, -16}));
}

TEST(Backward, NonFiniteValuesRejected) {
  Tape tape;
  EXPECT_THROW(exp(tape.scalar(1000.0)), NumericError);
  Tensor bad = Tensor::scalar(std::nan(""));
  EXPECT_THROW(tape.param(bad, "bad"), NumericError);
}

TEST(Determinism, ForwardAndBackwardBitwise) {
  auto run = [] {
    Tensor w = random_tensor({4, 3}, 9), b = random_tensor({3}, 10);
    const Tensor x = random_tensor({5, 4}, 11);
    Tape tape;
    Var y = softplus(linear(tape.constant(x), tape.param(w, "w"), tape.param(b, "b")));
    const double loss = log_sum_exp(y).item();
    tape.backward(log_sum_exp(y));
    return std::make_tuple(loss, w.grad, b.grad);
  };
  const auto a = run(), b = run();
  EXPECT_EQ(std::bit_cast<std::uint64_t>(std::get<0>(a)), std::bit_cast<std::uint64_t>(std::get<0>(b)));
  EXPECT_EQ(std::get<1>(a), std::get<1>(b));
  EXPECT_EQ(std::get<2>(a), std::get<2>(b));
}

// ---------------------------------------------------------------------------
// Gradient checking

TEST(GradCheck, QuadraticBowlExact) {
  Tensor p = random_tensor({6}, 12);
  std::vector<NamedParam> params{{"p", &p, true}};
  auto report = check_gradients([&](Tape& t) { Var v = t.param(p, "p"); return scale(sum(v * v), 0.5); }, params);
  EXPECT_TRUE(report.pass());
  EXPECT_LT(report.max_rel_error(), 1e-8);
}

TEST(GradCheck, ConvReluPoolToyNet) {
  Tensor k = random_tensor({4, 2, 3, 3}, 13), b = random_tensor({4}, 14);
  const Tensor x = random_tensor({2, 2, 6, 6}, 15, -2.0, 2.0);
  std::vector<NamedParam> params{{"k", &k, true}, {"b", &b, true}};
  auto report = check_gradients(
      [&](Tape& t) {
        Var h = relu(channel_bias(conv2d(t.constant(x), t.param(k, "k"), 2, 1), t.param(b, "b")));
        return sum(global_avg_pool(h) * t.constant(random_tensor({2, 4}, 16)));
      },
      params);
  EXPECT_TRUE(report.pass());
  EXPECT_LT(report.max_rel_error(), 1e-4);
}

TEST(GradCheck, CorruptedBackwardIsFlagged) {
  Tensor a = random_tensor({3}, 17), b = random_tensor({3}, 18);
  std::vector<NamedParam> params{{"a", &a, true}, {"b", &b, true}};
  auto report = check_gradients(
      [&](Tape& t) {
        Var va = t.param(a, "a");
        Var vb = t.param(b, "b");
        // square of a with a backward rule off by a factor of 3
        std::vector<double> sq;
        for (double v : va.value()) sq.push_back(v * v);
        Var bad = t.record(OpKind::custom, "bad_square", {va.id()}, va.shape(), sq,
                           [](Tape& tt, const Tape::Entry& self) {
                             const auto& x = tt.entry(self.inputs[0]).value;
                             auto& g = tt.grad(self.inputs[0]);
                             for (std::size_t i = 0; i < x.size(); ++i) g[i] += 6.0 * x[i] * self.grad[i];
                           });
        return sum(bad + vb * vb);
      },
      params);
  EXPECT_FALSE(report.pass());
  EXPECT_EQ(report.failing(), (std::vector<std::string>{"a"}));
}

TEST(GradCheck, NonDeterministicForwardDetected) {
  Tensor a = random_tensor({2}, 19);
  std::vector<NamedParam> params{{"a", &a, true}};
  int calls = 0;
  EXPECT_THROW(check_gradients([&](Tape& t) { return sum(t.param(a, "a")) + t.scalar(++calls); }, params),
               NonDeterministicError);
}

TEST(GradCheck, RestoresValuesAndGrads) {
  Tensor a = random_tensor({3}, 20);
  a.grad = {1, 2, 3};
  const Tensor before = a;
  std::vector<NamedParam> params{{"a", &a, true}};
  check_gradients([&](Tape& t) { return sum(exp(t.param(a, "a"))); }, params);
  EXPECT_TRUE(bitwise_equal(a, before));
  EXPECT_EQ(a.grad, before.grad);
}

TEST(GradCheck, TwoLayerMlpTwelveParams) {
  Tensor w1 = random_tensor({2, 3}, 21), b1 = random_tensor({3}, 22), w2 = random_tensor({3, 1}, 23);
  const Tensor x = random_tensor({4, 2}, 24);
  std::vector<NamedParam> params{{"w1", &w1, true}, {"b1", &b1, true}, {"w2", &w2, true}};
  auto report = check_gradients(
      [&](Tape& t) {
        Var h = softplus(linear(t.constant(x), t.param(w1, "w1"), t.param(b1, "b1")));
        return sum(matmul(h, t.param(w2, "w2")));
      },
      params);
  EXPECT_TRUE(report.pass()) << report.max_rel_error();
}

// Property: random small networks mixing every primitive, inputs in [-2, 2].
TEST(GradCheckProperty, RandomNetworks) {
  Rng rng(31, "test/random_nets");
  for (int net = 0; net < 120; ++net) {
    const std::size_t n = 2 + rng.below(3), d = 1 + rng.below(4), h = 1 + rng.below(4);
    const std::uint64_t s = 1000 + static_cast<std::uint64_t>(net) * 10;
    Tensor w1 = random_tensor({d, h}, s, -2, 2), b1 = random_tensor({h}, s + 1, -2, 2);
    Tensor w2 = random_tensor({h, h}, s + 2, -2, 2), t = random_tensor({}, s + 3, 0.5, 2);
    const Tensor x = random_tensor({n, d}, s + 4, -2, 2);
    const int variant = static_cast<int>(rng.below(4));
    std::vector<NamedParam> params{{"w1", &w1, true}, {"b1", &b1, true}, {"w2", &w2, true}, {"t", &t, true}};
    auto forward = [&](Tape& tape) {
      Var z = linear(tape.constant(x), tape.param(w1, "w1"), tape.param(b1, "b1"));
      Var a = variant == 0 ? softplus(z) : variant == 1 ? exp(scale(z, 0.3)) : variant == 2 ? relu(z) : z * z;
      Var m = matmul(a, tape.param(w2, "w2")) * tape.param(t, "t");
      if (variant == 3) return log_sum_exp(matmul_nt(m, a), {1});
      return log(sum(softplus(m)) + tape.scalar(1.0)) - mean(rowdot(m, a));
    };
    auto scalarize = [&](Tape& tape) {
      Var v = forward(tape);
      return v.size() == 1 ? v : sum(v);
    };
    auto report = check_gradients(scalarize, params, 1e-5, 1e-4, "net" + std::to_string(net));
    ASSERT_TRUE(report.pass()) << "net " << net << " variant " << variant << " max rel "
                               << report.max_rel_error();
  }
}

TEST(GradCheckSuite, EveryPrimitivePasses) {
  for (const auto& c : primitive_gradcheck_cases()) {
    const auto r = c.run(1e-5, 1e-4);
    EXPECT_TRUE(r.pass()) << c.name << " max rel " << r.max_rel_error();
  }
}
