#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "cliplite/gradcheck_suite.hpp"
#include "cliplite/mi_bench.hpp"
#include "cliplite/mi_estimators.hpp"

using namespace cliplite;

namespace {

constexpr double kLn2 = std::numbers::ln2;

std::vector<double> random_scores(Rng& rng, std::size_t n, double scale) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-scale, scale);
  return v;
}

Tensor square(std::size_t n, double diag, double off) {
  Tensor t({n, n}, off);
  for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = diag;
  return t;
}

}  // namespace

TEST(Jsd, Examples) {
  EXPECT_NEAR(jsd_bound(std::vector<double>{0, 0}, std::vector<double>{0}).value, -2 * kLn2, 1e-15);
  const double want = -2.0 * std::log1p(std::exp(-1.0));
  EXPECT_NEAR(jsd_bound(std::vector<double>{1}, std::vector<double>{-1}).value, want, 1e-15);
  EXPECT_NEAR(want, -0.626523, 1e-6);
  EXPECT_NEAR(jsd_bound(std::vector<double>{40}, std::vector<double>{-40}).value, 0.0, 1e-15);
}

TEST(Jsd, EmptySetsRejected) {
  EXPECT_THROW(jsd_bound(std::vector<double>{}, std::vector<double>{1}), std::invalid_argument);
  EXPECT_THROW(jsd_bound(std::vector<double>{1}, std::vector<double>{}), std::invalid_argument);
}

TEST(InfoNce, Examples) {
  EXPECT_NEAR(infonce_bound(square(5, 0.3, 0.3)).value, 0.0, 1e-15);
  EXPECT_NEAR(infonce_bound(square(8, 40, -40)).value, std::log(8.0), 1e-12);
  const double want = kLn2 + std::log(std::numbers::e / (std::numbers::e + 1.0));
  EXPECT_NEAR(infonce_bound(square(2, 1, 0)).value, want, 1e-15);
  EXPECT_NEAR(want, 0.37988, 1e-5);
}

TEST(InfoNce, TemperatureScalesScores) {
  Rng rng(1, "test/temp");
  Tensor s({4, 4});
  for (double& v : s.data) v = rng.uniform(-2, 2);
  Tensor s2 = s;
  for (double& v : s2.data) v *= 2.0;
  EXPECT_NEAR(infonce_bound(s, 0.5).value, infonce_bound(s2, 1.0).value, 1e-14);
}

TEST(InfoNce, Errors) {
  EXPECT_THROW(infonce_bound(Tensor({2, 3})), ShapeError);
  EXPECT_THROW(infonce_bound(square(2, 1, 0), 0.0), std::invalid_argument);
  EXPECT_THROW(infonce_bound(square(2, 1, 0), -1.0), std::invalid_argument);
}

TEST(Dv, Examples) {
  EXPECT_NEAR(dv_bound(std::vector<double>{0.7, 0.7}, std::vector<double>{0.7, 0.7, 0.7}).value, 0.0, 1e-15);
  EXPECT_NEAR(dv_bound(std::vector<double>{1, 1}, std::vector<double>{0, 0}).value, 1.0, 1e-15);
  EXPECT_NEAR(dv_bound(std::vector<double>{40}, std::vector<double>{-40, -40}).value, 80.0, 1e-12);
  EXPECT_THROW(dv_bound(std::vector<double>{1}, std::vector<double>{}), std::invalid_argument);
}

TEST(BoundProperty, UpperLimitsHoldOnRandomScores) {
  Rng rng(2, "test/bounds");
  for (int t = 0; t < 500; ++t) {
    const double scale = rng.uniform(0.01, 60.0);
    const std::size_t n = 1 + rng.below(12), k = 1 + rng.below(30);
    const auto pos = random_scores(rng, n, scale), neg = random_scores(rng, k, scale);
    ASSERT_LE(jsd_bound(pos, neg).value, 1e-9);
    Tensor m(Shape{n, n});
    for (double& v : m.data) v = rng.uniform(-scale, scale);
    ASSERT_LE(infonce_bound(m, rng.uniform(0.05, 5.0)).value, std::log(static_cast<double>(n)) + 1e-9);
  }
}

TEST(BoundProperty, PermutationInvariance) {
  Rng rng(3, "test/perm");
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.below(10), k = 2 + rng.below(20);
    const auto pos = random_scores(rng, n, 5.0), neg = random_scores(rng, k, 5.0);
    std::vector<double> pp, nn;
    for (std::size_t i : rng.permutation(n)) pp.push_back(pos[i]);
    for (std::size_t i : rng.permutation(k)) nn.push_back(neg[i]);
    ASSERT_NEAR(jsd_bound(pos, neg).value, jsd_bound(pp, nn).value, 1e-12);
    ASSERT_NEAR(dv_bound(pos, neg).value, dv_bound(pp, nn).value, 1e-12);

    // relabelling samples permutes rows and columns together
    Tensor m(Shape{n, n}), mp(Shape{n, n});
    for (double& v : m.data) v = rng.uniform(-5, 5);
    const auto perm = rng.permutation(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) mp.data[i * n + j] = m.data[perm[i] * n + perm[j]];
    ASSERT_NEAR(infonce_bound(m).value, infonce_bound(mp).value, 1e-12);
  }
}

TEST(BoundProperty, JsdMonotoneInSeparation) {
  double prev = -std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 100; ++i) {
    const double m = 0.1 * i;
    const double v = jsd_bound(std::vector<double>{m}, std::vector<double>{-m}).value;
    ASSERT_GT(v, prev) << m;
    ASSERT_LE(v, 0.0);
    prev = v;
  }
  EXPECT_GT(prev, -1e-4);
}

TEST(BoundProperty, GradientsPassFiniteDifferences) {
  std::size_t checked = 0;
  for (const auto& c : primitive_gradcheck_cases()) {
    if (c.name.find("bound") == std::string::npos) continue;
    const auto r = c.run(1e-5, 1e-4);
    EXPECT_TRUE(r.pass()) << c.name << " " << r.max_rel_error();
    ++checked;
  }
  for (const auto& c : composite_gradcheck_cases()) {
    if (c.name.find("critic_bound") == std::string::npos) continue;
    const auto r = c.run(1e-5, 1e-4);
    EXPECT_TRUE(r.pass()) << c.name << " " << r.max_rel_error();
    ++checked;
  }
  EXPECT_GE(checked, 6u);
}

TEST(MiFromCritic, ScaleAndKindChecks) {
  CriticScores zeros{{0, 0, 0}, {0, 0}, {}, 1.0};
  const auto e = mi_from_trained_critic(BoundKind::jsd, zeros);
  EXPECT_NEAR(e.value, 0.0, 1e-15);
  EXPECT_EQ(e.unit, "jsd-scale");
  EXPECT_EQ(mi_from_trained_critic(BoundKind::dv, zeros).unit, "nats");
  EXPECT_THROW(mi_from_trained_critic(BoundKind::infonce, zeros), std::invalid_argument);
  CriticScores blocks{{}, {}, {square(4, 40, -40), square(4, 0, 0)}, 1.0};
  const auto b = mi_from_trained_critic(BoundKind::infonce, blocks);
  EXPECT_NEAR(b.value, 0.5 * std::log(4.0), 1e-12);
  EXPECT_THROW(mi_from_trained_critic(BoundKind::dv, blocks), std::invalid_argument);
}

TEST(MiFromCritic, ParseNames) {
  EXPECT_EQ(parse_bound_kind("infonce"), BoundKind::infonce);
  EXPECT_EQ(bound_name(BoundKind::dv), "dv");
  EXPECT_THROW(parse_bound_kind("nwj"), std::invalid_argument);
}

TEST(TrainedCritic, DvRecoversGaussianMi) {
  MiBenchConfig cfg;
  const auto cell = run_mi_cell(cfg, BoundKind::dv, 64, 0.5, 0);
  EXPECT_NEAR(cell.truth, -0.5 * std::log(1 - 0.25), 1e-15);
  EXPECT_NEAR(cell.estimate, 0.1438, 0.05);
  EXPECT_EQ(cell.unit, "nats");
}

TEST(TrainedCritic, IndependentVariablesGiveNearZero) {
  MiBenchConfig cfg;
  cfg.steps = 500;
  for (BoundKind k : {BoundKind::jsd, BoundKind::infonce, BoundKind::dv}) {
    const auto cell = run_mi_cell(cfg, k, 64, 0.0, 1);
    EXPECT_NEAR(cell.estimate, 0.0, 0.05) << bound_name(k);
  }
}
