#include "hypograd/analysis.hpp"
#include "hypograd/errors.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace hypograd;

namespace {

Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

BMat shift(int m) {
  BMat a = BMat::Zero(m, m);
  for (int i = 0; i + 1 < m; ++i) a(i, i + 1) = 1.0;
  return a;
}

BMat last_unit(int m) {
  BMat b = BMat::Zero(m, 1);
  b(m - 1, 0) = 1.0;
  return b;
}

ModelSpec kinetic_ou() {
  return builtin_model("kinetic_ou", {{"dim", 1}, {"K", 1.0}, {"Gamma", 1.0}, {"sigma", 1.0}});
}

EstimatorConfig mc(int paths, int steps) {
  EstimatorConfig cfg;
  cfg.n_paths = paths;
  cfg.n_steps = steps;
  cfg.master_seed = 99;
  return cfg;
}

}  // namespace

TEST(Kalman, IntegratorChains) {
  for (int k = 0; k <= 3; ++k) {
    const KalmanResult r = kalman_index(shift(k + 1), last_unit(k + 1));
    ASSERT_TRUE(r.k.has_value());
    EXPECT_EQ(*r.k, k);
    EXPECT_EQ(r.ranks.back(), k + 1);
  }
  EXPECT_EQ(*kalman_index(BMat::Zero(2, 2), BMat::Identity(2, 2)).k, 0);
}

TEST(Kalman, UncontrollablePairHasNoIndex) {
  BMat a = BMat::Zero(2, 2);
  a(0, 0) = 1.0;
  EXPECT_FALSE(kalman_index(a, last_unit(2)).k.has_value());
  EXPECT_FALSE(kalman_index(BMat::Identity(3, 3), last_unit(3)).k.has_value());
}

TEST(Kalman, InvariantUnderChangeOfBasis) {
  BMat s(3, 3);
  s << 2, 1, 0, -1, 3, 0.5, 0.2, 0, 1;
  const BMat si = s.inverse();
  for (int k = 0; k <= 2; ++k) {
    BMat a = BMat::Zero(3, 3), b = BMat::Zero(3, 1);
    a.topLeftCorner(k + 1, k + 1) = shift(k + 1);
    a.bottomRightCorner(2 - k, 2 - k).setIdentity();
    b.topRows(k + 1) = last_unit(k + 1);
    // Pad the uncontrolled block with its own input so the pair stays controllable.
    BMat b2 = BMat::Zero(3, 3 - k);
    b2.col(0) = b.col(0);
    for (int j = 0; j < 2 - k; ++j) b2(k + 1 + j, 1 + j) = 1.0;
    const KalmanResult r0 = kalman_index(a, b2);
    const KalmanResult r1 = kalman_index(s * a * si, s * b2);
    ASSERT_TRUE(r0.k && r1.k);
    EXPECT_EQ(*r0.k, k);
    EXPECT_EQ(*r1.k, k);
  }
}

TEST(RateFit, ExactPowerLaw) {
  RateFit fit;
  for (double t : {0.01, 0.03, 0.1, 0.3, 1.0}) {
    fit.grid.push_back(t);
    fit.values.push_back(3.0 * std::pow(t, -1.5));
  }
  fit_log_log(fit);
  EXPECT_NEAR(fit.slope, -1.5, 1e-12);
  EXPECT_NEAR(fit.intercept, std::log(3.0), 1e-12);
  EXPECT_NEAR(fit.slope_ci, 0.0, 1e-9);
}

TEST(RateFit, ConfidenceIntervalUsesStudentT) {
  // Residuals ±r alternate: slope CI = t_{0.975, n−2} · SE(slope).
  RateFit fit;
  const std::vector<double> lx = {0.0, 1.0, 2.0, 3.0};
  const std::vector<double> res = {0.1, -0.1, -0.1, 0.1};
  for (std::size_t i = 0; i < lx.size(); ++i) {
    fit.grid.push_back(std::exp(lx[i]));
    fit.values.push_back(std::exp(2.0 * lx[i] + res[i]));
  }
  fit_log_log(fit);
  EXPECT_NEAR(fit.slope, 2.0, 1e-12);
  const double sxx = 5.0, s2 = 0.04 / 2.0;
  EXPECT_NEAR(fit.slope_ci, 4.302652729749464 * std::sqrt(s2 / sxx), 1e-9);
}

TEST(GramianScaling, ChainExponents) {
  const std::vector<double> ts = {1e-3, 3e-3, 1e-2, 3e-2, 1e-1};
  for (int k = 0; k <= 2; ++k) {
    const RateFit fit = gramian_scaling(shift(k + 1), last_unit(k + 1), ts);
    EXPECT_NEAR(fit.slope, 2.0 * k + 1.0, 0.05) << k;
    EXPECT_EQ(fit.theoretical, 2.0 * k + 1.0);
    EXPECT_TRUE(fit.pass);
  }
  EXPECT_THROW(gramian_scaling(BMat::Identity(2, 2), last_unit(2), ts), NotApplicable);
}

TEST(RateSweep, FullRankWeightGrowth) {
  const ModelSpec s = kinetic_ou();
  EstimatorConfig cfg = mc(4000, 64);
  cfg.method = Method::bismut_ito;
  const RateSweep sw = gradient_rate_sweep(s, vec({0.5, 0.5}), vec({0, 1}), gaussian_bump(vec({0, 0}), 1.0),
                                           {0.05, 0.1, 0.2, 0.4}, cfg);
  EXPECT_EQ(sw.kalman_k, 0);
  EXPECT_EQ(sw.fit.theoretical, -1.5);
  ASSERT_EQ(sw.estimates.size(), 4u);
  for (std::size_t i = 1; i < sw.estimates.size(); ++i)
    EXPECT_LT(sw.estimates[i].weight_l2, sw.estimates[i - 1].weight_l2);
  EXPECT_TRUE(sw.fit.pass) << sw.fit.slope;
}

TEST(Entropy, ReportIsConsistent) {
  const ModelSpec s = kinetic_ou();
  const TestFunction f = gaussian_bump(vec({0.3, 0}), 0.7, 1.0, 0.5);
  EstimatorConfig cfg = mc(20000, 64);
  const std::vector<double> lambdas = {0.25, 0.5, 1.0, 2.0, 4.0};
  const EntropyReport r = entropy_gradient_check(s, vec({0.2, -0.1}), vec({0, 1}), f, 0.5, lambdas, cfg);
  ASSERT_EQ(r.rows.size(), lambdas.size());
  const GaussianLaw law = gaussian_law(s, vec({0.2, -0.1}), 0.5);
  const double exact = 0.5 + gaussian_exp_quadratic(law.mean, law.cov, vec({0.3, 0}), 1.0 / (2 * 0.49));
  EXPECT_LE(std::abs(r.p_tf - exact), 4.0 * r.p_tf_se + 10.0 * 0.5 / 64);
  double best = 0.0;
  for (const auto& row : r.rows) {
    EXPECT_GE(row.entropy_term, 0.0);  // Jensen
    EXPECT_NEAR(row.gamma_hat, (row.lhs - row.lambda * row.entropy_term) / r.p_tf, 1e-14);
    best = std::max(best, row.lambda * row.gamma_hat);
  }
  EXPECT_DOUBLE_EQ(r.fitted_a, best);
  for (const auto& row : r.rows) EXPECT_LE(row.gamma_hat, r.fitted_a / row.lambda + 1e-15);
}

TEST(Entropy, NeedsPositiveF) {
  EXPECT_THROW(entropy_gradient_check(kinetic_ou(), vec({0, 0}), vec({1, 0}), linear_function(vec({1, 0})), 1.0,
                                      {1.0}, mc(100, 8)),
               MethodMisuse);
}

TEST(Harnack, BracketShape) {
  // l₁ = 0: |v|²/(p−1)·((T∧1)^{−(4k+2)} + (T∧1)^{−(4k+3)}).
  const Vec x = vec({0.1, 0.2}), v = vec({0.6, 0.8});
  EXPECT_NEAR(harnack_bracket(x, v, 2.0, 0.5, 1, 0.0, {}), (std::pow(0.5, -6) + std::pow(0.5, -7)), 1e-10);
  EXPECT_NEAR(harnack_bracket(x, v, 3.0, 4.0, 0, 0.0, {}), 0.5 * 2.0, 1e-14);
  EXPECT_EQ(harnack_bracket(x, Vec::Zero(2), 2.0, 0.5, 0, 0.0, {}), 0.0);
  // l₁ = 1/4, W ≡ 2, T = 1, k = 0: e₁ = 2, e₂ = 3, W̄ = 2.
  const double nv = 1.0, p = 2.0;
  const double want = nv * nv / (p - 1) * (0.25 * (p - 1) * 2.0 / (p - 1 + nv) + std::pow(1 + p * nv / (p - 1), 2.0) + 1.0);
  EXPECT_NEAR(harnack_bracket(x, v, p, 1.0, 0, 0.25, [](const Vec&) { return 2.0; }), want, 1e-12);
  EXPECT_THROW(harnack_bracket(x, v, 2.0, 1.0, 0, 0.5, {}), NotApplicable);
  EXPECT_THROW(harnack_bracket(x, v, 1.0, 1.0, 0, 0.0, {}), ConfigError);
}

TEST(Harnack, ConstantFunctionFitsZero) {
  HarnackSetup setup;
  setup.x = {vec({0, 0}), vec({0.5, -0.5})};
  setup.v = {vec({1, 0}), vec({0, 1})};
  setup.p_grid = {1.5, 2.0, 3.0};
  const HarnackReport r = harnack_check(kinetic_ou(), linear_function(vec({0, 0}), 2.0), setup, mc(200, 16));
  ASSERT_EQ(r.points.size(), 6u);
  ASSERT_EQ(r.held_out.size(), 6u);
  for (const auto& pt : r.points) EXPECT_NEAR(pt.log_ratio, 0.0, 1e-14);
  EXPECT_EQ(r.fitted_c, 0.0);
  EXPECT_GE(r.held_out_margin, 0.0);
}

TEST(Harnack, ZeroDirectionIsJensen) {
  HarnackSetup setup;
  setup.x = {vec({0.2, 0.1}), vec({-0.4, 0.6})};
  setup.v = {vec({0, 0}), vec({0, 0})};
  setup.p_grid = {1.5, 2.0, 4.0};
  const HarnackReport r = harnack_oracle(kinetic_ou(), gaussian_bump(vec({0, 0}), 0.6), setup);
  for (const auto& pt : r.points) {
    EXPECT_EQ(pt.bracket, 0.0);
    EXPECT_LT(pt.log_ratio, 0.0);
  }
  EXPECT_EQ(r.fitted_c, 0.0);
}

TEST(Harnack, MonteCarloMatchesGaussianOracle) {
  HarnackSetup setup;
  setup.x = {vec({0.2, 0.1})};
  setup.v = {vec({0.5, -0.5})};
  setup.p_grid = {1.5, 3.0};
  setup.t_final = 0.6;
  setup.kalman_k = 1;
  const TestFunction f = gaussian_bump(vec({0.1, 0}), 0.7);
  const HarnackReport exact = harnack_oracle(kinetic_ou(), f, setup);
  const HarnackReport est = harnack_check(kinetic_ou(), f, setup, mc(40000, 256));
  ASSERT_EQ(exact.points.size(), est.points.size());
  for (std::size_t i = 0; i < est.points.size(); ++i) {
    EXPECT_NEAR(est.points[i].bracket, exact.points[i].bracket, 1e-12);
    EXPECT_LE(std::abs(est.points[i].log_ratio - exact.points[i].log_ratio),
              4.0 * est.points[i].log_ratio_se + 10.0 * 0.6 / 256);
  }
}

TEST(GaussianExpQuadratic, ScalarClosedForm) {
  // E exp(−a(X−c)²), X ~ N(μ, s²): (1 + 2as²)^{−1/2} exp(−a(μ−c)²/(1 + 2as²)).
  const double mu = 0.4, s2 = 0.3, c = -0.2, a = 1.7;
  const double want = std::exp(-a * (mu - c) * (mu - c) / (1 + 2 * a * s2)) / std::sqrt(1 + 2 * a * s2);
  EXPECT_NEAR(gaussian_exp_quadratic(vec({mu}), SMat::Constant(1, 1, s2), vec({c}), a), want, 1e-15);
  // Independent coordinates factorize.
  SMat cov = SMat::Zero(2, 2);
  cov(0, 0) = s2;
  cov(1, 1) = 0.8;
  const double second = std::exp(-a * 0.25 / (1 + 2 * a * 0.8)) / std::sqrt(1 + 2 * a * 0.8);
  EXPECT_NEAR(gaussian_exp_quadratic(vec({mu, 0.5}), cov, vec({c, 0}), a), want * second, 1e-15);
}

TEST(SemigroupMoments, PowersShareThePaths) {
  const TestFunction f = gaussian_bump(vec({0, 0}), 1.0, 1.0, 0.1);
  const SemigroupEstimate e =
      semigroup_moments(kinetic_ou(), vec({0.3, 0.3}), f, {1.0, 2.0}, TimeGrid(1.0, 32), mc(5000, 32), 7);
  ASSERT_EQ(e.f_pow.size(), 2u);
  EXPECT_DOUBLE_EQ(e.f_pow[0].mean, e.f.mean);
  EXPECT_GE(e.f_pow[1].mean, e.f.mean * e.f.mean);
  EXPECT_EQ(e.rejected, 0);
}
