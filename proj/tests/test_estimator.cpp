#include "hypograd/errors.hpp"
#include "hypograd/estimator.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

using namespace hypograd;

namespace {

Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

ModelSpec kinetic_ou() {
  return builtin_model("kinetic_ou", {{"dim", 1}, {"K", 1.0}, {"Gamma", 1.0}, {"sigma", 1.0}});
}

// G = [[0, 1], [−1, −1]] has eigenvalues −1/2 ± iω with ω = √3/2, so
// e^{tG} = e^{−t/2}(cos ωt I + sin(ωt)/ω (G + I/2)).
Eigen::Matrix2d ou_flow(double t) {
  const double w = std::sqrt(3.0) / 2.0;
  Eigen::Matrix2d g;
  g << 0, 1, -1, -1;
  return std::exp(-t / 2) * (std::cos(w * t) * Eigen::Matrix2d::Identity() +
                             std::sin(w * t) / w * (g + 0.5 * Eigen::Matrix2d::Identity()));
}

// (I + ΔtG)^N, the Euler flow the discrete estimators differentiate.
Eigen::Matrix2d ou_euler_flow(double t, int n) {
  Eigen::Matrix2d p;
  p << 1, t / n, -t / n, 1 - t / n;
  Eigen::Matrix2d out = Eigen::Matrix2d::Identity();
  for (int i = 0; i < n; ++i) out = p * out;
  return out;
}

EstimatorConfig config(Method m, int paths, int steps) {
  EstimatorConfig cfg;
  cfg.method = m;
  cfg.n_paths = paths;
  cfg.n_steps = steps;
  cfg.master_seed = 2024;
  return cfg;
}

double combined_se(const GradientEstimate& a, const GradientEstimate& b) {
  return std::hypot(a.std_error, b.std_error);
}

}  // namespace

TEST(ClosedForm, KineticOuFlowEntries) {
  const Eigen::Matrix2d e = ou_flow(1.0);
  EXPECT_NEAR(e(0, 0), 0.6597, 5e-5);
  // e^{−1/2} sin(ω)/ω = 0.533507…; the four-digit figure 0.5334 is truncated.
  EXPECT_NEAR(e(0, 1), 0.53351, 5e-6);
  const ModelSpec s = kinetic_ou();
  const TestFunction fx = linear_function(vec({1, 0}));
  EXPECT_NEAR(closed_form_gradient(s, vec({1, 1}), vec({1, 0}), fx, 1.0), e(0, 0), 1e-12);
  EXPECT_NEAR(closed_form_gradient(s, vec({1, 1}), vec({0, 1}), fx, 1.0), e(0, 1), 1e-12);
}

TEST(ClosedForm, TinyHorizonIsDirectionalDerivative) {
  const ModelSpec s = kinetic_ou();
  const Vec x0 = vec({0.3, -0.8}), v = vec({0.6, 1.1});
  const TestFunction q = quadratic_function(SMat::Identity(2, 2), vec({0.2, 0.1}));
  const double direct = 2.0 * (x0 - vec({0.2, 0.1})).dot(v);
  EXPECT_NEAR(closed_form_gradient(s, x0, v, q, 1e-8), direct, 1e-6 * std::abs(direct));
}

TEST(ClosedForm, QuadraticNormSquared) {
  const ModelSpec s = kinetic_ou();
  const Vec x0 = vec({0.3, -0.8}), v = vec({0.6, 1.1});
  const Eigen::Matrix2d e = ou_flow(0.7);
  const double oracle = 2.0 * (e * x0).dot(e * v);
  EXPECT_NEAR(closed_form_gradient(s, x0, v, quadratic_function(SMat::Identity(2, 2), vec({0, 0})), 0.7), oracle,
              1e-8);
}

TEST(ClosedForm, GaussianLawCovariance) {
  // Var X_T for ẋ = y, ẏ = −x − y + Ḃ, from the Lyapunov equation at T → ∞: diag(1/2, 1/2).
  const GaussianLaw law = gaussian_law(kinetic_ou(), vec({0, 0}), 40.0);
  EXPECT_NEAR(law.cov(0, 0), 0.5, 1e-9);
  EXPECT_NEAR(law.cov(1, 1), 0.5, 1e-9);
  EXPECT_NEAR(law.cov(0, 1), 0.0, 1e-9);
}

TEST(ClosedForm, RejectsNonlinearInputs) {
  const ModelSpec ham = builtin_model_with_defaults("hamiltonian", {});
  EXPECT_THROW(closed_form_gradient(ham, vec({0, 0}), vec({1, 0}), linear_function(vec({1, 0})), 1.0), MethodMisuse);
  EXPECT_THROW(closed_form_gradient(kinetic_ou(), vec({0, 0}), vec({1, 0}), gaussian_bump(vec({0, 0}), 1.0), 1.0),
               MethodMisuse);
}

TEST(Bismut, KineticOuMatchesClosedForm) {
  const ModelSpec s = kinetic_ou();
  const TestFunction fx = linear_function(vec({1, 0}));
  const Eigen::Matrix2d e = ou_flow(1.0);
  const TimeGrid g(1.0, 512);
  for (int col : {0, 1}) {
    const Vec v = col == 0 ? vec({1, 0}) : vec({0, 1});
    const GradientEstimate est = bismut_gradient(s, vec({1, 1}), v, fx, g, config(Method::bismut_ito, 100000, 512));
    EXPECT_EQ(est.method, Method::bismut_ito);
    EXPECT_LE(est.std_error, 0.02);
    EXPECT_LE(std::abs(est.value - e(0, col)), 4.0 * est.std_error) << col;
    EXPECT_LE(std::abs(est.weight_mean), 4.0 * est.weight_se);
    EXPECT_LE(std::abs(est.value_cv - e(0, col)), 4.0 * est.std_error_cv + 1e-3) << col;
    EXPECT_LE(est.max_gN, tol_bridge(g, v));
  }
}

TEST(Bismut, ConstantFunctionHasZeroGradient) {
  const TestFunction one = linear_function(vec({0, 0}), 1.0);
  const GradientEstimate ou =
      bismut_gradient(kinetic_ou(), vec({1, 1}), vec({1, 0.5}), one, TimeGrid(1.0, 64), config(Method::bismut_auto, 20000, 64));
  EXPECT_LE(std::abs(ou.value), 4.0 * ou.std_error);
  const ModelSpec ham = builtin_model_with_defaults("hamiltonian", {{"mass1", 0.5}});
  const GradientEstimate hs = bismut_gradient(ham, vec({0.2, 0.1}), vec({1, 0}), one, TimeGrid(0.5, 32),
                                              config(Method::bismut_skorokhod, 5000, 32));
  EXPECT_LE(std::abs(hs.value), 4.0 * hs.std_error);
}

TEST(Bismut, DeterministicWeightHasGaussianVariance) {
  // On a linear model ḣ is deterministic, so Var δ(h) = Σ|ḣ_i|²Δt.
  const ModelSpec s = kinetic_ou();
  EstimatorConfig cfg = config(Method::bismut_ito, 100000, 64);
  const TimeGrid g(1.0, 64);
  const RunContext ctx = make_context(s, vec({1, 1}), vec({0.4, 1}), g, cfg);
  const PathControl pc = path_control(ctx, path_noise(ctx, 0));
  double var = 0.0;
  for (const BVec& h : pc.control.h_dot) var += h.squaredNorm() * g.dt();
  const GradientEstimate est = bismut_gradient(ctx, linear_function(vec({1, 0})));
  EXPECT_LE(std::abs(est.weight_mean), 4.0 * est.weight_se);
  // Sample second moment of a Gaussian: SE(δ²) = √2·var/√n.
  EXPECT_LE(std::abs(est.weight_l2 * est.weight_l2 - var), 4.0 * std::sqrt(2.0) * var / std::sqrt(1e5));
  EXPECT_NEAR(est.weight_kurtosis, 3.0, 0.1);
  EXPECT_FALSE(est.moment_flag);
}

TEST(Bismut, ItoOnAnticipativeModelIsMisuse) {
  const ModelSpec ham = builtin_model_with_defaults("hamiltonian", {{"mass1", 0.5}});
  EXPECT_THROW(bismut_gradient(ham, vec({0, 0}), vec({1, 0}), linear_function(vec({1, 0})), TimeGrid(1.0, 16),
                               config(Method::bismut_ito, 100, 16)),
               MethodMisuse);
}

TEST(Bismut, AntitheticPairsStayUnbiased) {
  EstimatorConfig cfg = config(Method::bismut_ito, 40000, 128);
  cfg.antithetic = true;
  const TestFunction bump = gaussian_bump(vec({0.5, 0}), 0.8, 1.0, 0.2);
  const ModelSpec s = kinetic_ou();
  const GradientEstimate anti = bismut_gradient(s, vec({0.2, 0.4}), vec({1, 0}), bump, TimeGrid(1.0, 128), cfg);
  const GradientEstimate path =
      pathwise_gradient(s, vec({0.2, 0.4}), vec({1, 0}), bump, TimeGrid(1.0, 128), config(Method::pathwise, 40000, 128));
  EXPECT_EQ(anti.n_effective, 40000);
  EXPECT_EQ(anti.rejected, 0);
  EXPECT_LE(std::abs(anti.value - path.value), 4.0 * combined_se(anti, path));
}

TEST(Pathwise, LinearModelLinearFIsExact) {
  const ModelSpec s = kinetic_ou();
  const GradientEstimate est = pathwise_gradient(s, vec({1, 1}), vec({0.3, 0.9}), linear_function(vec({2, -1})),
                                                 TimeGrid(1.0, 100), config(Method::pathwise, 200, 100));
  const double oracle = vec({2, -1}).dot(ou_euler_flow(1.0, 100) * vec({0.3, 0.9}));
  EXPECT_NEAR(est.value, oracle, 1e-12);
  EXPECT_LE(est.std_error, 1e-12);
}

TEST(Pathwise, ConstantFunctionIsExactlyZero) {
  const GradientEstimate est = pathwise_gradient(builtin_model_with_defaults("hamiltonian", {}), vec({0.3, 0.1}),
                                                 vec({1, 1}), linear_function(vec({0, 0}), 3.0), TimeGrid(0.5, 32),
                                                 config(Method::pathwise, 100, 32));
  EXPECT_EQ(est.value, 0.0);
  EXPECT_EQ(est.std_error, 0.0);
}

TEST(Pathwise, NeedsDifferentiableF) {
  EXPECT_THROW(pathwise_gradient(kinetic_ou(), vec({0, 0}), vec({1, 0}), indicator_function(0, 0.0, 2),
                                 TimeGrid(1.0, 8), config(Method::pathwise, 10, 8)),
               MethodMisuse);
}

TEST(FiniteDifference, LinearIsExactForAnyBump) {
  const ModelSpec s = kinetic_ou();
  const double oracle = vec({1, 0}).dot(ou_euler_flow(1.0, 64) * vec({1, 0}));
  for (double eta : {1e-1, 1e-3}) {
    EstimatorConfig cfg = config(Method::finite_difference, 100, 64);
    cfg.fd_bump = eta;
    const GradientEstimate est = fd_gradient(s, vec({1, 1}), vec({1, 0}), linear_function(vec({1, 0})), TimeGrid(1.0, 64), cfg);
    EXPECT_NEAR(est.value, oracle, 1e-9) << eta;
  }
  // The Euler flow converges to e^{TG} at rate Δt.
  EXPECT_LE(std::abs(oracle - ou_flow(1.0)(0, 0)), 10.0 / 64);
}

TEST(FiniteDifference, IndicatorVarianceBlowsUp) {
  const ModelSpec s = kinetic_ou();
  const TestFunction ind = indicator_function(0, 0.0, 2);
  EstimatorConfig fd = config(Method::finite_difference, 20000, 64);
  fd.fd_bump = 1e-4;
  const GradientEstimate f = fd_gradient(s, vec({0.1, 0.2}), vec({1, 0}), ind, TimeGrid(1.0, 64), fd);
  const GradientEstimate b = bismut_gradient(s, vec({0.1, 0.2}), vec({1, 0}), ind, TimeGrid(1.0, 64),
                                             config(Method::bismut_ito, 20000, 64));
  EXPECT_GT(f.std_error, 5.0 * b.std_error);
}

TEST(Equivalence, AdaptedEstimatorsAgree) {
  const ModelSpec s = kinetic_ou();
  const TestFunction bump = gaussian_bump(vec({0.5, 0}), 0.8, 1.0, 0.2);
  const Vec x0 = vec({0.2, 0.4}), v = vec({0.6, -0.8});
  const TimeGrid g(1.0, 128);
  const double allowance = 10.0 * 1.0 / 128;
  const GradientEstimate ito = bismut_gradient(s, x0, v, bump, g, config(Method::bismut_ito, 40000, 128));
  const GradientEstimate sk = bismut_gradient(s, x0, v, bump, g, config(Method::bismut_skorokhod, 40000, 128));
  const GradientEstimate pw = pathwise_gradient(s, x0, v, bump, g, config(Method::pathwise, 40000, 128));
  const GradientEstimate fd = fd_gradient(s, x0, v, bump, g, config(Method::finite_difference, 40000, 128));
  EXPECT_LE(std::abs(ito.value - pw.value), 4.0 * combined_se(ito, pw) + allowance);
  EXPECT_LE(std::abs(ito.value - fd.value), 4.0 * combined_se(ito, fd) + allowance);
  EXPECT_LE(std::abs(pw.value - fd.value), 4.0 * combined_se(pw, fd) + allowance);
  // Same noise, and the trace vanishes: the two divergences coincide.
  EXPECT_NEAR(ito.value, sk.value, 1e-8);
}

TEST(Equivalence, QuadraticAgainstClosedForm) {
  const ModelSpec s = kinetic_ou();
  const TestFunction q = quadratic_function(SMat::Identity(2, 2), vec({0.1, 0}));
  const Vec x0 = vec({0.5, -0.5}), v = vec({1, 1});
  const TimeGrid g(0.8, 256);
  const double exact = closed_form_gradient(s, x0, v, q, 0.8);
  const GradientEstimate ito = bismut_gradient(s, x0, v, q, g, config(Method::bismut_ito, 50000, 256));
  EXPECT_LE(std::abs(ito.value - exact), 4.0 * ito.std_error + 10.0 * 0.8 / 256);
  const GradientEstimate est = estimate_gradient(s, x0, v, q, g, config(Method::closed_form, 2, 256));
  EXPECT_EQ(est.value, exact);
  EXPECT_EQ(est.std_error, 0.0);
}

TEST(Reproducibility, SingleThreadBitwiseAndThreadedClose) {
  const ModelSpec ham = builtin_model_with_defaults("hamiltonian", {{"mass1", 0.4}});
  const TestFunction bump = gaussian_bump(vec({0.3, 0}), 1.0);
  EstimatorConfig cfg = config(Method::bismut_skorokhod, 3000, 32);
  const TimeGrid g(0.5, 32);
  const GradientEstimate a = bismut_gradient(ham, vec({0.1, 0.2}), vec({1, 0}), bump, g, cfg);
  const GradientEstimate b = bismut_gradient(ham, vec({0.1, 0.2}), vec({1, 0}), bump, g, cfg);
  EXPECT_EQ(std::memcmp(&a.value, &b.value, sizeof(double)), 0);
  EXPECT_EQ(std::memcmp(&a.std_error, &b.std_error, sizeof(double)), 0);
  EXPECT_EQ(std::memcmp(&a.weight_l2, &b.weight_l2, sizeof(double)), 0);
  cfg.threads = 4;
  const GradientEstimate c = bismut_gradient(ham, vec({0.1, 0.2}), vec({1, 0}), bump, g, cfg);
  EXPECT_LE(std::abs(c.value - a.value), 1e-12 * std::abs(a.value));
  EXPECT_LE(std::abs(c.std_error - a.std_error), 1e-12 * a.std_error);
  cfg.threads = 1;
  cfg.master_seed += 1;
  const GradientEstimate d = bismut_gradient(ham, vec({0.1, 0.2}), vec({1, 0}), bump, g, cfg);
  EXPECT_NE(d.value, a.value);
}

TEST(SampleStats, PairwiseMoments) {
  const SampleStats s = sample_stats({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_DOUBLE_EQ(s.variance, 5.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.std_error, std::sqrt(5.0 / 12.0));
  EXPECT_EQ(s.n, 4);
}

TEST(TestFunctions, GradientsMatchFiniteDifferences) {
  const Vec z = vec({0.3, -0.7, 1.1});
  SMat w(3, 3);
  w << 2, 0.5, 0, 0.5, 1, -0.2, 0, -0.2, 3;
  for (const TestFunction& f : {linear_function(vec({1, 2, 3}), 0.5), quadratic_function(w, vec({0.1, 0, -0.1})),
                                gaussian_bump(vec({0, 0.2, 1}), 0.7, 2.0, 0.1),
                                custom_function("sin(x1) * y1 + x2^2", 2, 1)}) {
    const Vec gr = f.grad(z);
    for (int k = 0; k < 3; ++k) {
      const Vec e = Vec::Unit(3, k) * 1e-6;
      EXPECT_NEAR(gr[k], (f(z + e) - f(z - e)) / 2e-6, 1e-7) << f.tag << " " << k;
    }
  }
  const TestFunction ind = indicator_function(1, 0.0, 3);
  EXPECT_FALSE(ind.differentiable());
  EXPECT_EQ(ind(z), 0.0);
  EXPECT_EQ(ind(vec({0, 0.1, 0})), 1.0);
}

TEST(TestFunctions, JsonIsStrict) {
  EXPECT_NO_THROW(test_function_from_json({{"tag", "linear"}, {"a", {1, 0}}}, 1, 1));
  EXPECT_THROW(test_function_from_json({{"tag", "linear"}, {"a", {1, 0}}, {"scale", 2}}, 1, 1), ConfigError);
  EXPECT_THROW(test_function_from_json({{"tag", "linear"}, {"a", {1, 0, 0}}}, 1, 1), ConfigError);
  EXPECT_THROW(test_function_from_json({{"tag", "cubic"}}, 1, 1), ConfigError);
  const TestFunction b = test_function_from_json({{"tag", "gaussian_bump"}, {"center", {0, 1}}, {"width", 0.5}}, 1, 1);
  EXPECT_DOUBLE_EQ(b(vec({0, 1})), 1.0);
}

TEST(Config, RejectsBadValues) {
  EstimatorConfig cfg;
  EXPECT_NO_THROW(cfg.check());
  cfg.n_paths = 1;
  EXPECT_THROW(cfg.check(), ConfigError);
  cfg = EstimatorConfig{};
  cfg.fd_bump = 0.0;
  EXPECT_THROW(cfg.check(), ConfigError);
  EXPECT_EQ(method_from_string(to_string(Method::bismut_skorokhod)), Method::bismut_skorokhod);
  EXPECT_EQ(method_from_string("bismut"), Method::bismut_auto);
  EXPECT_THROW(method_from_string("malliavin"), ConfigError);
}
