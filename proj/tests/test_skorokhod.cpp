#include "hypograd/errors.hpp"
#include "hypograd/estimator.hpp"
#include "hypograd/rng.hpp"

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

// Position-dependent mass makes ∇Z^(1) path dependent, so the control anticipates.
ModelSpec anticipative(int dim) {
  return builtin_model_with_defaults("hamiltonian", {{"dim", dim}, {"mass1", 0.8}, {"c4", 0.1}, {"friction", 0.3}});
}

EstimatorConfig skorokhod_cfg(int n_steps, SkorokhodMode mode = SkorokhodMode::economical) {
  EstimatorConfig cfg;
  cfg.n_steps = n_steps;
  cfg.method = Method::bismut_skorokhod;
  cfg.skorokhod_mode = mode;
  cfg.master_seed = 17;
  return cfg;
}

}  // namespace

TEST(SkorokhodTrace, EconomicalMatchesFullTangent) {
  for (int dim : {1, 2}) {
    const ModelSpec s = anticipative(dim);
    const Vec x0 = dim == 1 ? vec({0.4, -0.2}) : vec({0.4, -0.3, -0.2, 0.5});
    const Vec v = dim == 1 ? vec({1.0, 0.5}) : vec({1.0, -0.5, 0.2, 0.7});
    const RunContext ctx = make_context(s, x0, v, TimeGrid(1.0, 16), skorokhod_cfg(16));
    for (long p = 0; p < 6; ++p) {
      const PathControl pc = path_control(ctx, path_noise(ctx, p));
      const double full = skorokhod_trace_full(ctx, pc);
      const auto eco = skorokhod_trace_economical(ctx, pc);
      ASSERT_TRUE(eco.has_value());
      EXPECT_NEAR(*eco, full, 1e-9 * std::max(1.0, std::abs(full))) << "dim " << dim << " path " << p;
      EXPECT_GT(std::abs(full), 1e-8);
    }
  }
}

TEST(SkorokhodTrace, SensitivityMatchesFiniteDifferences) {
  const ModelSpec s = anticipative(2);
  const RunContext ctx =
      make_context(s, vec({0.3, 0.1, -0.4, 0.2}), vec({0.5, 1.0, -0.3, 0.4}), TimeGrid(0.8, 12), skorokhod_cfg(12));
  const NoisePath base = path_noise(ctx, 3);
  const PathControl pc = path_control(ctx, base);
  const double eps = 1e-6;
  double fd_trace = 0.0;
  for (int i = 0; i < 12; ++i) {
    const BMat sens = hdot_sensitivity(ctx, pc, i);
    for (int c = 0; c < 2; ++c) {
      NoisePath up = base, dn = base;
      up.increments(i, c) += eps;
      dn.increments(i, c) -= eps;
      const BVec col =
          (path_control(ctx, up).control.h_dot[i] - path_control(ctx, dn).control.h_dot[i]) / (2.0 * eps);
      for (int r = 0; r < 2; ++r)
        EXPECT_NEAR(sens(r, c), col[r], 1e-6 * std::max(1.0, col.cwiseAbs().maxCoeff())) << i << "," << r << c;
      fd_trace += col[c];
    }
  }
  EXPECT_NEAR(skorokhod_trace_full(ctx, pc), fd_trace, 1e-5 * std::max(1.0, std::abs(fd_trace)));
}

TEST(SkorokhodDelta, AdaptedModelReducesToIto) {
  const ModelSpec s = builtin_model("kinetic_ou", {{"dim", 1}, {"K", 1.0}, {"Gamma", 1.0}, {"sigma", 1.0}});
  for (SkorokhodMode mode : {SkorokhodMode::economical, SkorokhodMode::full}) {
    const RunContext ctx = make_context(s, vec({1.0, 1.0}), vec({1.0, 0.0}), TimeGrid(1.0, 64), skorokhod_cfg(64, mode));
    for (long p = 0; p < 5; ++p) {
      const NoisePath noise = path_noise(ctx, p);
      const PathControl pc = path_control(ctx, noise);
      const SkorokhodResult r = skorokhod_delta(ctx, pc, noise);
      EXPECT_NEAR(r.delta, ito_delta(s, pc.control.h_dot, noise), 1e-8);
      EXPECT_NEAR(r.trace, 0.0, 1e-8);
    }
  }
}

TEST(SkorokhodDelta, SplitsIntoItoSumAndTrace) {
  const ModelSpec s = anticipative(1);
  const RunContext ctx = make_context(s, vec({0.2, 0.3}), vec({0.0, 1.0}), TimeGrid(0.5, 16), skorokhod_cfg(16));
  const NoisePath noise = path_noise(ctx, 9);
  const PathControl pc = path_control(ctx, noise);
  const SkorokhodResult r = skorokhod_delta(ctx, pc, noise);
  EXPECT_FALSE(r.fell_back);
  EXPECT_DOUBLE_EQ(r.ito_part, ito_sum(pc.control.h_dot, noise));
  EXPECT_NEAR(r.delta, r.ito_part - ctx.grid.dt() * r.trace, 1e-14 * (1.0 + std::abs(r.ito_part)));
}

TEST(SkorokhodDelta, ItoDeltaRefusesAnticipativeModel) {
  const ModelSpec s = anticipative(1);
  const RunContext ctx = make_context(s, vec({0.2, 0.3}), vec({0.0, 1.0}), TimeGrid(0.5, 8), skorokhod_cfg(8));
  const NoisePath noise = path_noise(ctx, 0);
  const PathControl pc = path_control(ctx, noise);
  EXPECT_THROW(ito_delta(s, pc.control.h_dot, noise), MethodMisuse);
}

TEST(SkorokhodDelta, SingleStepSquareMoments) {
  // ḣ₁ = ΔB₁ gives δ = ΔB₁² − Δt; E[δ] = 0, E[ΔB₁ δ] = 0, E[ΔB₁² δ] = 2Δt².
  const double dt = 0.25;
  NormalStream ns(5, 0, 0);
  std::vector<double> d0, d1, d2;
  const int n = 200000;
  for (int p = 0; p < n; ++p) {
    NoisePath noise;
    noise.increments = Eigen::MatrixXd::Constant(1, 1, std::sqrt(dt) * ns.next());
    const double b = noise.increments(0, 0);
    const double delta = ito_sum({BVec::Constant(1, 1, b)}, noise) - dt * 1.0;
    d0.push_back(delta);
    d1.push_back(b * delta);
    d2.push_back(b * b * delta);
  }
  const SampleStats s0 = sample_stats(d0), s1 = sample_stats(d1), s2 = sample_stats(d2);
  EXPECT_LE(std::abs(s0.mean), 4.0 * s0.std_error);
  EXPECT_LE(std::abs(s1.mean), 4.0 * s1.std_error);
  EXPECT_LE(std::abs(s2.mean - 2.0 * dt * dt), 4.0 * s2.std_error);
}

TEST(Duality, AnticipativeLinearAndQuadraticF) {
  const ModelSpec s = anticipative(1);
  EstimatorConfig cfg = skorokhod_cfg(8);
  cfg.n_paths = 40000;
  const Vec x0 = vec({0.3, -0.2}), v = vec({1.0, 0.5});
  const TimeGrid g(0.5, 8);
  for (const TestFunction& f :
       {linear_function(vec({1.0, -0.5})), quadratic_function(SMat::Identity(2, 2), vec({0.1, 0.0}))}) {
    const DualityResult r = duality_check(s, x0, v, f, g, cfg);
    EXPECT_EQ(r.rejected, 0);
    EXPECT_LT(r.z_score, 4.0) << f.tag;
    EXPECT_GT(std::abs(r.rhs.mean), 10.0 * r.rhs.std_error) << f.tag;
  }
}

TEST(TerminalNoiseGradient, MatchesFiniteDifferencesOfTerminalState) {
  const ModelSpec s = anticipative(1);
  const RunContext ctx = make_context(s, vec({0.3, -0.2}), vec({1.0, 0.0}), TimeGrid(0.5, 10), skorokhod_cfg(10));
  const NoisePath base = path_noise(ctx, 2);
  const Vec a = vec({0.7, -1.3});
  const StatePath path = simulate_path(s, ctx.x0, ctx.grid, base);
  const auto grad = terminal_noise_gradient(ctx, path, a);
  ASSERT_EQ(grad.size(), 10u);
  const double eps = 1e-6;
  for (int i = 0; i < 10; ++i) {
    NoisePath up = base, dn = base;
    up.increments(i, 0) += eps;
    dn.increments(i, 0) -= eps;
    const double fd =
        (a.dot(simulate_path(s, ctx.x0, ctx.grid, up).x.back()) - a.dot(simulate_path(s, ctx.x0, ctx.grid, dn).x.back())) /
        (2.0 * eps);
    EXPECT_NEAR(grad[static_cast<std::size_t>(i)][0], fd, 1e-7) << i;
  }
}
