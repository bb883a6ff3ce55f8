#pragma once

#include "hypograd/estimator.hpp"
#include "hypograd/linalg.hpp"

#include <optional>
#include <string>
#include <vector>

namespace hypograd {

struct KalmanResult {
  std::optional<int> k;
  std::vector<int> ranks;                // rank[B₀, …, A^j B₀], j = 0..m−1
  std::vector<double> singular_values;   // smallest retained singular value per j
};

/// Minimal k with Rank[B₀, AB₀, …, A^k B₀] = m; SVD rank with cutoff
/// m·‖block‖·eps·64.
KalmanResult kalman_index(const BMat& a, const BMat& b0);

struct RateFit {
  std::vector<double> grid;
  std::vector<double> values;
  std::vector<double> std_errors;  // per point, when known
  std::vector<bool> used;          // false where the point was excluded from the fit
  double slope = 0.0;
  double intercept = 0.0;
  double slope_ci = 0.0;  // 95% half-width (Student t)
  double theoretical = 0.0;
  bool pass = true;
};

/// Least-squares line through (log x, log y) over the used points.
void fit_log_log(RateFit& fit);

/// U_t = ∫₀ᵗ e^{sA}B₀B₀*e^{sA*} ds by refined quadrature; slope of log λ_min(U_t).
RateFit gramian_scaling(const BMat& a, const BMat& b0, const std::vector<double>& t_grid);

/// weight_l2 against T with one-sided comparison to the theoretical exponent
/// (−3/2 for Rank B₀ = m, −((4k−1)∨0 + 3/2) otherwise).
struct RateSweep {
  RateFit fit;
  std::vector<GradientEstimate> estimates;
  int kalman_k = -1;
};
RateSweep gradient_rate_sweep(const ModelSpec& spec, const Vec& x0, const Vec& v, const TestFunction& f,
                              const std::vector<double>& t_grid, const EstimatorConfig& cfg);

struct EntropyRow {
  double lambda = 0.0;
  double lhs = 0.0;            // |∇_v P_T f|
  double entropy_term = 0.0;   // P_T(f log f) − P_T f log P_T f
  double gamma_hat = 0.0;      // (lhs − λ·entropy)/P_T f
  double gamma_se = 0.0;
};
struct EntropyReport {
  std::vector<EntropyRow> rows;
  double p_tf = 0.0, p_tf_se = 0.0;
  double entropy_se = 0.0;
  GradientEstimate gradient;
  double fitted_a = 0.0;  // smallest a with γ̂(λ) ≤ a/λ on the grid
};
EntropyReport entropy_gradient_check(const ModelSpec& spec, const Vec& x0, const Vec& v, const TestFunction& f,
                                     double t_final, const std::vector<double>& lambda_grid,
                                     const EstimatorConfig& cfg);

/// Exponent shape |v|²/(p−1)·(l₁(p−1)W̄/(p−1+|v|) + (1 + p|v|/(p−1))^{4l₁/(1−2l₁)}/(T∧1)^{(4k+2−2l₁)/(1−2l₁)}
/// + 1/(T∧1)^{4k+3}) with W̄ = ∫₀¹ W(x+sv) ds; requires l₁ < 1/2.
double harnack_bracket(const Vec& x, const Vec& v, double p, double t_final, int k, double l1,
                       const std::function<double(const Vec&)>& w);

struct HarnackPoint {
  Vec x, v;
  double p = 2.0;
  double t_final = 1.0;
  double lhs = 0.0, lhs_se = 0.0;      // P_T f(x)
  double qterm = 0.0, qterm_se = 0.0;  // (P_T f^p)^{1/p}(x+v)
  double bracket = 0.0;
  double log_ratio = 0.0, log_ratio_se = 0.0;  // log(lhs/qterm)
  double margin = 0.0;  // c·bracket − log_ratio at the fitted c
};
struct HarnackReport {
  std::vector<HarnackPoint> points;
  std::vector<HarnackPoint> held_out;
  double fitted_c = 0.0;
  double margin = 0.0;           // min over training points (≥ 0 by construction)
  double held_out_margin = 0.0;  // min over held-out of (margin + 4 SE), i.e. ≥ 0 passes
  double held_out_worst_z = 0.0;
  long dropped = 0;
};

struct HarnackSetup {
  std::vector<Vec> x;
  std::vector<Vec> v;  // paired with x
  std::vector<double> p_grid;
  double t_final = 1.0;
  int kalman_k = 0;
  double l1 = 0.0;
};

/// fitted_c = max(0, max_points log(lhs/qterm)/bracket); training and held-out
/// sets use the same points with independent Monte Carlo streams.
HarnackReport harnack_check(const ModelSpec& spec, const TestFunction& f, const HarnackSetup& setup,
                            const EstimatorConfig& cfg);

/// Same fit with P_T f and P_T f^p from the Gaussian law of an affine model;
/// f must be a Gaussian bump (offset 0).
HarnackReport harnack_oracle(const ModelSpec& spec, const TestFunction& f, const HarnackSetup& setup);

/// E exp(−a|X − c|²) for X ~ N(μ, Σ).
double gaussian_exp_quadratic(const Vec& mu, const SMat& cov, const Vec& c, double a);

/// Monte Carlo P_T f(x) and P_T f^p(x) for several p on shared paths.
struct SemigroupEstimate {
  SampleStats f;
  std::vector<SampleStats> f_pow;  // one per requested p
  SampleStats f_log_f;
  long rejected = 0;
};
SemigroupEstimate semigroup_moments(const ModelSpec& spec, const Vec& x0, const TestFunction& f,
                                    const std::vector<double>& p_list, const TimeGrid& grid,
                                    const EstimatorConfig& cfg, std::uint32_t family);

}  // namespace hypograd
