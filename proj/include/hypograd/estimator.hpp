#pragma once

#include "hypograd/control.hpp"
#include "hypograd/flow.hpp"
#include "hypograd/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace hypograd {

// ---- test functions ---------------------------------------------------------

struct TestFunction {
  std::string tag;  // linear | quadratic | gaussian_bump | indicator | custom
  std::function<double(const Vec&)> f;
  std::function<Vec(const Vec&)> grad;  // empty when f is not differentiable
  nlohmann::json params;                // canonical parameters (echoed into results)

  bool differentiable() const { return static_cast<bool>(grad); }
  double operator()(const Vec& z) const { return f(z); }
};

/// f(z) = ⟨a, z⟩ + b.
TestFunction linear_function(const Vec& a, double b = 0.0);
/// f(z) = (z − c)ᵀ W (z − c), W symmetric.
TestFunction quadratic_function(const SMat& w, const Vec& c);
/// f(z) = offset + amp · exp(−|z − c|² / (2 width²)).
TestFunction gaussian_bump(const Vec& c, double width, double amp = 1.0, double offset = 0.0);
/// f(z) = 1{z_k > threshold}.
TestFunction indicator_function(int k, double threshold, int dim);
/// f given by an expression over x1..xm, y1..yd.
TestFunction custom_function(const std::string& expr, int m, int d);

/// Builds a test function from {"tag": ..., params...}; validates sizes against m+d.
TestFunction test_function_from_json(const nlohmann::json& j, int m, int d);

// ---- estimator configuration and results -----------------------------------

enum class Method { bismut_auto, bismut_ito, bismut_skorokhod, pathwise, finite_difference, closed_form };
enum class SkorokhodMode { economical, full };
enum class XiChoice { automatic, case1, case2, empirical };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
std::string to_string(SkorokhodMode m);
SkorokhodMode skorokhod_mode_from_string(const std::string& s);
std::string to_string(XiChoice c);
XiChoice xi_choice_from_string(const std::string& s);

struct EstimatorConfig {
  int n_paths = 1000;
  int n_steps = 64;
  std::uint64_t master_seed = 1;
  Method method = Method::bismut_auto;
  double fd_bump = 1e-3;
  bool antithetic = false;
  PhiKind phi = PhiKind::quadratic;
  XiChoice xi = XiChoice::automatic;
  std::optional<double> c_bound;  // case1 bound on ‖∇^(1)Z^(1)‖; sampled when absent
  int pilot_paths = 32;
  SkorokhodMode skorokhod_mode = SkorokhodMode::economical;
  int threads = 1;
  double moment_p = 4.0;
  double max_reject_fraction = 1e-3;
  bool gramian_diagnostics = false;  // per-path Q-inverse and ordering checks

  void check() const;
};

struct GradientEstimate {
  double value = 0.0;
  double std_error = 0.0;
  long n_effective = 0;
  long rejected = 0;
  Method method = Method::bismut_auto;
  double weight_l2 = 0.0;  // (mean δ(h)²)^{1/2}
  double weight_l2_se = 0.0;

  // Weight statistics and control-variate adjusted estimate (E δ(h) = 0).
  double weight_mean = 0.0;
  double weight_se = 0.0;
  double value_cv = 0.0;
  double std_error_cv = 0.0;
  double weight_kurtosis = 0.0;
  bool moment_flag = false;  // p-th moment estimate not settling across dyadic subsamples

  // Bridge and Gramian diagnostics over accepted paths.
  double max_alpha0_residual = 0.0;
  double max_alphaN_residual = 0.0;
  double max_gN = 0.0;
  double max_alpha_dot_gap = 0.0;
  long regularized_paths = 0;
  double max_shift = 0.0;
  long trace_fallbacks = 0;
  double min_qinv_margin = 0.0;      // min over paths/t of 1 − ‖Q⁻¹‖(1−ε)ξ/(1+1e-6)
  double min_order_margin = 0.0;     // min over paths/t/a of ⟨Qa,a⟩ − (1−ε)⟨Ma,a⟩ + 1e-9
  double mean_f = 0.0;               // sample mean of f(X_T)
};

/// Sample statistics of one scalar per path (index-ordered, pairwise sums).
struct SampleStats {
  double mean = 0.0;
  double variance = 0.0;  // unbiased
  double std_error = 0.0;
  long n = 0;
};
SampleStats sample_stats(const std::vector<double>& xs);

// ---- shared path machinery ---------------------------------------------------

/// Everything fixed for one estimation run.
struct RunContext {
  const ModelSpec* spec = nullptr;
  Vec x0;
  Vec v;
  TimeGrid grid;
  EstimatorConfig cfg;
  WeightProfile weights;
  BMat sigma_inv;
};

/// Weight profile chosen per cfg.xi (auto: case1 if Rank B₀ = m, else case2
/// when ∇^(1)Z^(1) is constant, else empirical from pilot paths).
WeightProfile choose_weights(const ModelSpec& spec, const Vec& x0, const TimeGrid& grid,
                             const EstimatorConfig& cfg);

/// 1.1 × the largest ‖∇^(1)Z^(1)‖ met along `n_pilot` pilot paths.
double sampled_c_bound(const ModelSpec& spec, const Vec& x0, const TimeGrid& grid,
                       std::uint64_t seed, int n_pilot);

NoisePath path_noise(const RunContext& ctx, long path_index, std::uint32_t family = 0);

/// Runs fn(i) for i in [0, n) on `threads` workers; results land at index i.
void parallel_for(long n, int threads, const std::function<void(long)>& fn);

// ---- divergence of the control ------------------------------------------------

/// Σ⟨ḣ_i, ΔB_i⟩.
double ito_sum(const std::vector<BVec>& h_dot, const NoisePath& noise);
/// Itô divergence; only legal when the model is adapted.
double ito_delta(const ModelSpec& spec, const std::vector<BVec>& h_dot, const NoisePath& noise);

struct PathControl {
  StatePath path;
  PathLinearization lin;
  TerminalFlow flow;
  ControlData control;
};

/// Simulates one path and builds its control. Throws PathDegenerate.
PathControl path_control(const RunContext& ctx, const NoisePath& noise);

struct SkorokhodResult {
  double delta = 0.0;
  double ito_part = 0.0;
  double trace = 0.0;  // Σ_i tr(∂ḣ_i/∂ΔB_i)
  bool fell_back = false;
};

/// Trace Σ_i tr(∂ḣ_i/∂ΔB_i) by tangent propagation of the whole discrete chain
/// for every increment: O(N²) per path.
double skorokhod_trace_full(const RunContext& ctx, const PathControl& pc);
/// Same trace with one backward sweep (O(N)); nullopt when a regularized or
/// non-invertible node requires the full computation.
std::optional<double> skorokhod_trace_economical(const RunContext& ctx, const PathControl& pc);

SkorokhodResult skorokhod_delta(const RunContext& ctx, const PathControl& pc, const NoisePath& noise);

/// ∂ḣ_i/∂ΔB_i (d×d) for one i by the full tangent method.
BMat hdot_sensitivity(const RunContext& ctx, const PathControl& pc, int i);

/// Per-path sensitivities ∂F/∂ΔB_i of F = F(X_N) by a reverse sweep.
std::vector<BVec> terminal_noise_gradient(const RunContext& ctx, const StatePath& path,
                                          const Vec& grad_f_at_terminal);

// ---- estimators ----------------------------------------------------------------

RunContext make_context(const ModelSpec& spec, const Vec& x0, const Vec& v, const TimeGrid& grid,
                        const EstimatorConfig& cfg);

GradientEstimate bismut_gradient(const ModelSpec& spec, const Vec& x0, const Vec& v,
                                 const TestFunction& f, const TimeGrid& grid, const EstimatorConfig& cfg);
GradientEstimate bismut_gradient(const RunContext& ctx, const TestFunction& f);

GradientEstimate pathwise_gradient(const ModelSpec& spec, const Vec& x0, const Vec& v,
                                   const TestFunction& f, const TimeGrid& grid, const EstimatorConfig& cfg);
GradientEstimate fd_gradient(const ModelSpec& spec, const Vec& x0, const Vec& v, const TestFunction& f,
                             const TimeGrid& grid, const EstimatorConfig& cfg);

/// X_T ~ N(mean, cov) for affine models.
struct GaussianLaw {
  Vec mean;
  SMat cov;
  SMat flow;  // e^{TG}
};
GaussianLaw gaussian_law(const ModelSpec& spec, const Vec& x0, double t_final);

double closed_form_gradient(const ModelSpec& spec, const Vec& x0, const Vec& v, const TestFunction& f,
                            double t_final);

/// Dispatches on cfg.method.
GradientEstimate estimate_gradient(const ModelSpec& spec, const Vec& x0, const Vec& v,
                                   const TestFunction& f, const TimeGrid& grid, const EstimatorConfig& cfg);

/// Discrete integration by parts: per-path F·δ(h) against Σ⟨∂F/∂ΔB_i, ḣ_i⟩Δt.
struct DualityResult {
  SampleStats lhs;   // F δ(h)
  SampleStats rhs;   // Σ⟨∂F/∂ΔB_i, ḣ_i⟩Δt
  SampleStats diff;  // per-path difference (paired)
  double z_score = 0.0;  // |mean diff| / SE(diff)
  long rejected = 0;
};
DualityResult duality_check(const ModelSpec& spec, const Vec& x0, const Vec& v, const TestFunction& F,
                            const TimeGrid& grid, const EstimatorConfig& cfg);

}  // namespace hypograd
