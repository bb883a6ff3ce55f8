#pragma once

#include "hypograd/flow.hpp"
#include "hypograd/linalg.hpp"
#include "hypograd/model.hpp"

#include <functional>
#include <string>
#include <vector>

namespace hypograd {

enum class PhiKind { quadratic, sine };
enum class XiCase { case1, case2, empirical };

std::string to_string(PhiKind k);
std::string to_string(XiCase c);
PhiKind phi_kind_from_string(const std::string& s);

/// φ at node i of an N-step grid. Quadratic: i(N−i)/N², sine: sin(πi/N).
/// Both vanish exactly at i = 0 and i = N.
double phi_at(PhiKind kind, int i, int n);
double phi_value(PhiKind kind, double t, double t_final);
double phi_derivative(PhiKind kind, double t, double t_final);

struct WeightProfile {
  TimeGrid grid;
  PhiKind phi_kind = PhiKind::quadratic;
  std::vector<double> phi;  // N+1 nodes
  std::vector<double> xi;   // N+1 nodes, nondecreasing
  XiCase xi_case = XiCase::case1;

  // Calibration record.
  double c_prime = 0.0;  // case1: σ_min(B₀)
  double c_bound = 0.0;  // case1: bound on ‖∇^(1)Z^(1)‖
  double c1 = 0.0;       // case2
  double c2 = 0.0;       // case2
  int kalman_k = -1;     // case2
  std::vector<double> calib_t, calib_lambda, calib_xi;
  double calib_margin = 0.0;

  /// ∫₀ᵀ ξ² by the left-endpoint rule.
  double xi_square_integral() const;
};

WeightProfile phi_profile(const TimeGrid& grid, PhiKind kind);

/// ξ_j = c'² Σ_{l<j} φ_l e^{−2c(T−t_l)} Δt with c' = σ_min(B₀). The rate c is
/// the per-step contraction bound of I + Δt A1 under ‖A1‖ ≤ c_bound, so the
/// discrete Gramian dominates ξ exactly, not only as Δt → 0.
WeightProfile xi_case1(const WeightProfile& phi, const BMat& b0, double c_bound);

/// ξ(t) = c₁ (t∧1)^{2(k+1)} / (T e^{c₂ T}), c₂ = 2‖A‖ and c₁ the largest
/// constant keeping ξ ≤ λ_min(M_t) on 64 calibration nodes and on the run
/// grid's discrete Gramian; ξ = 0 where that discrete Gramian is singular.
WeightProfile xi_case2(const WeightProfile& phi, const BMat& a, const BMat& b0);

/// ξ from the smallest λ_min(M_t) seen on pilot flows, scaled by `safety`.
WeightProfile xi_empirical(const WeightProfile& phi, const std::vector<std::vector<BMat>>& pilot_flows,
                           const BMat& b0, double safety = 0.9);

/// Continuous Gramian M_t = ∫₀ᵗ φ(s) e^{(T−s)A} B₀B₀* e^{(T−s)A*} ds by
/// refined Gauss–Legendre quadrature; λ_min from the quadrature factor.
struct GramianQuadrature {
  Eigen::MatrixXd value;
  double lambda_min = 0.0;
  int panels = 0;
  double rel_change = 0.0;
};
GramianQuadrature quadrature_gramian(const std::function<Eigen::MatrixXd(double)>& factor, double a,
                                     double b, double rel_tol = 1e-8);
GramianQuadrature deterministic_gramian_m(const BMat& a, const BMat& b0, PhiKind kind,
                                          double t_final, double t);

/// M_{t_i} = Σ_{j<i} φ_j K_{j+1} B₀B₀* K_{j+1}* Δt for i = 0..N (symmetrized).
std::vector<BMat> gramian_m_sequence(const std::vector<BMat>& k_flow, const BMat& b0,
                                     const WeightProfile& w);
BMat gramian_m(const std::vector<BMat>& k_flow, const BMat& b0, const WeightProfile& w, int t_index);

/// Q_{t_i} = Σ_{j<i} φ_j K_{j+1} C_j B₀* K_{j+1}* Δt for i = 0..N.
std::vector<BMat> gramian_q_sequence(const std::vector<BMat>& k_flow, const std::vector<BMat>& c,
                                     const BMat& b0, const WeightProfile& w);
BMat gramian_q(const std::vector<BMat>& k_flow, const std::vector<BMat>& c, const BMat& b0,
               const WeightProfile& w, int t_index);

/// Per-step Jacobian data along one path, i = 0..N−1.
struct PathLinearization {
  std::vector<BMat> a1, c, g21, g22;
};
PathLinearization linearize(const ModelSpec& spec, const StatePath& path, int n_steps);

struct ControlData {
  std::vector<BVec> alpha;               // N+1
  std::vector<BVec> alpha_dot;           // N, (α_{i+1} − α_i)/Δt
  std::vector<BVec> alpha_dot_analytic;  // N, from the explicit t-dependence
  std::vector<BVec> g;                   // N+1
  std::vector<BVec> h_dot;               // N
  std::vector<BMat> q;                   // N+1 prefix Gramians Q_{t_i}
  std::vector<BMat> q_inv;               // guarded inverses of Q_i where used (else empty)
  std::vector<double> shift;             // regularization applied at node i (0 if none)
  std::vector<BVec> w;                   // N+1, w_i = u + I_i/S
  std::vector<BVec> tail;                // N+1, I_i = Σ_{l>i} ξ_l² Δt Q_l⁻¹ y
  BMat q_final_inv;
  double q_final_shift = 0.0;
  BVec u, y;
  double s_norm = 0.0;
  double residual_alpha0 = 0.0, residual_alphaN = 0.0, residual_gN = 0.0;
  double alpha_dot_gap = 0.0;  // max |analytic − divided difference|
  int n_regularized = 0;
  double max_shift = 0.0;
};

struct ControlInputs {
  const TimeGrid* grid = nullptr;
  const WeightProfile* weights = nullptr;
  const BMat* b0 = nullptr;
  const std::vector<BMat>* k_flow = nullptr;
  const PathLinearization* lin = nullptr;
  Vec v;
};

/// α of the explicit control plus its divided-difference and analytic
/// derivatives. Throws PathDegenerate if Q_T cannot be inverted.
void build_alpha(const ControlInputs& in, ControlData& out);

/// g by ġ = A1 g + C α (Euler, g_0 = v^(1)) and ḣ = σ⁻¹(∇Z^(2)(g, α) − α̇).
void build_bridge(const ControlInputs& in, const BMat& sigma_inv, ControlData& out);

ControlData build_control(const ControlInputs& in, const BMat& sigma_inv);

/// |g_N| allowance: 10(1 + |v|)T/N.
double tol_bridge(const TimeGrid& grid, const Vec& v);

}  // namespace hypograd
