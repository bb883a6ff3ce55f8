#include "hypograd/control.hpp"

#include "hypograd/analysis.hpp"
#include "hypograd/errors.hpp"

#include <boost/math/quadrature/gauss.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace hypograd {

std::string to_string(PhiKind k) { return k == PhiKind::quadratic ? "quadratic" : "sine"; }

std::string to_string(XiCase c) {
  switch (c) {
    case XiCase::case1: return "case1";
    case XiCase::case2: return "case2";
    case XiCase::empirical: return "empirical";
  }
  return "?";
}

PhiKind phi_kind_from_string(const std::string& s) {
  if (s == "quadratic") return PhiKind::quadratic;
  if (s == "sine") return PhiKind::sine;
  throw ConfigError("unknown phi kind '" + s + "'");
}

double phi_at(PhiKind kind, int i, int n) {
  if (kind == PhiKind::quadratic)
    return static_cast<double>(i) * static_cast<double>(n - i) / (static_cast<double>(n) * n);
  if (i == 0 || i == n) return 0.0;
  return std::sin(std::numbers::pi * i / n);
}

double phi_value(PhiKind kind, double t, double t_final) {
  if (kind == PhiKind::quadratic) return t * (t_final - t) / (t_final * t_final);
  return std::sin(std::numbers::pi * t / t_final);
}

double phi_derivative(PhiKind kind, double t, double t_final) {
  if (kind == PhiKind::quadratic) return (t_final - 2.0 * t) / (t_final * t_final);
  return std::numbers::pi / t_final * std::cos(std::numbers::pi * t / t_final);
}

double WeightProfile::xi_square_integral() const {
  std::vector<double> terms(static_cast<std::size_t>(grid.n_steps));
  for (int j = 0; j < grid.n_steps; ++j) terms[j] = xi[j] * xi[j] * grid.dt();
  return pairwise_sum(terms);
}

WeightProfile phi_profile(const TimeGrid& grid, PhiKind kind) {
  WeightProfile w;
  w.grid = grid;
  w.phi_kind = kind;
  w.phi.resize(static_cast<std::size_t>(grid.n_steps) + 1);
  for (int i = 0; i <= grid.n_steps; ++i) w.phi[i] = phi_at(kind, i, grid.n_steps);
  return w;
}

WeightProfile xi_case1(const WeightProfile& phi, const BMat& b0, double c_bound) {
  if (!(c_bound >= 0.0) || !std::isfinite(c_bound)) throw ConfigError("c_bound must be finite and >= 0");
  const double cp = sigma_min(b0);
  if (!(cp > 1e-12 * std::max(1.0, op_norm(b0))))
    throw NotApplicable("Rank(B0) < m: the first-case weight does not apply");
  const TimeGrid& g = phi.grid;
  const double dt = g.dt();
  if (dt * c_bound >= 1.0) throw NotApplicable("grid too coarse for the requested c_bound");
  const double rate = c_bound == 0.0 ? 0.0 : -std::log1p(-dt * c_bound) / dt;
  WeightProfile w = phi;
  w.xi_case = XiCase::case1;
  w.c_prime = cp;
  w.c_bound = c_bound;
  w.xi.assign(static_cast<std::size_t>(g.n_steps) + 1, 0.0);
  double acc = 0.0;
  for (int j = 0; j < g.n_steps; ++j) {
    const double lag = static_cast<double>(g.n_steps - j) * dt;
    acc += phi.phi[j] * dt * std::exp(-2.0 * rate * lag);
    w.xi[j + 1] = cp * cp * acc;
  }
  return w;
}

GramianQuadrature quadrature_gramian(const std::function<Eigen::MatrixXd(double)>& factor, double a,
                                     double b, double rel_tol) {
  using Rule = boost::math::quadrature::gauss<double, 16>;
  const auto& x = Rule::abscissa();
  const auto& wt = Rule::weights();

  auto assemble = [&](int panels, Eigen::MatrixXd& value) {
    const double h = (b - a) / panels;
    const Eigen::MatrixXd probe = factor(a + 0.5 * h);
    const Eigen::Index m = probe.rows(), r = probe.cols();
    Eigen::MatrixXd big(m, r * 16 * panels);
    Eigen::Index col = 0;
    for (int p = 0; p < panels; ++p) {
      const double mid = a + (p + 0.5) * h;
      for (std::size_t k = 0; k < x.size(); ++k) {
        for (int sgn : {-1, 1}) {
          const double s = mid + sgn * 0.5 * h * x[k];
          big.middleCols(col, r) = std::sqrt(0.5 * h * wt[k]) * factor(s);
          col += r;
        }
      }
    }
    value = big * big.transpose();
    return lambda_min_from_factor(big);
  };

  GramianQuadrature out;
  Eigen::MatrixXd prev;
  double lam_prev = assemble(2, prev);
  for (int panels = 4; panels <= 1024; panels *= 2) {
    Eigen::MatrixXd cur;
    const double lam = assemble(panels, cur);
    const double dv = (cur - prev).norm() / std::max(cur.norm(), 1e-300);
    const double dl = std::abs(lam - lam_prev) / std::max(std::abs(lam), 1e-300);
    out.value = cur;
    out.lambda_min = lam;
    out.panels = panels;
    out.rel_change = std::max(dv, dl);
    if (out.rel_change <= rel_tol) break;
    prev = cur;
    lam_prev = lam;
  }
  return out;
}

GramianQuadrature deterministic_gramian_m(const BMat& a, const BMat& b0, PhiKind kind,
                                          double t_final, double t) {
  const Eigen::MatrixXd am = a, bm = b0;
  return quadrature_gramian(
      [&](double s) -> Eigen::MatrixXd {
        const double ph = std::max(0.0, phi_value(kind, s, t_final));
        return std::sqrt(ph) * (expm((t_final - s) * am) * bm);
      },
      0.0, t);
}

WeightProfile xi_case2(const WeightProfile& phi, const BMat& a, const BMat& b0) {
  const KalmanResult kr = kalman_index(a, b0);
  if (!kr.k) throw NotApplicable("Kalman rank condition fails: no finite index");
  const int k = *kr.k;
  const double tf = phi.grid.t_final;
  WeightProfile w = phi;
  w.xi_case = XiCase::case2;
  w.kalman_k = k;
  w.c2 = 2.0 * op_norm(a);
  const int n_cal = 64;
  double c1 = std::numeric_limits<double>::infinity();
  for (int q = 1; q <= n_cal; ++q) {
    const double t = tf * q / n_cal;
    const double lam = deterministic_gramian_m(a, b0, phi.phi_kind, tf, t).lambda_min;
    const double shape = std::pow(std::min(t, 1.0), 2.0 * (k + 1)) / (tf * std::exp(w.c2 * tf));
    w.calib_t.push_back(t);
    w.calib_lambda.push_back(lam);
    c1 = std::min(c1, lam / shape);
  }
  // The left-sum Gramian on the run grid is singular while (l − 1)·Rank B₀ < m
  // (φ₀ = 0) and lags the continuous one afterwards, so ξ vanishes on the
  // singular prefix and c₁ is also capped by the discrete ratios.
  const int n = phi.grid.n_steps;
  const auto m_disc =
      gramian_m_sequence(terminal_flow(std::vector<BMat>(static_cast<std::size_t>(n), a), phi.grid.dt()).k, b0, phi);
  const int rank_b0 = kr.ranks.front();
  std::vector<double> lam_disc(static_cast<std::size_t>(n) + 1, 0.0);
  int last_singular = 0;
  for (int l = 1; l <= n; ++l) {
    lam_disc[l] = lambda_min_sym(m_disc[l]);
    if ((l - 1) * rank_b0 < a.rows() || !(lam_disc[l] > 0.0)) last_singular = l;
  }
  if (last_singular == n) throw NotApplicable("discrete Gramian stays singular on the whole grid");
  for (int l = last_singular + 1; l <= n; ++l) {
    const double t = phi.grid.t(l);
    c1 = std::min(c1, lam_disc[l] / (std::pow(std::min(t, 1.0), 2.0 * (k + 1)) / (tf * std::exp(w.c2 * tf))));
  }
  if (!(c1 > 0.0)) throw NotApplicable("calibrated Gramian bound is not positive");
  w.c1 = c1;
  auto xi_of = [&](double t) {
    return c1 * std::pow(std::min(t, 1.0), 2.0 * (k + 1)) / (tf * std::exp(w.c2 * tf));
  };
  w.calib_margin = std::numeric_limits<double>::infinity();
  for (std::size_t q = 0; q < w.calib_t.size(); ++q) {
    w.calib_xi.push_back(xi_of(w.calib_t[q]));
    w.calib_margin = std::min(w.calib_margin, w.calib_lambda[q] - w.calib_xi[q]);
  }
  w.xi.resize(static_cast<std::size_t>(phi.grid.n_steps) + 1);
  for (int i = 0; i <= n; ++i) w.xi[i] = i <= last_singular ? 0.0 : xi_of(phi.grid.t(i));
  return w;
}

WeightProfile xi_empirical(const WeightProfile& phi, const std::vector<std::vector<BMat>>& pilot_flows,
                           const BMat& b0, double safety) {
  if (pilot_flows.empty()) throw ConfigError("empirical weight needs at least one pilot path");
  WeightProfile w = phi;
  w.xi_case = XiCase::empirical;
  const std::size_t n = static_cast<std::size_t>(phi.grid.n_steps) + 1;
  w.xi.assign(n, std::numeric_limits<double>::infinity());
  for (const auto& flow : pilot_flows) {
    const auto ms = gramian_m_sequence(flow, b0, phi);
    for (std::size_t i = 0; i < n; ++i)
      w.xi[i] = std::min(w.xi[i], std::max(0.0, safety * lambda_min_sym(ms[i])));
  }
  // λ_min(M_t) is nondecreasing in exact arithmetic; enforce it against round-off.
  for (std::size_t i = 1; i < n; ++i) w.xi[i] = std::max(w.xi[i], w.xi[i - 1]);
  return w;
}

std::vector<BMat> gramian_m_sequence(const std::vector<BMat>& k_flow, const BMat& b0,
                                     const WeightProfile& w) {
  const int n = w.grid.n_steps;
  const double dt = w.grid.dt();
  const BMat bb = b0 * b0.transpose();
  std::vector<BMat> out(static_cast<std::size_t>(n) + 1);
  out[0] = BMat::Zero(b0.rows(), b0.rows());
  for (int j = 0; j < n; ++j) {
    const BMat term = (w.phi[j] * dt) * (k_flow[j + 1] * bb * k_flow[j + 1].transpose());
    out[j + 1] = symmetrize(BMat(out[j] + term));
  }
  return out;
}

BMat gramian_m(const std::vector<BMat>& k_flow, const BMat& b0, const WeightProfile& w, int t_index) {
  if (t_index < 0 || t_index > w.grid.n_steps) throw ConfigError("t_index out of range");
  return gramian_m_sequence(k_flow, b0, w)[t_index];
}

std::vector<BMat> gramian_q_sequence(const std::vector<BMat>& k_flow, const std::vector<BMat>& c,
                                     const BMat& b0, const WeightProfile& w) {
  const int n = w.grid.n_steps;
  const double dt = w.grid.dt();
  std::vector<BMat> out(static_cast<std::size_t>(n) + 1);
  out[0] = BMat::Zero(b0.rows(), b0.rows());
  for (int j = 0; j < n; ++j)
    out[j + 1] = out[j] + (w.phi[j] * dt) * (k_flow[j + 1] * c[j] * b0.transpose() * k_flow[j + 1].transpose());
  return out;
}

BMat gramian_q(const std::vector<BMat>& k_flow, const std::vector<BMat>& c, const BMat& b0,
               const WeightProfile& w, int t_index) {
  if (t_index < 0 || t_index > w.grid.n_steps) throw ConfigError("t_index out of range");
  return gramian_q_sequence(k_flow, c, b0, w)[t_index];
}

PathLinearization linearize(const ModelSpec& spec, const StatePath& path, int n_steps) {
  PathLinearization lin;
  const auto n = static_cast<std::size_t>(n_steps);
  lin.a1.resize(n);
  lin.c.resize(n);
  lin.g21.resize(n);
  lin.g22.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Z1Jacobian j1 = spec.jac_z1(path.x[i]);
    const Z2Jacobian j2 = spec.jac_z2(path.x[i]);
    lin.a1[i] = j1.a1;
    lin.c[i] = j1.c;
    lin.g21[i] = j2.g21;
    lin.g22[i] = j2.g22;
  }
  return lin;
}

void build_alpha(const ControlInputs& in, ControlData& out) {
  const TimeGrid& grid = *in.grid;
  const WeightProfile& wp = *in.weights;
  const BMat& b0 = *in.b0;
  const auto& k = *in.k_flow;
  const auto& lin = *in.lin;
  const int n = grid.n_steps;
  const int m = static_cast<int>(b0.rows()), d = static_cast<int>(b0.cols());
  const double dt = grid.dt(), tf = grid.t_final;
  const BVec v1 = in.v.head(m), v2 = in.v.tail(d);
  const auto sz = static_cast<std::size_t>(n) + 1;

  out.q = gramian_q_sequence(k, lin.c, b0, wp);

  BVec r = BVec::Zero(m);
  for (int j = 0; j < n; ++j)
    r += (static_cast<double>(n - j) / n * dt) * (k[j + 1] * (lin.c[j] * v2));

  const GuardedInverse qf = guarded_inverse(out.q[n]);
  if (!qf.inverse.allFinite()) throw PathDegenerate("Q_T is singular", static_cast<std::size_t>(n));
  out.q_final_inv = qf.inverse;
  out.q_final_shift = qf.shift;
  out.u = qf.inverse * r;
  out.y = k[0] * v1;
  {
    std::vector<double> terms;
    for (int l = 1; l < n; ++l) terms.push_back(wp.xi[l] * wp.xi[l] * dt);
    out.s_norm = pairwise_sum(terms);
  }

  out.q_inv.assign(sz, BMat());
  out.shift.assign(sz, 0.0);
  out.tail.assign(sz, BVec::Zero(m));
  out.n_regularized = qf.shift > 0.0 ? 1 : 0;
  out.max_shift = qf.shift;
  const bool need_tail = out.y.squaredNorm() > 0.0;
  if (need_tail && !(out.s_norm > 0.0)) throw NotApplicable("weight profile xi vanishes identically");
  // tail[i] collects nodes l > i, which makes the discrete bridge telescope
  // exactly: sum_i q_i tail[i] = s_norm * y.
  for (int l = n - 1; l >= 1; --l) {
    out.tail[l - 1] = out.tail[l];
    if (!need_tail || !(wp.xi[l] > 0.0)) continue;
    const GuardedInverse gi = guarded_inverse(out.q[l]);
    if (!gi.inverse.allFinite()) throw PathDegenerate("Q_t is singular", static_cast<std::size_t>(l));
    out.q_inv[l] = gi.inverse;
    out.shift[l] = gi.shift;
    if (gi.shift > 0.0) {
      ++out.n_regularized;
      out.max_shift = std::max(out.max_shift, gi.shift);
    }
    out.tail[l - 1] += (wp.xi[l] * wp.xi[l] * dt) * (gi.inverse * out.y);
  }

  out.w.resize(sz);
  out.alpha.resize(sz);
  for (int i = 0; i <= n; ++i) {
    out.w[i] = need_tail ? BVec(out.u + out.tail[i] / out.s_norm) : out.u;
    const double ramp = static_cast<double>(n - i) / n;
    out.alpha[i] = ramp * v2 - wp.phi[i] * (b0.transpose() * (k[std::min(i + 1, n)].transpose() * out.w[i]));
  }

  out.alpha_dot.resize(static_cast<std::size_t>(n));
  out.alpha_dot_analytic.resize(static_cast<std::size_t>(n));
  out.alpha_dot_gap = 0.0;
  for (int i = 0; i < n; ++i) {
    out.alpha_dot[i] = (out.alpha[i + 1] - out.alpha[i]) / dt;
    const double t = grid.t(i);
    const BVec ktw = k[i + 1].transpose() * out.w[i];
    BVec an = -v2 / tf - phi_derivative(wp.phi_kind, t, tf) * (b0.transpose() * ktw) +
              wp.phi[i] * (b0.transpose() * (lin.a1[i].transpose() * ktw));
    if (need_tail && i >= 1 && wp.xi[i] > 0.0)
      an += wp.phi[i] * (b0.transpose() *
                         (k[i + 1].transpose() * ((wp.xi[i] * wp.xi[i] / out.s_norm) * (out.q_inv[i] * out.y))));
    out.alpha_dot_analytic[i] = an;
    out.alpha_dot_gap = std::max(out.alpha_dot_gap, (an - out.alpha_dot[i]).cwiseAbs().maxCoeff());
  }
  out.residual_alpha0 = (out.alpha[0] - v2).norm();
  out.residual_alphaN = out.alpha[n].norm();
}

void build_bridge(const ControlInputs& in, const BMat& sigma_inv, ControlData& out) {
  const TimeGrid& grid = *in.grid;
  const auto& lin = *in.lin;
  const int n = grid.n_steps;
  const int m = static_cast<int>(in.b0->rows());
  const double dt = grid.dt();
  out.g.resize(static_cast<std::size_t>(n) + 1);
  out.h_dot.resize(static_cast<std::size_t>(n));
  out.g[0] = in.v.head(m);
  for (int i = 0; i < n; ++i) {
    out.g[i + 1] = out.g[i] + dt * (lin.a1[i] * out.g[i] + lin.c[i] * out.alpha[i]);
    out.h_dot[i] = sigma_inv * (lin.g21[i] * out.g[i] + lin.g22[i] * out.alpha[i] - out.alpha_dot[i]);
  }
  out.residual_gN = out.g[n].norm();
}

ControlData build_control(const ControlInputs& in, const BMat& sigma_inv) {
  ControlData out;
  build_alpha(in, out);
  build_bridge(in, sigma_inv, out);
  return out;
}

double tol_bridge(const TimeGrid& grid, const Vec& v) {
  return 10.0 * (1.0 + v.norm()) * grid.t_final / grid.n_steps;
}

}  // namespace hypograd
