#include "hypograd/errors.hpp"
#include "hypograd/estimator.hpp"

#include <cmath>

namespace hypograd {

namespace {

using Accum = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxBlock, kMaxBlock * kMaxBlock>;

// Path quantities shared by both trace computations.
struct ChainData {
  int n = 0, m = 0, d = 0, ns = 0;
  double dt = 0.0;
  BVec v1, v2;
  bool need_tail = false;
  std::vector<BMat> p;                   // I + Δt A1_j
  std::vector<SMat> jac;                 // I + Δt ∇Z(X_j)
  std::vector<std::vector<BMat>> da1;    // [j][s]
  std::vector<std::vector<BMat>> dc;     // [j][s]
  bool has_variation = false;
};

ChainData chain_data(const RunContext& ctx, const PathControl& pc) {
  const ModelSpec& spec = *ctx.spec;
  ChainData cd;
  cd.n = ctx.grid.n_steps;
  cd.m = spec.m;
  cd.d = spec.d;
  cd.ns = spec.m + spec.d;
  cd.dt = ctx.grid.dt();
  cd.v1 = ctx.v.head(cd.m);
  cd.v2 = ctx.v.tail(cd.d);
  cd.need_tail = pc.control.y.squaredNorm() > 0.0;
  const auto n = static_cast<std::size_t>(cd.n);
  cd.p.resize(n);
  cd.jac.resize(n);
  const bool constant = spec.const_a1.has_value() && spec.const_c;
  if (!constant && !spec.hess_z1)
    throw MethodMisuse("the Skorokhod trace needs second derivatives of Z^(1) (hess_z1)");
  cd.has_variation = !constant;
  if (cd.has_variation) {
    cd.da1.assign(n, std::vector<BMat>(static_cast<std::size_t>(cd.ns)));
    cd.dc.assign(n, std::vector<BMat>(static_cast<std::size_t>(cd.ns)));
  }
  const BMat id = BMat::Identity(cd.m, cd.m);
  for (std::size_t j = 0; j < n; ++j) {
    cd.p[j] = id + cd.dt * pc.lin.a1[j];
    SMat g(cd.ns, cd.ns);
    g.topLeftCorner(cd.m, cd.m) = pc.lin.a1[j];
    g.topRightCorner(cd.m, cd.d) = pc.lin.c[j];
    g.bottomLeftCorner(cd.d, cd.m) = pc.lin.g21[j];
    g.bottomRightCorner(cd.d, cd.d) = pc.lin.g22[j];
    cd.jac[j] = SMat::Identity(cd.ns, cd.ns) + cd.dt * g;
    if (cd.has_variation) {
      const Z1Hessian h = spec.hess_z1(pc.path.x[j]);
      for (int s = 0; s < cd.ns; ++s) {
        const Z1Variation var = vary(h, cd.m, cd.d, Vec::Unit(cd.ns, s));
        cd.da1[j][s] = var.da1;
        cd.dc[j][s] = var.dc;
      }
    }
  }
  return cd;
}

Z1Variation combine(const ChainData& cd, int j, const Vec& e) {
  Z1Variation out{BMat::Zero(cd.m, cd.m), BMat::Zero(cd.m, cd.d)};
  if (!cd.has_variation) return out;
  for (int s = 0; s < cd.ns; ++s) {
    if (e[s] == 0.0) continue;
    out.da1 += e[s] * cd.da1[j][s];
    out.dc += e[s] * cd.dc[j][s];
  }
  return out;
}

// ∂ḣ_i/∂ΔB_i^c by differentiating every stage of the discrete chain.
BVec full_column(const RunContext& ctx, const PathControl& pc, const ChainData& cd, int i, int c) {
  const int n = cd.n, m = cd.m, d = cd.d;
  const double dt = cd.dt;
  const auto& k = pc.flow.k;
  const auto& lin = pc.lin;
  const ControlData& ctl = pc.control;
  const WeightProfile& wp = ctx.weights;
  const BMat& b0 = ctx.spec->b0;
  const auto sz = static_cast<std::size_t>(n) + 1;

  // State tangent: X_{i+1} moves by (0, σ e_c); later states follow J.
  std::vector<BMat> da1(static_cast<std::size_t>(n), BMat::Zero(m, m));
  std::vector<BMat> dcm(static_cast<std::size_t>(n), BMat::Zero(m, d));
  if (cd.has_variation) {
    Vec dx = Vec::Zero(cd.ns);
    dx.tail(d) = ctx.spec->sigma.col(c);
    for (int l = i + 1; l < n; ++l) {
      const Z1Variation var = combine(cd, l, dx);
      da1[l] = var.da1;
      dcm[l] = var.dc;
      dx = cd.jac[l] * dx;
    }
  }

  std::vector<BMat> dk(sz);
  dk[n] = BMat::Zero(m, m);
  for (int l = n - 1; l >= 0; --l) dk[l] = dk[l + 1] * cd.p[l] + dt * (k[l + 1] * da1[l]);

  const BMat b0t = b0.transpose();
  std::vector<BMat> dq(sz);
  dq[0] = BMat::Zero(m, m);
  BVec dr = BVec::Zero(m);
  for (int l = 0; l < n; ++l) {
    const BMat& kl = k[l + 1];
    const BMat& dkl = dk[l + 1];
    const BMat term = dkl * lin.c[l] * b0t * kl.transpose() + kl * dcm[l] * b0t * kl.transpose() +
                      kl * lin.c[l] * b0t * dkl.transpose();
    dq[l + 1] = dq[l] + (wp.phi[l] * dt) * term;
    const double ramp = static_cast<double>(n - l) / n;
    dr += (ramp * dt) * (dkl * (lin.c[l] * cd.v2) + kl * (dcm[l] * cd.v2));
  }

  auto shifted = [&](const BMat& dqm, const BMat& q, double shift) -> BMat {
    if (shift <= 0.0) return dqm;
    const double sgn = q.trace() >= 0.0 ? 1.0 : -1.0;
    return dqm + (sgn * 1e-12 * dqm.trace() / m) * BMat::Identity(m, m);
  };

  const BMat dqn = shifted(dq[n], ctl.q[n], ctl.q_final_shift);
  const BVec du = ctl.q_final_inv * (dr - dqn * ctl.u);
  const BVec dy = dk[0] * cd.v1;

  std::vector<BVec> di(sz, BVec::Zero(m));
  if (cd.need_tail) {
    for (int l = n - 1; l >= 1; --l) {
      di[l - 1] = di[l];
      if (!(wp.xi[l] > 0.0)) continue;
      const BMat& qi = ctl.q_inv[l];
      const BMat dql = shifted(dq[l], ctl.q[l], ctl.shift[l]);
      di[l - 1] += (wp.xi[l] * wp.xi[l] * dt) * (qi * (dy - dql * (qi * ctl.y)));
    }
  }

  auto dalpha = [&](int kk) -> BVec {
    if (kk >= n) return BVec::Zero(d);  // φ_N = 0
    BVec dw = du;
    if (cd.need_tail) dw += di[kk] / ctl.s_norm;
    return -wp.phi[kk] * (b0t * (dk[kk + 1].transpose() * ctl.w[kk] + k[kk + 1].transpose() * dw));
  };

  BVec dg = BVec::Zero(m);
  for (int kk = 0; kk < i; ++kk) dg = cd.p[kk] * dg + dt * (lin.c[kk] * dalpha(kk));
  const BVec da_i = dalpha(i), da_next = dalpha(i + 1);
  return ctx.sigma_inv * (lin.g21[i] * dg + lin.g22[i] * da_i - (da_next - da_i) / dt);
}

}  // namespace

BMat hdot_sensitivity(const RunContext& ctx, const PathControl& pc, int i) {
  if (i < 0 || i >= ctx.grid.n_steps) throw ConfigError("step index out of range");
  const ChainData cd = chain_data(ctx, pc);
  BMat out(cd.d, cd.d);
  for (int c = 0; c < cd.d; ++c) out.col(c) = full_column(ctx, pc, cd, i, c);
  return out;
}

double skorokhod_trace_full(const RunContext& ctx, const PathControl& pc) {
  const ChainData cd = chain_data(ctx, pc);
  std::vector<double> per_step(static_cast<std::size_t>(cd.n), 0.0);
  for (int i = 0; i < cd.n; ++i) {
    double t = 0.0;
    for (int c = 0; c < cd.d; ++c) t += full_column(ctx, pc, cd, i, c)[c];
    per_step[i] = t;
  }
  return pairwise_sum(per_step);
}

std::optional<double> skorokhod_trace_economical(const RunContext& ctx, const PathControl& pc) {
  const ControlData& ctl = pc.control;
  if (ctl.q_final_shift > 0.0) return std::nullopt;
  for (double s : ctl.shift)
    if (s > 0.0) return std::nullopt;

  const ChainData cd = chain_data(ctx, pc);
  const int n = cd.n, m = cd.m, d = cd.d, ns = cd.ns;
  const double dt = cd.dt;
  const auto& k = pc.flow.k;
  const auto& lin = pc.lin;
  const WeightProfile& wp = ctx.weights;
  const BMat& b0 = ctx.spec->b0;
  const BMat b0t = b0.transpose();
  const BMat id = BMat::Identity(m, m);
  const auto sz = static_cast<std::size_t>(n) + 1;
  const auto nsz = static_cast<std::size_t>(ns);

  // L_j = K_{j+1} is the flow factor attached to node j (L_N = I).
  auto lflow = [&](int j) -> const BMat& { return k[std::min(j + 1, n)]; };

  // Forward pieces: prefix R_{<j} and the map V_i from α-perturbations to g_i.
  std::vector<BVec> r_lt(sz);
  std::vector<BVec> r_step(static_cast<std::size_t>(n));
  r_lt[0] = BVec::Zero(m);
  for (int j = 0; j < n; ++j) {
    const double ramp = static_cast<double>(n - j) / n;
    r_step[j] = (ramp * dt) * (lflow(j) * (lin.c[j] * cd.v2));
    r_lt[j + 1] = r_lt[j] + r_step[j];
  }
  std::vector<BMat> row(sz);  // φ_j B₀* L_j*
  for (int j = 0; j <= n; ++j) row[j] = wp.phi[j] * (b0t * lflow(j).transpose());
  std::vector<BMat> vmap(sz);
  vmap[0] = BMat::Zero(m, m);
  for (int j = 0; j < n; ++j) vmap[j + 1] = cd.p[j] * vmap[j] + dt * (lin.c[j] * row[j]);

  // Per state direction s of a perturbation of X_j:
  //   e     δK_j K_j⁻¹ (so δK_l = e K_l for l <= j)
  //   dpsi  δ of the suffix sum of q_l, l >= j
  //   drho  δ of the suffix sum of the R steps, l >= j
  //   theta Σ_{l>j} ξ_l² Δt Q_l⁻¹ (δQ_l − e Q_l − Q_l e*) Q_l⁻¹ y
  std::vector<BMat> e(nsz, BMat::Zero(m, m)), dpsi(nsz, BMat::Zero(m, m));
  std::vector<BVec> drho(nsz, BVec::Zero(m)), theta(nsz, BVec::Zero(m));
  std::vector<BMat> e_new(nsz), dpsi_new(nsz), f(nsz);
  std::vector<BVec> drho_new(nsz), theta_new(nsz);
  Accum smat = Accum::Zero(m, m * m);  // M -> Σ_{l>j} ξ_l² Δt Q_l⁻¹ M Q_l⁻¹ y
  BMat omega = BMat::Zero(m, m);       // Σ_{l>j} ξ_l² Δt Q_l⁻¹
  BMat kinv_next = id;                 // K_{j+1}⁻¹

  std::vector<double> per_step(static_cast<std::size_t>(n), 0.0);
  for (int j = n - 1; j >= 1; --j) {
    const int l_new = j + 1;
    if (cd.need_tail && l_new <= n - 1 && wp.xi[l_new] > 0.0) {
      const double wgt = wp.xi[l_new] * wp.xi[l_new] * dt;
      const BMat& qi = ctl.q_inv[l_new];
      const BVec bvec = qi * ctl.y;
      for (int cc = 0; cc < m; ++cc)
        for (int a = 0; a < m; ++a) smat.col(a + m * cc) += (wgt * bvec[cc]) * qi.col(a);
      omega += wgt * qi;
    }

    Eigen::PartialPivLU<BMat> lu(cd.p[j]);
    const BMat kinv = lu.solve(kinv_next);
    if (!kinv.allFinite() || (cd.p[j] * kinv - kinv_next).norm() > 1e-8 * (1.0 + kinv_next.norm()))
      return std::nullopt;
    const SMat& jj = cd.jac[j];
    const BMat& lj = k[j + 1];
    const BMat qj = (wp.phi[j] * dt) * (lj * lin.c[j] * b0t * lj.transpose());
    const BMat& q_lt = ctl.q[j];
    const double ramp = static_cast<double>(n - j) / n;

    for (std::size_t s = 0; s < nsz; ++s) {
      BMat ep = BMat::Zero(m, m), psi = BMat::Zero(m, m);
      BVec rho = BVec::Zero(m), th = BVec::Zero(m);
      for (std::size_t r = 0; r < nsz; ++r) {
        const double w = jj(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(s));
        if (w == 0.0) continue;
        ep += w * e[r];
        psi += w * dpsi[r];
        rho += w * drho[r];
        th += w * theta[r];
      }
      psi += ep * qj + qj * ep.transpose();
      rho += ep * r_step[j];
      f[s] = BMat::Zero(m, m);
      if (cd.has_variation) {
        f[s] = (dt * lj) * cd.da1[j][s] * kinv;
        const BMat h = (wp.phi[j] * dt) * (lj * cd.dc[j][s] * b0t * lj.transpose());
        psi += h;
        rho += (ramp * dt) * (lj * (cd.dc[j][s] * cd.v2));
        if (cd.need_tail) {
          const BMat mm = h + f[s] * q_lt + q_lt * f[s].transpose();
          const Eigen::Map<const Eigen::VectorXd> vm(mm.data(), m * m);
          th += smat * vm - omega * (f[s] * ctl.y) - f[s].transpose() * ctl.tail[j];
        }
      }
      e_new[s] = ep + f[s];
      dpsi_new[s] = psi;
      drho_new[s] = rho;
      theta_new[s] = th;
    }

    // z for the d noise directions; α_l moves by −row_l z for l < j and by
    // −row_j (z − f* w_j) at l = j. Trace of step i = j − 1.
    BMat zmat(m, d);
    double boundary = 0.0;
    for (int rr = 0; rr < d; ++rr) {
      const auto s = static_cast<std::size_t>(m + rr);
      const BMat& ej = e_new[s];
      const BMat dqn = ej * q_lt + q_lt * ej.transpose() + dpsi_new[s];
      const BVec dr = ej * r_lt[j] + drho_new[s];
      BVec z = ej.transpose() * ctl.u + ctl.q_final_inv * (dr - dqn * ctl.u);
      if (cd.need_tail) z -= theta_new[s] / ctl.s_norm;
      zmat.col(rr) = z;
      if (cd.has_variation) boundary += (row[j] * (f[s].transpose() * ctl.w[j]))[rr];
    }
    const int i = j - 1;
    const BMat gamma = -lin.g21[i] * vmap[i] - lin.g22[i] * row[i] + (row[i + 1] - row[i]) / dt;
    per_step[i] = (gamma * zmat).trace() - boundary / dt;

    std::swap(e, e_new);
    std::swap(dpsi, dpsi_new);
    std::swap(drho, drho_new);
    std::swap(theta, theta_new);
    kinv_next = kinv;
  }
  return pairwise_sum(per_step);
}

SkorokhodResult skorokhod_delta(const RunContext& ctx, const PathControl& pc, const NoisePath& noise) {
  SkorokhodResult out;
  out.ito_part = ito_sum(pc.control.h_dot, noise);
  std::optional<double> tr;
  if (ctx.cfg.skorokhod_mode == SkorokhodMode::economical) {
    tr = skorokhod_trace_economical(ctx, pc);
    out.fell_back = !tr.has_value();
  }
  out.trace = tr ? *tr : skorokhod_trace_full(ctx, pc);
  if (!std::isfinite(out.trace)) throw PathDegenerate("non-finite Skorokhod trace", 0);
  out.delta = out.ito_part - ctx.grid.dt() * out.trace;
  return out;
}

std::vector<BVec> terminal_noise_gradient(const RunContext& ctx, const StatePath& path,
                                          const Vec& grad_f_at_terminal) {
  const ModelSpec& spec = *ctx.spec;
  const int n = ctx.grid.n_steps, d = spec.d, ns = spec.dim();
  const double dt = ctx.grid.dt();
  std::vector<BVec> out(static_cast<std::size_t>(n));
  Vec lambda = grad_f_at_terminal;
  for (int j = n - 1; j >= 0; --j) {
    out[j] = spec.sigma.transpose() * BVec(lambda.tail(d));
    const SMat jac = SMat::Identity(ns, ns) + dt * spec.jacobian(path.x[j]);
    lambda = jac.transpose() * lambda;
  }
  return out;
}

}  // namespace hypograd
