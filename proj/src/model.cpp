#include "hypograd/model.hpp"

#include "hypograd/errors.hpp"
#include "hypograd/expr.hpp"
#include "hypograd/rng.hpp"

#include <cmath>
#include <limits>

namespace hypograd {

Z1Variation vary(const Z1Hessian& hess, int m, int d, const Vec& e) {
  Z1Variation out{BMat::Zero(m, m), BMat::Zero(m, d)};
  for (int a = 0; a < m; ++a) {
    const Vec row = hess.h[a] * e;
    out.da1.row(a) = row.head(m).transpose();
    out.dc.row(a) = row.tail(d).transpose();
  }
  return out;
}

Vec ModelSpec::drift(const Vec& x) const {
  Vec out(m + d);
  out.head(m) = z1(x);
  out.tail(d) = z2(x);
  return out;
}

SMat ModelSpec::jacobian(const Vec& x) const {
  const Z1Jacobian j1 = jac_z1(x);
  const Z2Jacobian j2 = jac_z2(x);
  SMat g(m + d, m + d);
  g.topLeftCorner(m, m) = j1.a1;
  g.topRightCorner(m, d) = j1.c;
  g.bottomLeftCorner(d, m) = j2.g21;
  g.bottomRightCorner(d, d) = j2.g22;
  return g;
}

BMat ModelSpec::split_b(const Vec& x) const { return jac_z1(x).c - b0; }

void check_spec(const ModelSpec& spec) {
  if (spec.m < 1 || spec.d < 1 || spec.m > kMaxBlock || spec.d > kMaxBlock)
    throw ConfigError("model dimensions must satisfy 1 <= m, d <= " + std::to_string(kMaxBlock));
  if (spec.sigma.rows() != spec.d || spec.sigma.cols() != spec.d)
    throw ConfigError("sigma must be d x d");
  if (spec.b0.rows() != spec.m || spec.b0.cols() != spec.d) throw ConfigError("b0 must be m x d");
  if (!(spec.epsilon >= 0.0 && spec.epsilon < 1.0)) throw ConfigError("epsilon must lie in [0,1)");
  if (!spec.z1 || !spec.z2 || !spec.jac_z1 || !spec.jac_z2)
    throw ConfigError("model is missing drift or Jacobian functions");
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(spec.sigma));
  const auto& s = svd.singularValues();
  const double smin = s(s.size() - 1);
  if (!(smin > 0.0) || s(0) / smin > spec.sigma_condition_cap)
    throw ModelError("sigma is singular or too ill-conditioned");
  if (spec.hypothesis) {
    const auto& h = *spec.hypothesis;
    if (!(h.c_const > 0.0) || h.l1 < 0.0 || h.l1 > 1.0 || h.l2 < 0.0)
      throw ConfigError("hypothesis constants out of range");
  }
}

SampleBox SampleBox::centered(int dim, double half_side) {
  return {Vec::Constant(dim, -half_side), Vec::Constant(dim, half_side)};
}

Vec halton_point(std::uint64_t k, int dim) {
  static constexpr int primes[kMaxState] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37};
  Vec p(dim);
  for (int s = 0; s < dim; ++s) {
    const std::uint64_t base = static_cast<std::uint64_t>(primes[s]);
    double f = 1.0, r = 0.0;
    for (std::uint64_t i = k; i > 0; i /= base) {
      f /= static_cast<double>(base);
      r += f * static_cast<double>(i % base);
    }
    p(s) = r;
  }
  return p;
}

namespace {

struct Worst {
  double margin = std::numeric_limits<double>::infinity();
  Vec witness;
  void offer(double m, const Vec& x) {
    if (m < margin) {
      margin = m;
      witness = x;
    }
  }
};

ValidationCheck finish(const std::string& name, const Worst& w, double tol = 0.0,
                       std::string detail = {}) {
  ValidationCheck c;
  c.name = name;
  c.margin = std::isfinite(w.margin) ? w.margin : 0.0;
  c.witness = w.witness;
  c.pass = w.margin >= -tol;
  c.detail = std::move(detail);
  return c;
}

double rel_gap(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const double scale = std::max(1.0, std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff()));
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

}  // namespace

ValidationReport validate_model(const ModelSpec& spec, const SampleBox& box, int n_samples,
                                std::uint64_t seed) {
  if (n_samples < 1) throw ConfigError("n_samples must be >= 1");
  const int n = spec.dim();
  if (box.lo.size() != n || box.hi.size() != n) throw ConfigError("sample box dimension mismatch");
  if (((box.hi - box.lo).array() <= 0.0).any()) throw ConfigError("sample box is degenerate");

  ValidationReport report;
  const int m = spec.m, d = spec.d;

  {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(spec.sigma));
    const auto& s = svd.singularValues();
    const double cond = s(s.size() - 1) > 0.0 ? s(0) / s(s.size() - 1)
                                               : std::numeric_limits<double>::infinity();
    ValidationCheck c;
    c.name = "sigma_invertible";
    c.margin = std::log10(spec.sigma_condition_cap) - std::log10(cond);
    c.pass = std::isfinite(cond) && cond < spec.sigma_condition_cap;
    c.detail = "condition number " + std::to_string(cond);
    report.checks.push_back(c);
  }

  std::vector<Vec> points;
  points.reserve(n_samples);
  // Skip the first few Halton indices (they hug the origin corner).
  for (int k = 0; k < n_samples; ++k) {
    const Vec u = halton_point(static_cast<std::uint64_t>(k) + 20 + seed % 1000, n);
    points.push_back(box.lo + (box.hi - box.lo).cwiseProduct(u));
  }

  // Jacobian consistency against central differences.
  {
    Worst w;
    for (const Vec& x : points) {
      const SMat g = spec.jacobian(x);
      SMat fd(n, n);
      for (int s = 0; s < n; ++s) {
        const double h = 1e-5 * (1.0 + std::abs(x(s)));
        Vec xp = x, xm = x;
        xp(s) += h;
        xm(s) -= h;
        fd.col(s) = (spec.drift(xp) - spec.drift(xm)) / (2.0 * h);
      }
      w.offer(1e-5 - rel_gap(g, fd), x);
    }
    report.checks.push_back(finish("jacobian_consistency", w));
  }

  if (spec.hess_z1) {
    Worst w;
    for (const Vec& x : points) {
      const Z1Hessian hz = spec.hess_z1(x);
      double worst = 0.0;
      for (int s = 0; s < n; ++s) {
        const double h = 1e-5 * (1.0 + std::abs(x(s)));
        Vec xp = x, xm = x;
        xp(s) += h;
        xm(s) -= h;
        const Z1Jacobian jp = spec.jac_z1(xp), jm = spec.jac_z1(xm);
        Vec e = Vec::Zero(n);
        e(s) = 1.0;
        const Z1Variation dv = vary(hz, m, d, e);
        worst = std::max(worst, rel_gap(dv.da1, (jp.a1 - jm.a1) / (2.0 * h)));
        worst = std::max(worst, rel_gap(dv.dc, (jp.c - jm.c) / (2.0 * h)));
      }
      w.offer(1e-5 - worst, x);
    }
    report.checks.push_back(finish("hessian_consistency", w));
  }

  // Domination of B = ∇^(2)Z^(1) − B₀ by B₀.
  {
    Worst w;
    NormalStream dirs(seed, 0, 0x646f6dU);
    for (const Vec& x : points) {
      const BMat b = spec.split_b(x);
      for (int k = 0; k < 2 * m; ++k) {
        BVec a = BVec::Zero(m);
        if (k < m) {
          a(k) = 1.0;
        } else {
          for (int r = 0; r < m; ++r) a(r) = dirs.next();
          a.normalize();
        }
        const BVec b0a = spec.b0.transpose() * a;
        const double lhs = a.dot(b * b0a);
        w.offer(lhs + spec.epsilon * b0a.squaredNorm(), x);
      }
    }
    report.checks.push_back(finish("domination", w, 1e-12));
  }

  if (spec.adapted_asserted) {
    Worst w;
    const Vec centre = 0.5 * (box.lo + box.hi);
    const Z1Jacobian ref = spec.jac_z1(centre);
    for (const Vec& x : points) {
      const Z1Jacobian j = spec.jac_z1(x);
      const double gap = std::max(rel_gap(j.a1, ref.a1), rel_gap(j.c, spec.b0));
      w.offer(1e-9 - gap, x);
    }
    report.checks.push_back(finish("adapted_structure", w));
  }

  if (spec.hypothesis) {
    const HypothesisData& hy = *spec.hypothesis;
    const SMat ss = spec.sigma * spec.sigma.transpose();
    Worst w_pos, w_lw, w_grad, w_growth;
    for (const Vec& x : points) {
      const double wx = hy.w(x);
      w_pos.offer(wx - 1.0, x);
      Vec gradw(n);
      SMat hyy(d, d);
      for (int s = 0; s < n; ++s) {
        const double h = 1e-4 * (1.0 + std::abs(x(s)));
        Vec xp = x, xm = x;
        xp(s) += h;
        xm(s) -= h;
        gradw(s) = (hy.w(xp) - hy.w(xm)) / (2.0 * h);
      }
      for (int r = 0; r < d; ++r) {
        for (int q = 0; q < d; ++q) {
          const int ir = m + r, iq = m + q;
          const double hr = 1e-4 * (1.0 + std::abs(x(ir)));
          const double hq = 1e-4 * (1.0 + std::abs(x(iq)));
          auto at = [&](double sr, double sq) {
            Vec z = x;
            z(ir) += sr * hr;
            z(iq) += sq * hq;
            return hy.w(z);
          };
          hyy(r, q) = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4.0 * hr * hq);
        }
      }
      const double lw = 0.5 * (ss * hyy).trace() + spec.drift(x).dot(gradw);
      const double scale = hy.c_const * wx;
      w_lw.offer((scale - lw) / scale, x);
      const BVec g2 = hy.grad2_w(x);
      w_grad.offer((scale - g2.squaredNorm()) / scale, x);
      const double jn = op_norm(spec.jacobian(x));
      const double bound = hy.c_const * std::pow(wx, hy.l1);
      w_growth.offer((bound - jn) / bound, x);
    }
    report.checks.push_back(finish("lyapunov_lower_bound", w_pos));
    report.checks.push_back(finish("generator_bound", w_lw));
    report.checks.push_back(finish("grad2_w_bound", w_grad));
    report.checks.push_back(finish("jacobian_growth", w_growth));
  }

  for (const auto& c : report.checks) report.overall = report.overall && c.pass;
  return report;
}

// ---- expression models ------------------------------------------------------

ModelSpec expression_model(const ExpressionModelDecl& decl) {
  const int m = decl.m, d = decl.d;
  if (m < 1 || d < 1 || m > kMaxBlock || d > kMaxBlock)
    throw ConfigError("expression model dimensions out of range");
  if (static_cast<int>(decl.z1.size()) != m) throw ConfigError("z1 must list m expressions");
  if (static_cast<int>(decl.z2.size()) != d) throw ConfigError("z2 must list d expressions");
  const auto names = state_variable_names(m, d);
  auto z1 = std::make_shared<std::vector<Expression>>();
  auto z2 = std::make_shared<std::vector<Expression>>();
  for (const auto& s : decl.z1) z1->push_back(Expression::parse(s, names));
  for (const auto& s : decl.z2) z2->push_back(Expression::parse(s, names));

  ModelSpec spec;
  spec.name = "expression";
  spec.m = m;
  spec.d = d;
  spec.z1 = [z1, m](const Vec& x) {
    BVec out(m);
    for (int a = 0; a < m; ++a) out(a) = (*z1)[a].eval(x, 0).v;
    return out;
  };
  spec.z2 = [z2, d](const Vec& x) {
    BVec out(d);
    for (int a = 0; a < d; ++a) out(a) = (*z2)[a].eval(x, 0).v;
    return out;
  };
  spec.jac_z1 = [z1, m, d](const Vec& x) {
    Z1Jacobian j{BMat(m, m), BMat(m, d)};
    for (int a = 0; a < m; ++a) {
      const Jet jt = (*z1)[a].eval(x, 1);
      j.a1.row(a) = jt.g.head(m).transpose();
      j.c.row(a) = jt.g.tail(d).transpose();
    }
    return j;
  };
  spec.jac_z2 = [z2, m, d](const Vec& x) {
    Z2Jacobian j{BMat(d, m), BMat(d, d)};
    for (int a = 0; a < d; ++a) {
      const Jet jt = (*z2)[a].eval(x, 1);
      j.g21.row(a) = jt.g.head(m).transpose();
      j.g22.row(a) = jt.g.tail(d).transpose();
    }
    return j;
  };
  spec.hess_z1 = [z1, m](const Vec& x) {
    Z1Hessian h;
    for (int a = 0; a < m; ++a) h.h[a] = (*z1)[a].eval(x, 2).h;
    return h;
  };
  if (decl.sigma.rows() != d || decl.sigma.cols() != d) throw ConfigError("sigma must be d x d");
  if (decl.b0.rows() != m || decl.b0.cols() != d) throw ConfigError("b0 must be m x d");
  spec.sigma = decl.sigma;
  spec.b0 = decl.b0;
  spec.epsilon = decl.epsilon;
  spec.adapted_asserted = decl.adapted;
  check_spec(spec);
  return spec;
}

// ---- JSON helpers -----------------------------------------------------------

Eigen::MatrixXd json_to_matrix(const nlohmann::json& j, const std::string& what) {
  if (j.is_number()) return Eigen::MatrixXd::Constant(1, 1, j.get<double>());
  if (!j.is_array() || j.empty()) throw ConfigError(what + ": expected a nested array");
  if (!j[0].is_array()) throw ConfigError(what + ": expected a nested array (list of rows)");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd out(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ConfigError(what + ": ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) {
      const auto& e = row[static_cast<std::size_t>(c)];
      if (!e.is_number()) throw ConfigError(what + ": non-numeric entry");
      out(r, c) = e.get<double>();
    }
  }
  return out;
}

Eigen::VectorXd json_to_vector(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array()) throw ConfigError(what + ": expected an array");
  Eigen::VectorXd out(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(what + ": non-numeric entry");
    out(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return out;
}

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(row);
  }
  return out;
}

nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

}  // namespace hypograd
