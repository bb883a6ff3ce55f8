#include "hypograd/analysis.hpp"

#include "hypograd/errors.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <boost/math/quadrature/gauss.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace hypograd {

KalmanResult kalman_index(const BMat& a, const BMat& b0) {
  const int m = static_cast<int>(b0.rows()), d = static_cast<int>(b0.cols());
  if (a.rows() != m || a.cols() != m) throw ConfigError("A must be m x m with m = rows(B0)");
  KalmanResult out;
  Eigen::MatrixXd block(m, 0);
  Eigen::MatrixXd power = b0;
  for (int j = 0; j < m; ++j) {
    Eigen::MatrixXd next(m, block.cols() + d);
    next << block, power;
    block = next;
    power = Eigen::MatrixXd(a) * power;
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(block);
    const auto& sv = svd.singularValues();
    const double norm = sv.size() > 0 ? sv[0] : 0.0;
    const double tau = m * norm * std::numeric_limits<double>::epsilon() * 64.0;
    int rank = 0;
    double smallest = 0.0;
    for (Eigen::Index q = 0; q < sv.size(); ++q) {
      if (sv[q] > tau) {
        ++rank;
        smallest = sv[q];
      }
    }
    out.ranks.push_back(rank);
    out.singular_values.push_back(smallest);
    if (!out.k && rank == m) out.k = j;
  }
  return out;
}

void fit_log_log(RateFit& fit) {
  if (fit.grid.size() != fit.values.size()) throw ConfigError("rate fit: grid and values differ in length");
  if (fit.used.size() != fit.grid.size()) fit.used.assign(fit.grid.size(), true);
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < fit.grid.size(); ++i) {
    if (!fit.used[i]) continue;
    if (!(fit.grid[i] > 0.0) || !(fit.values[i] > 0.0)) {
      fit.used[i] = false;
      continue;
    }
    xs.push_back(std::log(fit.grid[i]));
    ys.push_back(std::log(fit.values[i]));
  }
  const std::size_t n = xs.size();
  if (n < 2) throw NotApplicable("rate fit needs at least two usable points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.slope_ci = 0.0;
  if (n > 2) {
    double ssr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = ys[i] - (fit.intercept + fit.slope * xs[i]);
      ssr += r * r;
    }
    const double se = std::sqrt(ssr / static_cast<double>(n - 2) / sxx);
    const boost::math::students_t dist(static_cast<double>(n - 2));
    fit.slope_ci = boost::math::quantile(boost::math::complement(dist, 0.025)) * se;
  }
}

RateFit gramian_scaling(const BMat& a, const BMat& b0, const std::vector<double>& t_grid) {
  const KalmanResult kr = kalman_index(a, b0);
  if (!kr.k) throw NotApplicable("Kalman rank condition fails: no finite index");
  for (std::size_t i = 0; i < t_grid.size(); ++i)
    if (!(t_grid[i] > 0.0) || (i > 0 && !(t_grid[i] > t_grid[i - 1])))
      throw ConfigError("t grid must be positive and strictly increasing");
  const Eigen::MatrixXd am = a, bm = b0;
  RateFit fit;
  fit.grid = t_grid;
  for (double t : t_grid) {
    const GramianQuadrature q = quadrature_gramian(
        [&](double s) -> Eigen::MatrixXd { return expm(s * am) * bm; }, 0.0, t, 1e-8);
    fit.values.push_back(q.lambda_min);
  }
  fit.used.assign(t_grid.size(), true);
  fit_log_log(fit);
  fit.theoretical = 2.0 * *kr.k + 1.0;
  fit.pass = std::abs(fit.slope - fit.theoretical) <= 0.2;
  return fit;
}

RateSweep gradient_rate_sweep(const ModelSpec& spec, const Vec& x0, const Vec& v, const TestFunction& f,
                              const std::vector<double>& t_grid, const EstimatorConfig& cfg) {
  RateSweep out;
  const double cp = sigma_min(spec.b0);
  if (spec.b0.rows() <= spec.b0.cols() && cp > 1e-12 * std::max(1.0, op_norm(spec.b0))) {
    out.kalman_k = 0;
  } else {
    if (!spec.const_a1) throw NotApplicable("rate sweep needs Rank B0 = m or a constant first-block Jacobian");
    const KalmanResult kr = kalman_index(*spec.const_a1, spec.b0);
    if (!kr.k) throw NotApplicable("Kalman rank condition fails: no finite index");
    out.kalman_k = *kr.k;
  }
  const int k = out.kalman_k;
  out.fit.theoretical = k == 0 ? -1.5 : -(std::max(4.0 * k - 1.0, 0.0) + 1.5);
  for (std::size_t i = 0; i < t_grid.size(); ++i)
    if (!(t_grid[i] > 0.0) || (i > 0 && !(t_grid[i] > t_grid[i - 1])))
      throw ConfigError("T grid must be positive and strictly increasing");

  for (double t : t_grid) {
    const GradientEstimate g = bismut_gradient(spec, x0, v, f, TimeGrid(t, cfg.n_steps), cfg);
    out.estimates.push_back(g);
    out.fit.grid.push_back(t);
    out.fit.values.push_back(g.weight_l2);
    out.fit.std_errors.push_back(g.weight_l2_se);
    // Noise-dominated points are left out of the slope.
    out.fit.used.push_back(g.weight_l2 > 0.0 && g.weight_l2_se / g.weight_l2 <= 0.1);
  }
  fit_log_log(out.fit);
  out.fit.pass = out.fit.slope >= out.fit.theoretical - 0.25;
  return out;
}

SemigroupEstimate semigroup_moments(const ModelSpec& spec, const Vec& x0, const TestFunction& f,
                                    const std::vector<double>& p_list, const TimeGrid& grid,
                                    const EstimatorConfig& cfg, std::uint32_t family) {
  cfg.check();
  if (x0.size() != spec.dim()) throw ConfigError("x0 has the wrong dimension");
  const auto np = static_cast<std::size_t>(cfg.n_paths);
  std::vector<double> fx(np, 0.0), flogf(np, 0.0);
  std::vector<std::vector<double>> fp(p_list.size(), std::vector<double>(np, 0.0));
  std::vector<char> ok(np, 0);
  parallel_for(cfg.n_paths, cfg.threads, [&](long p) {
    const auto k = static_cast<std::size_t>(p);
    const StatePath path =
        simulate_path(spec, x0, grid, sample_noise(grid, spec.d, cfg.master_seed, k, family));
    if (!path.valid) return;
    const double val = f(path.x.back());
    if (!std::isfinite(val)) return;
    fx[k] = val;
    flogf[k] = val > 0.0 ? val * std::log(val) : 0.0;
    for (std::size_t q = 0; q < p_list.size(); ++q) fp[q][k] = std::pow(std::max(val, 0.0), p_list[q]);
    ok[k] = 1;
  });
  SemigroupEstimate out;
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < np; ++k)
    if (ok[k]) idx.push_back(k);
  out.rejected = cfg.n_paths - static_cast<long>(idx.size());
  if (static_cast<double>(out.rejected) > cfg.max_reject_fraction * cfg.n_paths)
    throw RunDegenerate("semigroup estimate: " + std::to_string(out.rejected) + " paths rejected");
  auto gather = [&](const std::vector<double>& src) {
    std::vector<double> v(idx.size());
    for (std::size_t q = 0; q < idx.size(); ++q) v[q] = src[idx[q]];
    return sample_stats(v);
  };
  out.f = gather(fx);
  out.f_log_f = gather(flogf);
  for (const auto& col : fp) out.f_pow.push_back(gather(col));
  return out;
}

namespace {

void require_positive(const TestFunction& f, const Vec& probe) {
  if (!(f(probe) > 0.0)) throw MethodMisuse("test function must be strictly positive");
}

void require_constant_b(const ModelSpec& spec) {
  if (!spec.const_c) throw NotApplicable("needs a constant second-block Jacobian of Z^(1) (equal to B0)");
}

}  // namespace

EntropyReport entropy_gradient_check(const ModelSpec& spec, const Vec& x0, const Vec& v, const TestFunction& f,
                                     double t_final, const std::vector<double>& lambda_grid,
                                     const EstimatorConfig& cfg) {
  require_constant_b(spec);
  require_positive(f, x0);
  if (lambda_grid.empty()) throw ConfigError("lambda grid is empty");
  for (double l : lambda_grid)
    if (!(l > 0.0)) throw ConfigError("lambda values must be > 0");
  const TimeGrid grid(t_final, cfg.n_steps);
  EntropyReport rep;
  rep.gradient = bismut_gradient(spec, x0, v, f, grid, cfg);

  // Same master seed and family as the gradient run, so the paths are shared.
  const auto np = static_cast<std::size_t>(cfg.n_paths);
  std::vector<double> fx(np, 0.0), flogf(np, 0.0);
  std::vector<char> ok(np, 0);
  EstimatorConfig c = cfg;
  c.method = Method::pathwise;
  const RunContext ctx = make_context(spec, x0, v, grid, c);
  parallel_for(cfg.n_paths, cfg.threads, [&](long p) {
    const auto k = static_cast<std::size_t>(p);
    const StatePath path = simulate_path(spec, x0, grid, path_noise(ctx, p));
    if (!path.valid) return;
    const double val = f(path.x.back());
    if (!(val > 0.0) || !std::isfinite(val)) {
      if (std::isfinite(val) && val <= 0.0) ok[k] = 2;
      return;
    }
    fx[k] = val;
    flogf[k] = val * std::log(val);
    ok[k] = 1;
  });
  for (char o : ok)
    if (o == 2) throw MethodMisuse("test function is not strictly positive along the paths");
  std::vector<double> a, b;
  for (std::size_t k = 0; k < np; ++k) {
    if (ok[k] != 1) continue;
    a.push_back(fx[k]);
    b.push_back(flogf[k]);
  }
  const SampleStats sf = sample_stats(a), sfl = sample_stats(b);
  rep.p_tf = sf.mean;
  rep.p_tf_se = sf.std_error;
  const double ent = sfl.mean - sf.mean * std::log(sf.mean);
  // Delta method: the entropy term linearizes to f log f − (log P_T f + 1) f per path.
  std::vector<double> lin(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) lin[k] = b[k] - (std::log(sf.mean) + 1.0) * a[k];
  rep.entropy_se = sample_stats(lin).std_error;

  const double lhs = std::abs(rep.gradient.value);
  rep.fitted_a = 0.0;
  for (double l : lambda_grid) {
    EntropyRow row;
    row.lambda = l;
    row.lhs = lhs;
    row.entropy_term = ent;
    row.gamma_hat = (lhs - l * ent) / sf.mean;
    row.gamma_se = std::sqrt(rep.gradient.std_error * rep.gradient.std_error +
                             l * l * rep.entropy_se * rep.entropy_se) / sf.mean;
    rep.fitted_a = std::max(rep.fitted_a, l * row.gamma_hat);
    rep.rows.push_back(row);
  }
  return rep;
}

double harnack_bracket(const Vec& x, const Vec& v, double p, double t_final, int k, double l1,
                       const std::function<double(const Vec&)>& w) {
  if (!(p > 1.0)) throw ConfigError("Harnack exponent p must be > 1");
  if (!(l1 >= 0.0 && l1 < 0.5)) throw NotApplicable("Harnack shape implemented for l1 in [0, 1/2)");
  const double nv = v.norm();
  const double tm = std::min(t_final, 1.0);
  double w_bar = 0.0;
  if (l1 > 0.0) {
    if (!w) throw ConfigError("Harnack bracket with l1 > 0 needs the Lyapunov function W");
    w_bar = boost::math::quadrature::gauss<double, 16>::integrate(
        [&](double s) { return w(Vec(x + s * v)); }, 0.0, 1.0);
  }
  const double e1 = 4.0 * l1 / (1.0 - 2.0 * l1);
  const double e2 = (4.0 * k + 2.0 - 2.0 * l1) / (1.0 - 2.0 * l1);
  const double inner = l1 * (p - 1.0) * w_bar / (p - 1.0 + nv) +
                       std::pow(1.0 + p * nv / (p - 1.0), e1) / std::pow(tm, e2) + 1.0 / std::pow(tm, 4.0 * k + 3.0);
  return nv * nv / (p - 1.0) * inner;
}

double gaussian_exp_quadratic(const Vec& mu, const SMat& cov, const Vec& c, double a) {
  const int n = static_cast<int>(mu.size());
  const Eigen::MatrixXd s = Eigen::MatrixXd::Identity(n, n) + 2.0 * a * Eigen::MatrixXd(cov);
  const Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success) throw ModelError("I + 2aΣ is not positive definite");
  const Eigen::VectorXd r = Eigen::VectorXd(mu - c);
  double logdet = 0.0;
  for (int i = 0; i < n; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  return std::exp(-0.5 * logdet - a * r.dot(llt.solve(r)));
}

namespace {

struct StartValues {
  double f = 0.0, f_se = 0.0;
  std::vector<double> fp, fp_se;
};

HarnackPoint make_point(const Vec& x, const Vec& v, double p, std::size_t p_index, const HarnackSetup& s,
                        const StartValues& at_x, const StartValues& at_xv, const ModelSpec& spec) {
  HarnackPoint pt;
  pt.x = x;
  pt.v = v;
  pt.p = p;
  pt.t_final = s.t_final;
  pt.lhs = at_x.f;
  pt.lhs_se = at_x.f_se;
  const double m = at_xv.fp[p_index];
  pt.qterm = m > 0.0 ? std::pow(m, 1.0 / p) : 0.0;
  pt.qterm_se = m > 0.0 ? pt.qterm * at_xv.fp_se[p_index] / (p * m) : 0.0;
  std::function<double(const Vec&)> w;
  if (spec.hypothesis) w = spec.hypothesis->w;
  pt.bracket = harnack_bracket(x, v, p, s.t_final, s.kalman_k, s.l1, w);
  if (pt.lhs > 0.0 && pt.qterm > 0.0) {
    pt.log_ratio = std::log(pt.lhs / pt.qterm);
    pt.log_ratio_se = std::hypot(pt.lhs_se / pt.lhs, pt.qterm_se / pt.qterm);
  }
  return pt;
}

// Fit c on `train`, then score both sets.
void fit_and_score(HarnackReport& rep) {
  rep.fitted_c = 0.0;
  const HarnackPoint* argmax = nullptr;
  for (const auto& pt : rep.points) {
    if (!(pt.bracket > 0.0)) continue;
    const double c = pt.log_ratio / pt.bracket;
    if (c > rep.fitted_c) {
      rep.fitted_c = c;
      argmax = &pt;
    }
  }
  rep.margin = std::numeric_limits<double>::infinity();
  for (auto& pt : rep.points) {
    pt.margin = rep.fitted_c * pt.bracket - pt.log_ratio;
    rep.margin = std::min(rep.margin, pt.margin);
  }
  rep.held_out_margin = std::numeric_limits<double>::infinity();
  rep.held_out_worst_z = std::numeric_limits<double>::infinity();
  for (auto& pt : rep.held_out) {
    pt.margin = rep.fitted_c * pt.bracket - pt.log_ratio;
    double se2 = pt.log_ratio_se * pt.log_ratio_se;
    if (argmax) {
      const double scale = pt.bracket / argmax->bracket;
      se2 += scale * scale * argmax->log_ratio_se * argmax->log_ratio_se;
    }
    const double se = std::sqrt(se2);
    rep.held_out_margin = std::min(rep.held_out_margin, pt.margin + 4.0 * se);
    rep.held_out_worst_z = std::min(rep.held_out_worst_z, se > 0.0 ? pt.margin / se : (pt.margin >= 0 ? 0.0 : -1e300));
  }
  if (rep.held_out.empty()) rep.held_out_margin = rep.held_out_worst_z = 0.0;
}

void check_setup(const ModelSpec& spec, const HarnackSetup& s) {
  if (s.x.empty() || s.x.size() != s.v.size()) throw ConfigError("Harnack setup needs paired x and v lists");
  if (s.p_grid.empty()) throw ConfigError("Harnack p grid is empty");
  for (double p : s.p_grid)
    if (!(p > 1.0)) throw ConfigError("Harnack p values must be > 1");
  for (std::size_t i = 0; i < s.x.size(); ++i)
    if (s.x[i].size() != spec.dim() || s.v[i].size() != spec.dim())
      throw ConfigError("Harnack point has the wrong dimension");
  if (!(s.t_final > 0.0)) throw ConfigError("T must be > 0");
}

}  // namespace

HarnackReport harnack_check(const ModelSpec& spec, const TestFunction& f, const HarnackSetup& setup,
                            const EstimatorConfig& cfg) {
  require_constant_b(spec);
  check_setup(spec, setup);
  const TimeGrid grid(setup.t_final, cfg.n_steps);
  HarnackReport rep;

  auto estimate = [&](const Vec& start, std::uint32_t family, bool powers) {
    const SemigroupEstimate se =
        semigroup_moments(spec, start, f, powers ? setup.p_grid : std::vector<double>{}, grid, cfg, family);
    StartValues sv;
    sv.f = se.f.mean;
    sv.f_se = se.f.std_error;
    for (const auto& s : se.f_pow) {
      sv.fp.push_back(s.mean);
      sv.fp_se.push_back(s.std_error);
    }
    return sv;
  };

  // Families 21/22 train, 23/24 held out: independent noise for x, x+v and the two sets.
  for (int set = 0; set < 2; ++set) {
    auto& dest = set == 0 ? rep.points : rep.held_out;
    const auto fam = static_cast<std::uint32_t>(21 + 2 * set);
    for (std::size_t i = 0; i < setup.x.size(); ++i) {
      require_positive(f, setup.x[i]);
      const StartValues at_x = estimate(setup.x[i], fam, false);
      const StartValues at_xv = estimate(Vec(setup.x[i] + setup.v[i]), fam + 1, true);
      for (std::size_t q = 0; q < setup.p_grid.size(); ++q) {
        HarnackPoint pt = make_point(setup.x[i], setup.v[i], setup.p_grid[q], q, setup, at_x, at_xv, spec);
        if (!(pt.lhs > 0.0) || !(pt.qterm > 0.0)) {
          ++rep.dropped;
          continue;
        }
        dest.push_back(pt);
      }
    }
  }
  fit_and_score(rep);
  return rep;
}

HarnackReport harnack_oracle(const ModelSpec& spec, const TestFunction& f, const HarnackSetup& setup) {
  check_setup(spec, setup);
  if (f.tag != "gaussian_bump" || f.params.value("offset", 0.0) != 0.0)
    throw MethodMisuse("the Gaussian oracle needs a Gaussian bump without offset");
  const Vec c = json_to_vector(f.params.at("center"), "center");
  const double width = f.params.at("width").get<double>();
  const double amp = f.params.at("amp").get<double>();
  const double a = 1.0 / (2.0 * width * width);
  HarnackReport rep;
  for (std::size_t i = 0; i < setup.x.size(); ++i) {
    const GaussianLaw lx = gaussian_law(spec, setup.x[i], setup.t_final);
    const GaussianLaw lxv = gaussian_law(spec, Vec(setup.x[i] + setup.v[i]), setup.t_final);
    StartValues at_x, at_xv;
    at_x.f = amp * gaussian_exp_quadratic(lx.mean, lx.cov, c, a);
    for (double p : setup.p_grid) {
      at_xv.fp.push_back(std::pow(amp, p) * gaussian_exp_quadratic(lxv.mean, lxv.cov, c, p * a));
      at_xv.fp_se.push_back(0.0);
    }
    for (std::size_t q = 0; q < setup.p_grid.size(); ++q)
      rep.points.push_back(make_point(setup.x[i], setup.v[i], setup.p_grid[q], q, setup, at_x, at_xv, spec));
  }
  fit_and_score(rep);
  return rep;
}

}  // namespace hypograd
