#include "hypograd/estimator.hpp"

#include "hypograd/errors.hpp"
#include "hypograd/expr.hpp"
#include "hypograd/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

namespace hypograd {

using nlohmann::json;

// ---- test functions ----------------------------------------------------------

TestFunction linear_function(const Vec& a, double b) {
  TestFunction t;
  t.tag = "linear";
  t.f = [a, b](const Vec& z) { return a.dot(z) + b; };
  t.grad = [a](const Vec&) { return a; };
  t.params = {{"a", vector_to_json(a)}, {"b", b}};
  return t;
}

TestFunction quadratic_function(const SMat& w, const Vec& c) {
  TestFunction t;
  t.tag = "quadratic";
  const SMat ws = symmetrize(w);
  t.f = [ws, c](const Vec& z) {
    const Vec r = z - c;
    return r.dot(ws * r);
  };
  t.grad = [ws, c](const Vec& z) { return Vec(2.0 * (ws * (z - c))); };
  t.params = {{"W", matrix_to_json(ws)}, {"c", vector_to_json(c)}};
  return t;
}

TestFunction gaussian_bump(const Vec& c, double width, double amp, double offset) {
  if (!(width > 0.0)) throw ConfigError("gaussian_bump width must be > 0");
  TestFunction t;
  t.tag = "gaussian_bump";
  const double s = 1.0 / (2.0 * width * width);
  t.f = [c, s, amp, offset](const Vec& z) { return offset + amp * std::exp(-s * (z - c).squaredNorm()); };
  t.grad = [c, s, amp](const Vec& z) {
    const Vec r = z - c;
    return Vec(-2.0 * s * amp * std::exp(-s * r.squaredNorm()) * r);
  };
  t.params = {{"center", vector_to_json(c)}, {"width", width}, {"amp", amp}, {"offset", offset}};
  return t;
}

TestFunction indicator_function(int k, double threshold, int dim) {
  if (k < 0 || k >= dim) throw ConfigError("indicator component out of range");
  TestFunction t;
  t.tag = "indicator";
  t.f = [k, threshold](const Vec& z) { return z[k] > threshold ? 1.0 : 0.0; };
  t.params = {{"component", k}, {"threshold", threshold}};
  return t;
}

TestFunction custom_function(const std::string& expr, int m, int d) {
  const Expression e = Expression::parse(expr, state_variable_names(m, d));
  TestFunction t;
  t.tag = "custom";
  t.f = [e](const Vec& z) { return e.value(z); };
  t.grad = [e](const Vec& z) { return e.eval(z, 1).g; };
  t.params = {{"expr", expr}};
  return t;
}

namespace {

void require_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + what);
  }
}

Vec sized_vector(const json& j, int n, const std::string& what) {
  const Eigen::VectorXd v = json_to_vector(j, what);
  if (v.size() != n) throw ConfigError(what + " must have length " + std::to_string(n));
  return v;
}

}  // namespace

TestFunction test_function_from_json(const json& j, int m, int d) {
  if (!j.is_object() || !j.contains("tag")) throw ConfigError("test function needs a 'tag'");
  const std::string tag = j.at("tag").get<std::string>();
  const int n = m + d;
  if (tag == "linear") {
    require_keys(j, {"tag", "a", "b"}, "f");
    const Vec a = j.contains("a") ? sized_vector(j["a"], n, "f.a") : Vec(Vec::Zero(n));
    return linear_function(a, j.value("b", 0.0));
  }
  if (tag == "quadratic") {
    require_keys(j, {"tag", "W", "c"}, "f");
    SMat w = SMat::Identity(n, n);
    if (j.contains("W")) {
      const Eigen::MatrixXd wm = json_to_matrix(j["W"], "f.W");
      if (wm.rows() != n || wm.cols() != n) throw ConfigError("f.W must be square of size m+d");
      w = wm;
    }
    const Vec c = j.contains("c") ? sized_vector(j["c"], n, "f.c") : Vec(Vec::Zero(n));
    return quadratic_function(w, c);
  }
  if (tag == "gaussian_bump") {
    require_keys(j, {"tag", "center", "width", "amp", "offset"}, "f");
    const Vec c = j.contains("center") ? sized_vector(j["center"], n, "f.center") : Vec(Vec::Zero(n));
    return gaussian_bump(c, j.value("width", 1.0), j.value("amp", 1.0), j.value("offset", 0.0));
  }
  if (tag == "indicator") {
    require_keys(j, {"tag", "component", "threshold"}, "f");
    return indicator_function(j.value("component", 0), j.value("threshold", 0.0), n);
  }
  if (tag == "custom") {
    require_keys(j, {"tag", "expr"}, "f");
    return custom_function(j.at("expr").get<std::string>(), m, d);
  }
  throw ConfigError("unknown test function tag '" + tag + "'");
}

// ---- enums ---------------------------------------------------------------------

std::string to_string(Method m) {
  switch (m) {
    case Method::bismut_auto: return "bismut";
    case Method::bismut_ito: return "bismut_ito";
    case Method::bismut_skorokhod: return "bismut_skorokhod";
    case Method::pathwise: return "pathwise";
    case Method::finite_difference: return "finite_difference";
    case Method::closed_form: return "closed_form";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  for (Method m : {Method::bismut_auto, Method::bismut_ito, Method::bismut_skorokhod, Method::pathwise,
                   Method::finite_difference, Method::closed_form})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + s + "'");
}

std::string to_string(SkorokhodMode m) { return m == SkorokhodMode::economical ? "economical" : "full"; }

SkorokhodMode skorokhod_mode_from_string(const std::string& s) {
  if (s == "economical") return SkorokhodMode::economical;
  if (s == "full") return SkorokhodMode::full;
  throw ConfigError("unknown skorokhod mode '" + s + "'");
}

std::string to_string(XiChoice c) {
  switch (c) {
    case XiChoice::automatic: return "auto";
    case XiChoice::case1: return "case1";
    case XiChoice::case2: return "case2";
    case XiChoice::empirical: return "empirical";
  }
  return "?";
}

XiChoice xi_choice_from_string(const std::string& s) {
  for (XiChoice c : {XiChoice::automatic, XiChoice::case1, XiChoice::case2, XiChoice::empirical})
    if (to_string(c) == s) return c;
  throw ConfigError("unknown xi choice '" + s + "'");
}

void EstimatorConfig::check() const {
  if (n_paths < 2) throw ConfigError("n_paths must be >= 2");
  if (n_steps < 1) throw ConfigError("n_steps must be >= 1");
  if (!(fd_bump > 0.0)) throw ConfigError("fd_bump must be > 0");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (pilot_paths < 1) throw ConfigError("pilot_paths must be >= 1");
  if (!(moment_p >= 1.0)) throw ConfigError("moment_p must be >= 1");
  if (!(max_reject_fraction >= 0.0 && max_reject_fraction < 1.0))
    throw ConfigError("max_reject_fraction must lie in [0, 1)");
  if (antithetic && n_paths % 2 != 0) throw ConfigError("antithetic sampling needs an even n_paths");
  if (c_bound && !(*c_bound >= 0.0)) throw ConfigError("c_bound must be >= 0");
}

// ---- statistics ------------------------------------------------------------------

SampleStats sample_stats(const std::vector<double>& xs) {
  SampleStats s;
  s.n = static_cast<long>(xs.size());
  if (xs.empty()) return s;
  s.mean = pairwise_sum(xs) / static_cast<double>(xs.size());
  if (xs.size() < 2) return s;
  std::vector<double> sq(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) sq[i] = (xs[i] - s.mean) * (xs[i] - s.mean);
  s.variance = pairwise_sum(sq) / static_cast<double>(xs.size() - 1);
  s.std_error = std::sqrt(s.variance / static_cast<double>(xs.size()));
  return s;
}

namespace {

double mean_of(const std::vector<double>& xs) {
  return xs.empty() ? 0.0 : pairwise_sum(xs) / static_cast<double>(xs.size());
}

double abs_moment(const std::vector<double>& xs, std::size_t n, double p) {
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = std::pow(std::abs(xs[i]), p);
  return pairwise_sum(t) / static_cast<double>(n);
}

}  // namespace

// ---- shared machinery -------------------------------------------------------------

void parallel_for(long n, int threads, const std::function<void(long)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (long i = 0; i < n; ++i) fn(i);
    return;
  }
  const int workers = static_cast<int>(std::min<long>(threads, n));
  constexpr long kChunk = 64;
  std::atomic<long> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto body = [&] {
    for (;;) {
      const long start = next.fetch_add(kChunk);
      if (start >= n) return;
      const long stop = std::min(n, start + kChunk);
      try {
        for (long i = start; i < stop; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next.store(n);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

NoisePath path_noise(const RunContext& ctx, long path_index, std::uint32_t family) {
  const auto idx = static_cast<std::uint64_t>(path_index);
  if (ctx.cfg.antithetic)
    return sample_noise(ctx.grid, ctx.spec->d, ctx.cfg.master_seed, idx / 2, family, idx % 2 == 1);
  return sample_noise(ctx.grid, ctx.spec->d, ctx.cfg.master_seed, idx, family);
}

double sampled_c_bound(const ModelSpec& spec, const Vec& x0, const TimeGrid& grid, std::uint64_t seed,
                       int n_pilot) {
  double worst = 0.0;
  for (int p = 0; p < n_pilot; ++p) {
    const StatePath path =
        simulate_path(spec, x0, grid, sample_noise(grid, spec.d, seed, static_cast<std::uint64_t>(p), 7));
    if (!path.valid) continue;
    for (const Vec& x : path.x) worst = std::max(worst, op_norm(spec.jac_z1(x).a1));
  }
  return 1.1 * worst;
}

namespace {

bool b0_full_rank(const BMat& b0) {
  return b0.rows() <= b0.cols() && sigma_min(b0) > 1e-12 * std::max(1.0, op_norm(b0));
}

WeightProfile empirical_weights(const ModelSpec& spec, const Vec& x0, const TimeGrid& grid,
                                const EstimatorConfig& cfg, const WeightProfile& phi) {
  std::vector<std::vector<BMat>> flows;
  for (int p = 0; p < cfg.pilot_paths; ++p) {
    const StatePath path = simulate_path(
        spec, x0, grid, sample_noise(grid, spec.d, cfg.master_seed, static_cast<std::uint64_t>(p), 7));
    if (!path.valid) continue;
    const TerminalFlow f = terminal_flow(spec, path, grid);
    if (f.valid) flows.push_back(f.k);
  }
  return xi_empirical(phi, flows, spec.b0);
}

}  // namespace

WeightProfile choose_weights(const ModelSpec& spec, const Vec& x0, const TimeGrid& grid,
                             const EstimatorConfig& cfg) {
  const WeightProfile phi = phi_profile(grid, cfg.phi);
  auto case1 = [&] {
    double bound;
    if (cfg.c_bound) bound = *cfg.c_bound;
    else if (spec.const_a1) bound = op_norm(*spec.const_a1);
    else bound = sampled_c_bound(spec, x0, grid, cfg.master_seed, cfg.pilot_paths);
    return xi_case1(phi, spec.b0, bound);
  };
  auto case2 = [&] {
    if (!spec.const_a1) throw NotApplicable("case2 weight needs a constant first-block Jacobian");
    return xi_case2(phi, *spec.const_a1, spec.b0);
  };
  switch (cfg.xi) {
    case XiChoice::case1: return case1();
    case XiChoice::case2: return case2();
    case XiChoice::empirical: return empirical_weights(spec, x0, grid, cfg, phi);
    case XiChoice::automatic: break;
  }
  if (b0_full_rank(spec.b0)) {
    try {
      return case1();
    } catch (const NotApplicable&) {
    }
  }
  if (spec.const_a1) {
    try {
      return case2();
    } catch (const NotApplicable&) {
    }
  }
  return empirical_weights(spec, x0, grid, cfg, phi);
}

RunContext make_context(const ModelSpec& spec, const Vec& x0, const Vec& v, const TimeGrid& grid,
                        const EstimatorConfig& cfg) {
  check_spec(spec);
  cfg.check();
  if (x0.size() != spec.dim()) throw ConfigError("x0 has the wrong dimension");
  if (v.size() != spec.dim()) throw ConfigError("v has the wrong dimension");
  if (grid.n_steps != cfg.n_steps) throw ConfigError("grid and estimator disagree on n_steps");
  RunContext ctx;
  ctx.spec = &spec;
  ctx.x0 = x0;
  ctx.v = v;
  ctx.grid = grid;
  ctx.cfg = cfg;
  ctx.sigma_inv = spec.sigma.inverse();
  const bool needs_weights = cfg.method == Method::bismut_auto || cfg.method == Method::bismut_ito ||
                             cfg.method == Method::bismut_skorokhod;
  if (needs_weights) ctx.weights = choose_weights(spec, x0, grid, cfg);
  return ctx;
}

double ito_sum(const std::vector<BVec>& h_dot, const NoisePath& noise) {
  if (static_cast<Eigen::Index>(h_dot.size()) != noise.increments.rows())
    throw ConfigError("h_dot and noise lengths differ");
  std::vector<double> terms(h_dot.size());
  for (std::size_t i = 0; i < h_dot.size(); ++i)
    terms[i] = h_dot[i].dot(noise.increments.row(static_cast<Eigen::Index>(i)).transpose());
  return pairwise_sum(terms);
}

double ito_delta(const ModelSpec& spec, const std::vector<BVec>& h_dot, const NoisePath& noise) {
  if (!spec.adapted()) throw MethodMisuse("Ito divergence requested for a model that is not adapted");
  return ito_sum(h_dot, noise);
}

PathControl path_control(const RunContext& ctx, const NoisePath& noise) {
  PathControl pc;
  const int n = ctx.grid.n_steps;
  pc.path = simulate_path(*ctx.spec, ctx.x0, ctx.grid, noise);
  if (!pc.path.valid) throw PathDegenerate("non-finite state", pc.path.failed_step);
  pc.lin = linearize(*ctx.spec, pc.path, n);
  pc.flow = terminal_flow(pc.lin.a1, ctx.grid.dt());
  if (!pc.flow.valid) throw PathDegenerate("non-finite flow", pc.flow.failed_step);
  ControlInputs in;
  in.grid = &ctx.grid;
  in.weights = &ctx.weights;
  in.b0 = &ctx.spec->b0;
  in.k_flow = &pc.flow.k;
  in.lin = &pc.lin;
  in.v = ctx.v;
  pc.control = build_control(in, ctx.sigma_inv);
  for (int i = 0; i < n; ++i)
    if (!pc.control.h_dot[i].allFinite()) throw PathDegenerate("non-finite control", static_cast<std::size_t>(i));
  return pc;
}

// ---- Bismut estimator -----------------------------------------------------------------

namespace {

struct Outcome {
  bool ok = false;
  double fx = 0.0;
  double delta = 0.0;
  double a0 = 0.0, an = 0.0, gn = 0.0, gap = 0.0, shift = 0.0;
  bool regularized = false;
  bool fallback = false;
  double qinv_margin = std::numeric_limits<double>::infinity();
  double order_margin = std::numeric_limits<double>::infinity();
};

// Control pieces that do not depend on the path when ∇Z^(1) is constant.
struct FixedControl {
  bool active = false;
  ControlData control;
  std::vector<BMat> k;
  bool hdot_fixed = false;  // Z^(2) affine as well
};

FixedControl fixed_control(const RunContext& ctx) {
  FixedControl fc;
  const ModelSpec& spec = *ctx.spec;
  if (!(spec.const_a1 && spec.const_c)) return fc;
  const int n = ctx.grid.n_steps;
  PathLinearization lin;
  lin.a1.assign(static_cast<std::size_t>(n), *spec.const_a1);
  lin.c.assign(static_cast<std::size_t>(n), spec.b0);
  const TerminalFlow flow = terminal_flow(lin.a1, ctx.grid.dt());
  if (!flow.valid) throw ModelError("deterministic flow is not finite");
  fc.k = flow.k;
  ControlInputs in;
  in.grid = &ctx.grid;
  in.weights = &ctx.weights;
  in.b0 = &spec.b0;
  in.k_flow = &fc.k;
  in.lin = &lin;
  in.v = ctx.v;
  build_alpha(in, fc.control);
  // g depends only on A1, C and α here; ḣ needs ∇Z^(2) along the path.
  const double dt = ctx.grid.dt();
  fc.control.g.resize(static_cast<std::size_t>(n) + 1);
  fc.control.g[0] = ctx.v.head(spec.m);
  for (int i = 0; i < n; ++i)
    fc.control.g[i + 1] = fc.control.g[i] + dt * (lin.a1[i] * fc.control.g[i] + lin.c[i] * fc.control.alpha[i]);
  fc.control.residual_gN = fc.control.g[n].norm();
  if (spec.linear()) {
    const Z2Jacobian j2 = spec.jac_z2(ctx.x0);
    fc.control.h_dot.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      fc.control.h_dot[i] = ctx.sigma_inv * (j2.g21 * fc.control.g[i] + j2.g22 * fc.control.alpha[i] -
                                             fc.control.alpha_dot[i]);
    fc.hdot_fixed = true;
  }
  fc.active = true;
  return fc;
}

std::vector<BVec> unit_probes(const RunContext& ctx) {
  const int m = ctx.spec->m;
  NormalStream ns(ctx.cfg.master_seed, 0, 11);
  std::vector<BVec> out;
  for (int q = 0; q < 16; ++q) {
    BVec a(m);
    for (int r = 0; r < m; ++r) a[r] = ns.next();
    out.push_back(a / a.norm());
  }
  return out;
}

void gramian_diagnostics(const RunContext& ctx, const std::vector<BMat>& k, const ControlData& ctl,
                         const std::vector<BVec>& probes, Outcome& o) {
  const WeightProfile& wp = ctx.weights;
  const double eps = ctx.spec->epsilon;
  const auto ms = gramian_m_sequence(k, ctx.spec->b0, wp);
  for (int i = 1; i <= ctx.grid.n_steps; ++i) {
    const BMat& q = ctl.q[i];
    if (wp.xi[i] > 0.0) {
      const double qinv_norm = 1.0 / sigma_min(q);
      const double bound = (1.0 + 1e-6) / ((1.0 - eps) * wp.xi[i]);
      o.qinv_margin = std::min(o.qinv_margin, 1.0 - qinv_norm / bound);
    }
    for (const BVec& a : probes) {
      const double lhs = a.dot(q * a);
      const double rhs = (1.0 - eps) * a.dot(ms[i] * a);
      o.order_margin = std::min(o.order_margin, lhs - rhs + 1e-9);
    }
  }
}

void record_control(const ControlData& c, Outcome& o) {
  o.a0 = c.residual_alpha0;
  o.an = c.residual_alphaN;
  o.gn = c.residual_gN;
  o.gap = c.alpha_dot_gap;
  o.shift = c.max_shift;
  o.regularized = c.n_regularized > 0;
}

long check_rejections(const EstimatorConfig& cfg, long rejected, const std::string& what) {
  if (static_cast<double>(rejected) > cfg.max_reject_fraction * cfg.n_paths)
    throw RunDegenerate(what + ": " + std::to_string(rejected) + " of " + std::to_string(cfg.n_paths) +
                        " paths rejected");
  return rejected;
}

// Accepted indices; with antithetic pairing a rejected path drops its partner.
std::vector<std::size_t> accepted_indices(const std::vector<char>& ok, bool antithetic) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ok.size(); ++i) {
    if (antithetic) {
      const std::size_t mate = i ^ 1u;
      if (ok[i] && mate < ok.size() && ok[mate]) idx.push_back(i);
    } else if (ok[i]) {
      idx.push_back(i);
    }
  }
  return idx;
}

// Mean and SE of per-path values; antithetic pairs are averaged before the SE.
SampleStats path_stats(const std::vector<double>& vals, bool antithetic) {
  if (!antithetic) return sample_stats(vals);
  std::vector<double> pairs(vals.size() / 2);
  for (std::size_t k = 0; k < pairs.size(); ++k) pairs[k] = 0.5 * (vals[2 * k] + vals[2 * k + 1]);
  SampleStats s = sample_stats(pairs);
  s.n = static_cast<long>(vals.size());
  return s;
}

GradientEstimate summarize_weighted(const RunContext& ctx, const std::vector<Outcome>& out, Method method) {
  const EstimatorConfig& cfg = ctx.cfg;
  std::vector<char> ok(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) ok[i] = out[i].ok ? 1 : 0;
  const auto idx = accepted_indices(ok, cfg.antithetic);
  GradientEstimate g;
  g.method = method;
  g.n_effective = static_cast<long>(idx.size());
  g.rejected = cfg.n_paths - g.n_effective;
  check_rejections(cfg, g.rejected, "bismut estimator");
  if (idx.size() < 2) throw RunDegenerate("fewer than two accepted paths");

  std::vector<double> y(idx.size()), w(idx.size()), w2(idx.size()), fx(idx.size());
  g.min_qinv_margin = std::numeric_limits<double>::infinity();
  g.min_order_margin = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Outcome& o = out[idx[k]];
    y[k] = o.fx * o.delta;
    w[k] = o.delta;
    w2[k] = o.delta * o.delta;
    fx[k] = o.fx;
    g.max_alpha0_residual = std::max(g.max_alpha0_residual, o.a0);
    g.max_alphaN_residual = std::max(g.max_alphaN_residual, o.an);
    g.max_gN = std::max(g.max_gN, o.gn);
    g.max_alpha_dot_gap = std::max(g.max_alpha_dot_gap, o.gap);
    g.max_shift = std::max(g.max_shift, o.shift);
    g.regularized_paths += o.regularized ? 1 : 0;
    g.trace_fallbacks += o.fallback ? 1 : 0;
    g.min_qinv_margin = std::min(g.min_qinv_margin, o.qinv_margin);
    g.min_order_margin = std::min(g.min_order_margin, o.order_margin);
  }
  if (!cfg.gramian_diagnostics) g.min_qinv_margin = g.min_order_margin = 0.0;

  const SampleStats sy = path_stats(y, cfg.antithetic);
  const SampleStats sw = path_stats(w, cfg.antithetic);
  g.value = sy.mean;
  g.std_error = sy.std_error;
  g.weight_mean = sw.mean;
  g.weight_se = sw.std_error;
  g.weight_l2 = std::sqrt(mean_of(w2));
  if (g.weight_l2 > 0.0) g.weight_l2_se = sample_stats(w2).std_error / (2.0 * g.weight_l2);
  g.mean_f = mean_of(fx);

  g.value_cv = g.value;
  g.std_error_cv = g.std_error;
  if (!cfg.antithetic && sw.variance > 0.0) {
    std::vector<double> cross(y.size());
    for (std::size_t k = 0; k < y.size(); ++k) cross[k] = (y[k] - sy.mean) * (w[k] - sw.mean);
    const double cov = pairwise_sum(cross) / static_cast<double>(y.size() - 1);
    const double beta = cov / sw.variance;
    std::vector<double> adj(y.size());
    for (std::size_t k = 0; k < y.size(); ++k) adj[k] = y[k] - beta * w[k];
    const SampleStats sa = sample_stats(adj);
    g.value_cv = sa.mean;
    g.std_error_cv = sa.std_error;
  }

  if (sw.variance > 0.0) {
    std::vector<double> c4(w.size());
    for (std::size_t k = 0; k < w.size(); ++k) c4[k] = std::pow(w[k] - sw.mean, 4);
    const double m2 = sw.variance * static_cast<double>(w.size() - 1) / static_cast<double>(w.size());
    g.weight_kurtosis = mean_of(c4) / (m2 * m2);
  }
  // The p-th moment estimate should settle as the sample doubles; a change of
  // more than 10% over the last doubling flags a possibly infinite moment.
  if (w.size() >= 16) {
    const double full = abs_moment(w, w.size(), cfg.moment_p);
    const double half = abs_moment(w, w.size() / 2, cfg.moment_p);
    g.moment_flag = full > 0.0 && std::abs(full - half) / full > 0.1;
  }
  return g;
}

}  // namespace

GradientEstimate bismut_gradient(const RunContext& ctx, const TestFunction& f) {
  const ModelSpec& spec = *ctx.spec;
  Method method = ctx.cfg.method;
  if (method == Method::bismut_auto) method = spec.adapted() ? Method::bismut_ito : Method::bismut_skorokhod;
  if (method == Method::bismut_ito && !spec.adapted())
    throw MethodMisuse("bismut_ito requested for a model that is not adapted");
  if (method != Method::bismut_ito && method != Method::bismut_skorokhod)
    throw MethodMisuse("bismut_gradient called with a non-Bismut method");

  const FixedControl fixed = fixed_control(ctx);
  const bool use_fixed = fixed.active && method == Method::bismut_ito;
  const std::vector<BVec> probes = unit_probes(ctx);
  const int n = ctx.grid.n_steps;

  std::vector<Outcome> out(static_cast<std::size_t>(ctx.cfg.n_paths));
  parallel_for(ctx.cfg.n_paths, ctx.cfg.threads, [&](long p) {
    Outcome& o = out[static_cast<std::size_t>(p)];
    const NoisePath noise = path_noise(ctx, p);
    try {
      if (use_fixed) {
        const StatePath path = simulate_path(spec, ctx.x0, ctx.grid, noise);
        if (!path.valid) return;
        const ControlData& c = fixed.control;
        double delta;
        if (fixed.hdot_fixed) {
          delta = ito_sum(c.h_dot, noise);
        } else {
          std::vector<BVec> hd(static_cast<std::size_t>(n));
          for (int i = 0; i < n; ++i) {
            const Z2Jacobian j2 = spec.jac_z2(path.x[i]);
            hd[i] = ctx.sigma_inv * (j2.g21 * c.g[i] + j2.g22 * c.alpha[i] - c.alpha_dot[i]);
          }
          delta = ito_sum(hd, noise);
        }
        if (!std::isfinite(delta)) return;
        record_control(c, o);
        if (ctx.cfg.gramian_diagnostics) gramian_diagnostics(ctx, fixed.k, c, probes, o);
        o.fx = f(path.x.back());
        o.delta = delta;
      } else {
        const PathControl pc = path_control(ctx, noise);
        record_control(pc.control, o);
        if (method == Method::bismut_ito) {
          o.delta = ito_sum(pc.control.h_dot, noise);
        } else {
          const SkorokhodResult sr = skorokhod_delta(ctx, pc, noise);
          o.delta = sr.delta;
          o.fallback = sr.fell_back;
        }
        if (ctx.cfg.gramian_diagnostics) gramian_diagnostics(ctx, pc.flow.k, pc.control, probes, o);
        o.fx = f(pc.path.x.back());
      }
      o.ok = std::isfinite(o.fx) && std::isfinite(o.delta);
    } catch (const PathDegenerate&) {
      o.ok = false;
    }
  });
  return summarize_weighted(ctx, out, method);
}

GradientEstimate bismut_gradient(const ModelSpec& spec, const Vec& x0, const Vec& v, const TestFunction& f,
                                 const TimeGrid& grid, const EstimatorConfig& cfg) {
  EstimatorConfig c = cfg;
  if (c.method != Method::bismut_ito && c.method != Method::bismut_skorokhod) c.method = Method::bismut_auto;
  const RunContext ctx = make_context(spec, x0, v, grid, c);
  return bismut_gradient(ctx, f);
}

// ---- oracles ----------------------------------------------------------------------------

namespace {

GradientEstimate summarize_plain(const EstimatorConfig& cfg, const std::vector<double>& vals,
                                 const std::vector<char>& ok, Method method) {
  const auto idx = accepted_indices(ok, cfg.antithetic);
  GradientEstimate g;
  g.method = method;
  g.n_effective = static_cast<long>(idx.size());
  g.rejected = cfg.n_paths - g.n_effective;
  check_rejections(cfg, g.rejected, to_string(method));
  std::vector<double> kept(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) kept[k] = vals[idx[k]];
  const SampleStats s = path_stats(kept, cfg.antithetic);
  g.value = s.mean;
  g.std_error = s.std_error;
  g.value_cv = g.value;
  g.std_error_cv = g.std_error;
  return g;
}

}  // namespace

GradientEstimate pathwise_gradient(const ModelSpec& spec, const Vec& x0, const Vec& v, const TestFunction& f,
                                   const TimeGrid& grid, const EstimatorConfig& cfg) {
  if (!f.differentiable()) throw MethodMisuse("pathwise gradient needs a differentiable test function");
  EstimatorConfig c = cfg;
  c.method = Method::pathwise;
  const RunContext ctx = make_context(spec, x0, v, grid, c);
  std::vector<double> vals(static_cast<std::size_t>(c.n_paths), 0.0);
  std::vector<char> ok(vals.size(), 0);
  parallel_for(c.n_paths, c.threads, [&](long p) {
    const NoisePath noise = path_noise(ctx, p);
    const StatePath path = simulate_path(spec, x0, grid, noise);
    if (!path.valid) return;
    const JacobianPath jp = directional_jacobian(spec, path, grid, v);
    if (!jp.valid) return;
    const double val = f.grad(path.x.back()).dot(jp.j.back());
    if (!std::isfinite(val)) return;
    vals[static_cast<std::size_t>(p)] = val;
    ok[static_cast<std::size_t>(p)] = 1;
  });
  return summarize_plain(c, vals, ok, Method::pathwise);
}

GradientEstimate fd_gradient(const ModelSpec& spec, const Vec& x0, const Vec& v, const TestFunction& f,
                             const TimeGrid& grid, const EstimatorConfig& cfg) {
  EstimatorConfig c = cfg;
  c.method = Method::finite_difference;
  const RunContext ctx = make_context(spec, x0, v, grid, c);
  const double eta = c.fd_bump;
  const Vec xp = x0 + eta * v, xm = x0 - eta * v;
  std::vector<double> vals(static_cast<std::size_t>(c.n_paths), 0.0);
  std::vector<char> ok(vals.size(), 0);
  parallel_for(c.n_paths, c.threads, [&](long p) {
    const NoisePath noise = path_noise(ctx, p);
    const StatePath up = simulate_path(spec, xp, grid, noise);
    const StatePath dn = simulate_path(spec, xm, grid, noise);
    if (!up.valid || !dn.valid) return;
    const double val = (f(up.x.back()) - f(dn.x.back())) / (2.0 * eta);
    if (!std::isfinite(val)) return;
    vals[static_cast<std::size_t>(p)] = val;
    ok[static_cast<std::size_t>(p)] = 1;
  });
  return summarize_plain(c, vals, ok, Method::finite_difference);
}

GaussianLaw gaussian_law(const ModelSpec& spec, const Vec& x0, double t_final) {
  if (!spec.linear()) throw MethodMisuse("closed form needs an affine model");
  if (!(t_final > 0.0)) throw ConfigError("T must be > 0");
  const int n = spec.dim();
  const Eigen::MatrixXd g = *spec.linear_g;
  Eigen::MatrixXd aug = Eigen::MatrixXd::Zero(n + 1, n + 1);
  aug.topLeftCorner(n, n) = g;
  aug.topRightCorner(n, 1) = spec.linear_b.size() == n ? Eigen::VectorXd(spec.linear_b) : Eigen::VectorXd::Zero(n);
  const Eigen::MatrixXd e = expm(t_final * aug);
  GaussianLaw law;
  law.flow = e.topLeftCorner(n, n);
  law.mean = law.flow * x0 + Vec(e.topRightCorner(n, 1));
  Eigen::MatrixXd noise_factor = Eigen::MatrixXd::Zero(n, spec.d);
  noise_factor.bottomRows(spec.d) = spec.sigma;
  const GramianQuadrature q = quadrature_gramian(
      [&](double s) -> Eigen::MatrixXd { return expm(s * g) * noise_factor; }, 0.0, t_final, 1e-10);
  law.cov = symmetrize(SMat(q.value));
  return law;
}

double closed_form_gradient(const ModelSpec& spec, const Vec& x0, const Vec& v, const TestFunction& f,
                            double t_final) {
  if (!spec.linear()) throw MethodMisuse("closed form needs an affine model");
  if (v.size() != spec.dim() || x0.size() != spec.dim()) throw ConfigError("x0/v have the wrong dimension");
  const int n = spec.dim();
  Eigen::MatrixXd aug = Eigen::MatrixXd::Zero(n + 1, n + 1);
  aug.topLeftCorner(n, n) = Eigen::MatrixXd(*spec.linear_g);
  if (spec.linear_b.size() == n) aug.topRightCorner(n, 1) = Eigen::VectorXd(spec.linear_b);
  const Eigen::MatrixXd e = expm(t_final * aug);
  const Vec flow_v = Vec(e.topLeftCorner(n, n) * Eigen::VectorXd(v));
  const Vec mean = Vec(e.topLeftCorner(n, n) * Eigen::VectorXd(x0) + e.topRightCorner(n, 1));
  if (f.tag == "linear") return sized_vector(f.params.at("a"), n, "f.a").dot(flow_v);
  if (f.tag == "quadratic") {
    const Eigen::MatrixXd w = json_to_matrix(f.params.at("W"), "f.W");
    const Vec c = sized_vector(f.params.at("c"), n, "f.c");
    return 2.0 * (mean - c).dot(Vec(w * Eigen::VectorXd(flow_v)));
  }
  throw MethodMisuse("closed form supports linear and quadratic test functions only");
}

GradientEstimate estimate_gradient(const ModelSpec& spec, const Vec& x0, const Vec& v, const TestFunction& f,
                                   const TimeGrid& grid, const EstimatorConfig& cfg) {
  switch (cfg.method) {
    case Method::bismut_auto:
    case Method::bismut_ito:
    case Method::bismut_skorokhod: return bismut_gradient(spec, x0, v, f, grid, cfg);
    case Method::pathwise: return pathwise_gradient(spec, x0, v, f, grid, cfg);
    case Method::finite_difference: return fd_gradient(spec, x0, v, f, grid, cfg);
    case Method::closed_form: {
      cfg.check();
      GradientEstimate g;
      g.method = Method::closed_form;
      g.value = g.value_cv = closed_form_gradient(spec, x0, v, f, grid.t_final);
      g.n_effective = cfg.n_paths;
      return g;
    }
  }
  throw ConfigError("unknown method");
}

DualityResult duality_check(const ModelSpec& spec, const Vec& x0, const Vec& v, const TestFunction& F,
                            const TimeGrid& grid, const EstimatorConfig& cfg) {
  if (!F.differentiable()) throw MethodMisuse("duality check needs a differentiable F");
  EstimatorConfig c = cfg;
  if (c.method != Method::bismut_ito) c.method = Method::bismut_skorokhod;
  if (c.method == Method::bismut_ito && !spec.adapted())
    throw MethodMisuse("Ito divergence requested for a model that is not adapted");
  const RunContext ctx = make_context(spec, x0, v, grid, c);
  const double dt = grid.dt();
  const auto np = static_cast<std::size_t>(c.n_paths);
  std::vector<double> lhs(np, 0.0), rhs(np, 0.0);
  std::vector<char> ok(np, 0);
  parallel_for(c.n_paths, c.threads, [&](long p) {
    const NoisePath noise = path_noise(ctx, p);
    try {
      const PathControl pc = path_control(ctx, noise);
      const double delta = c.method == Method::bismut_ito ? ito_sum(pc.control.h_dot, noise)
                                                          : skorokhod_delta(ctx, pc, noise).delta;
      const Vec& xn = pc.path.x.back();
      const auto dF = terminal_noise_gradient(ctx, pc.path, F.grad(xn));
      std::vector<double> terms(dF.size());
      for (std::size_t i = 0; i < dF.size(); ++i) terms[i] = dF[i].dot(pc.control.h_dot[i]) * dt;
      const auto k = static_cast<std::size_t>(p);
      lhs[k] = F(xn) * delta;
      rhs[k] = pairwise_sum(terms);
      ok[k] = std::isfinite(lhs[k]) && std::isfinite(rhs[k]) ? 1 : 0;
    } catch (const PathDegenerate&) {
    }
  });
  const auto idx = accepted_indices(ok, c.antithetic);
  DualityResult out;
  out.rejected = c.n_paths - static_cast<long>(idx.size());
  check_rejections(c, out.rejected, "duality check");
  std::vector<double> l(idx.size()), r(idx.size()), dd(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    l[k] = lhs[idx[k]];
    r[k] = rhs[idx[k]];
    dd[k] = l[k] - r[k];
  }
  out.lhs = path_stats(l, c.antithetic);
  out.rhs = path_stats(r, c.antithetic);
  out.diff = path_stats(dd, c.antithetic);
  out.z_score = out.diff.std_error > 0.0 ? std::abs(out.diff.mean) / out.diff.std_error
                                         : (out.diff.mean == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
  return out;
}

}  // namespace hypograd
