#include "hypograd/runner.hpp"

#include "hypograd/analysis.hpp"
#include "hypograd/errors.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace hypograd {

using nlohmann::json;

namespace {

void put(ResultRecord& r, const std::string& key, double x) {
  if (std::isfinite(x)) r.metrics[key] = x;
  else r.omitted.push_back(key);
}

ResultRecord make_record(const ExperimentConfig& cfg, const std::string& hash, const std::string& label) {
  ResultRecord r;
  r.config_hash = hash;
  r.run_id = sha256_hex(hash + ":" + label).substr(0, 12);
  r.experiment = to_string(cfg.experiment);
  r.label = label;
  r.echo = to_json(cfg);
  r.echo.erase("output");
  if (r.echo.contains("estimator")) r.echo["estimator"].erase("threads");
  r.details = json::object();
  return r;
}

void put_estimate(ResultRecord& r, const GradientEstimate& g) {
  put(r, "value", g.value);
  put(r, "std_error", g.std_error);
  put(r, "n_effective", static_cast<double>(g.n_effective));
  put(r, "rejected", static_cast<double>(g.rejected));
  put(r, "mean_f", g.mean_f);
  const bool weighted = g.method == Method::bismut_ito || g.method == Method::bismut_skorokhod;
  if (!weighted) return;
  put(r, "weight_l2", g.weight_l2);
  put(r, "weight_l2_se", g.weight_l2_se);
  put(r, "weight_mean", g.weight_mean);
  put(r, "weight_se", g.weight_se);
  put(r, "value_cv", g.value_cv);
  put(r, "std_error_cv", g.std_error_cv);
  put(r, "weight_kurtosis", g.weight_kurtosis);
  put(r, "moment_flag", g.moment_flag ? 1.0 : 0.0);
  put(r, "max_alpha0_residual", g.max_alpha0_residual);
  put(r, "max_alphaN_residual", g.max_alphaN_residual);
  put(r, "max_gN", g.max_gN);
  put(r, "max_alpha_dot_gap", g.max_alpha_dot_gap);
  put(r, "regularized_paths", static_cast<double>(g.regularized_paths));
  put(r, "max_shift", g.max_shift);
  put(r, "trace_fallbacks", static_cast<double>(g.trace_fallbacks));
  if (r.echo.contains("estimator") && r.echo["estimator"].value("gramian_diagnostics", false)) {
    put(r, "min_qinv_margin", g.min_qinv_margin);
    put(r, "min_order_margin", g.min_order_margin);
  }
}

void put_fit(ResultRecord& r, const RateFit& f) {
  put(r, "slope", f.slope);
  put(r, "intercept", f.intercept);
  put(r, "slope_ci", f.slope_ci);
  put(r, "theoretical", f.theoretical);
  put(r, "pass", f.pass ? 1.0 : 0.0);
  double used = 0;
  for (bool u : f.used) used += u ? 1 : 0;
  put(r, "points_used", used);
}

const BMat& constant_a1(const ModelSpec& spec) {
  if (!spec.const_a1) throw NotApplicable("needs a constant first-block Jacobian of Z^(1)");
  return *spec.const_a1;
}

bool gaussian_oracle_applies(const ModelSpec& spec, const TestFunction& f) {
  return spec.linear() && f.tag == "gaussian_bump" && f.params.value("offset", 0.0) == 0.0;
}

void put_harnack(ResultRecord& r, const HarnackReport& h) {
  put(r, "fitted_c", h.fitted_c);
  put(r, "margin", h.margin);
  put(r, "points", static_cast<double>(h.points.size()));
  if (!h.held_out.empty()) {
    put(r, "held_out_margin", h.held_out_margin);
    put(r, "held_out_worst_z", h.held_out_worst_z);
    put(r, "held_out_points", static_cast<double>(h.held_out.size()));
    put(r, "dropped", static_cast<double>(h.dropped));
  }
}

}  // namespace

json to_json(const ResultRecord& r) {
  json m = json::object();
  for (const auto& [k, x] : r.metrics) m[k] = x;
  json j{{"config_hash", r.config_hash}, {"run_id", r.run_id}, {"experiment", r.experiment},
         {"label", r.label},             {"config", r.echo},   {"metrics", m}};
  if (!r.omitted.empty()) j["omitted_metrics"] = r.omitted;
  if (!r.details.empty()) j["details"] = r.details;
  return j;
}

RunOutcome run_experiment(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  RunOutcome out;
  const std::string hash = config_hash(cfg);
  const ModelSpec spec = build_model(cfg.model);
  const TimeGrid grid(cfg.t_final, cfg.n_steps);
  EstimatorConfig est = cfg.estimator;
  est.n_steps = cfg.n_steps;

  switch (cfg.experiment) {
    case Experiment::validate: {
      const ValidationReport rep = validate_model(spec, SampleBox::centered(spec.dim(), cfg.validate.half_side),
                                                  cfg.validate.n_samples, cfg.validate.seed);
      ResultRecord r = make_record(cfg, hash, "validate");
      put(r, "overall", rep.overall ? 1.0 : 0.0);
      json checks = json::array();
      for (const auto& c : rep.checks) {
        put(r, c.name + ".pass", c.pass ? 1.0 : 0.0);
        put(r, c.name + ".margin", c.margin);
        json cj{{"name", c.name}, {"pass", c.pass}, {"margin", c.margin}};
        if (c.witness.size() > 0) cj["witness"] = vector_to_json(c.witness);
        if (!c.detail.empty()) cj["detail"] = c.detail;
        checks.push_back(cj);
      }
      r.details["checks"] = checks;
      out.validation_failed = !rep.overall;
      out.records.push_back(std::move(r));
      break;
    }
    case Experiment::estimate: {
      const TestFunction f = test_function_from_json(cfg.f, spec.m, spec.d);
      std::vector<Method> methods = cfg.methods;
      if (methods.empty()) methods.push_back(est.method);
      for (Method m : methods) {
        EstimatorConfig c = est;
        c.method = m;
        const GradientEstimate g = estimate_gradient(spec, cfg.x0, cfg.v, f, grid, c);
        ResultRecord r = make_record(cfg, hash, to_string(m));
        r.details["method_used"] = to_string(g.method);
        put_estimate(r, g);
        out.records.push_back(std::move(r));
      }
      break;
    }
    case Experiment::sweep_T: {
      const TestFunction f = test_function_from_json(cfg.f, spec.m, spec.d);
      const RateSweep sw = gradient_rate_sweep(spec, cfg.x0, cfg.v, f, cfg.t_grid, est);
      ResultRecord r = make_record(cfg, hash, "rate_fit");
      put_fit(r, sw.fit);
      put(r, "kalman_k", sw.kalman_k);
      out.records.push_back(std::move(r));
      PlotTable t{{"T", "weight_l2", "weight_l2_se", "value", "std_error", "used"}, {}};
      for (std::size_t i = 0; i < sw.estimates.size(); ++i) {
        const auto& g = sw.estimates[i];
        t.rows.push_back({cfg.t_grid[i], g.weight_l2, g.weight_l2_se, g.value, g.std_error,
                          sw.fit.used[i] ? 1.0 : 0.0});
      }
      out.plot = std::move(t);
      break;
    }
    case Experiment::gramian: {
      const RateFit fit = gramian_scaling(constant_a1(spec), spec.b0, cfg.t_grid);
      ResultRecord r = make_record(cfg, hash, "gramian_scaling");
      put_fit(r, fit);
      out.records.push_back(std::move(r));
      PlotTable t{{"t", "lambda_min", "std_error"}, {}};
      for (std::size_t i = 0; i < fit.grid.size(); ++i) t.rows.push_back({fit.grid[i], fit.values[i], 0.0});
      out.plot = std::move(t);
      break;
    }
    case Experiment::kalman: {
      const KalmanResult k = kalman_index(constant_a1(spec), spec.b0);
      ResultRecord r = make_record(cfg, hash, "kalman");
      put(r, "controllable", k.k ? 1.0 : 0.0);
      if (k.k) put(r, "k", *k.k);
      r.details["ranks"] = k.ranks;
      r.details["smallest_singular_values"] = k.singular_values;
      out.records.push_back(std::move(r));
      break;
    }
    case Experiment::harnack: {
      const TestFunction f = test_function_from_json(cfg.f, spec.m, spec.d);
      HarnackSetup setup;
      setup.x = cfg.harnack.x;
      setup.v = cfg.harnack.v;
      setup.p_grid = cfg.harnack.p_grid;
      setup.t_final = cfg.t_final;
      setup.l1 = cfg.harnack.l1;
      if (cfg.harnack.kalman_k) {
        setup.kalman_k = *cfg.harnack.kalman_k;
      } else {
        const KalmanResult k = kalman_index(constant_a1(spec), spec.b0);
        if (!k.k) throw NotApplicable("Kalman rank condition fails: no finite index");
        setup.kalman_k = *k.k;
      }
      const HarnackReport mc = harnack_check(spec, f, setup, est);
      ResultRecord r = make_record(cfg, hash, "monte_carlo");
      put_harnack(r, mc);
      put(r, "kalman_k", setup.kalman_k);
      PlotTable t{{"bracket", "log_ratio", "log_ratio_se", "p", "held_out"}, {}};
      for (const auto& pt : mc.points) t.rows.push_back({pt.bracket, pt.log_ratio, pt.log_ratio_se, pt.p, 0.0});
      for (const auto& pt : mc.held_out) t.rows.push_back({pt.bracket, pt.log_ratio, pt.log_ratio_se, pt.p, 1.0});
      if (gaussian_oracle_applies(spec, f)) {
        const HarnackReport exact = harnack_oracle(spec, f, setup);
        ResultRecord o = make_record(cfg, hash, "gaussian_oracle");
        put_harnack(o, exact);
        if (exact.fitted_c > 0.0) put(r, "fitted_c_rel_gap", std::abs(mc.fitted_c - exact.fitted_c) / exact.fitted_c);
        out.records.push_back(std::move(r));
        out.records.push_back(std::move(o));
      } else {
        out.records.push_back(std::move(r));
      }
      out.plot = std::move(t);
      break;
    }
    case Experiment::entropy_gradient: {
      const TestFunction f = test_function_from_json(cfg.f, spec.m, spec.d);
      const EntropyReport e = entropy_gradient_check(spec, cfg.x0, cfg.v, f, cfg.t_final, cfg.lambda_grid, est);
      ResultRecord r = make_record(cfg, hash, "entropy_gradient");
      put(r, "p_tf", e.p_tf);
      put(r, "p_tf_se", e.p_tf_se);
      put(r, "entropy", e.rows.front().entropy_term);
      put(r, "entropy_se", e.entropy_se);
      put(r, "gradient", e.gradient.value);
      put(r, "gradient_se", e.gradient.std_error);
      put(r, "fitted_a", e.fitted_a);
      out.records.push_back(std::move(r));
      PlotTable t{{"lambda", "gamma_hat", "gamma_se"}, {}};
      for (const auto& row : e.rows) t.rows.push_back({row.lambda, row.gamma_hat, row.gamma_se});
      out.plot = std::move(t);
      break;
    }
    case Experiment::duality_test: {
      const TestFunction f = test_function_from_json(cfg.f, spec.m, spec.d);
      const DualityResult d = duality_check(spec, cfg.x0, cfg.v, f, grid, est);
      ResultRecord r = make_record(cfg, hash, "duality");
      put(r, "lhs", d.lhs.mean);
      put(r, "lhs_se", d.lhs.std_error);
      put(r, "rhs", d.rhs.mean);
      put(r, "rhs_se", d.rhs.std_error);
      put(r, "diff", d.diff.mean);
      put(r, "diff_se", d.diff.std_error);
      put(r, "z_score", d.z_score);
      put(r, "rejected", static_cast<double>(d.rejected));
      const double z_combined = std::abs(d.lhs.mean - d.rhs.mean) / std::hypot(d.lhs.std_error, d.rhs.std_error);
      put(r, "z_combined", z_combined);
      put(r, "pass", z_combined <= 4.0 ? 1.0 : 0.0);
      out.records.push_back(std::move(r));
      break;
    }
  }
  out.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

std::string format_number(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

}  // namespace

std::string results_csv(const std::vector<ResultRecord>& records) {
  std::string s = "run_id,config_hash,experiment,label,metric,value\r\n";
  for (const auto& r : records)
    for (const auto& [k, x] : r.metrics)
      s += csv_field(r.run_id) + "," + r.config_hash + "," + csv_field(r.experiment) + "," + csv_field(r.label) + "," +
           csv_field(k) + "," + format_number(x) + "\r\n";
  return s;
}

std::string plot_csv(const PlotTable& t) {
  std::string s;
  for (std::size_t i = 0; i < t.columns.size(); ++i) s += (i ? "," : "") + csv_field(t.columns[i]);
  s += "\r\n";
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) s += (i ? "," : "") + format_number(row[i]);
    s += "\r\n";
  }
  return s;
}

namespace {

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream o(p, std::ios::binary | std::ios::trunc);
  if (!o) throw std::runtime_error("cannot write " + p.string());
  o << content;
  if (!o) throw std::runtime_error("write failed for " + p.string());
}

// Advisory lock held for the lifetime of the object; one run per output directory.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir) {
    const std::string p = (dir / ".hypograd.lock").string();
    fd_ = ::open(p.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) throw std::runtime_error("cannot open lock file " + p);
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw std::runtime_error("output directory " + dir.string() + " is locked by another run");
    }
  }
  ~DirLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace

void write_artifacts(const std::filesystem::path& dir, const RunOutcome& out, int threads) {
  std::filesystem::create_directories(dir);
  json arr = json::array();
  for (const auto& r : out.records) arr.push_back(to_json(r));
  write_file(dir / "results.json", arr.dump(2) + "\n");
  write_file(dir / "results.csv", results_csv(out.records));
  if (out.plot) write_file(dir / "plotdata.csv", plot_csv(*out.plot));
  else std::filesystem::remove(dir / "plotdata.csv");
  const json timing{{"wall_time_s", out.wall_time_s},
                    {"threads", threads},
                    {"config_hash", out.records.empty() ? std::string() : out.records.front().config_hash}};
  write_file(dir / "timing.json", timing.dump(2) + "\n");
}

namespace {

std::optional<int> env_threads() {
  const char* s = std::getenv("HYPOGRAD_THREADS");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const long n = std::strtol(s, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) throw ConfigError("HYPOGRAD_THREADS must be a positive integer");
  return static_cast<int>(n);
}

}  // namespace

int run_config_file(const std::filesystem::path& path, const RunOverrides& ov, std::ostream& log) {
  try {
    ExperimentConfig cfg = load_config(path);
    if (ov.seed) {
      cfg.estimator.master_seed = *ov.seed;
      cfg.validate.seed = *ov.seed;
    }
    const std::optional<int> threads = ov.threads ? ov.threads : env_threads();
    if (threads) {
      if (*threads < 1) throw ConfigError("--threads must be >= 1");
      cfg.estimator.threads = *threads;
    }
    if (ov.out) cfg.output = *ov.out;
    const std::filesystem::path dir = cfg.output;
    std::filesystem::create_directories(dir);
    DirLock lock(dir);

    const RunOutcome out = run_experiment(cfg);
    write_artifacts(dir, out, cfg.estimator.threads);
    for (const auto& r : out.records) {
      log << r.experiment << " [" << r.label << "] run " << r.run_id << "\n";
      for (const auto& [k, x] : r.metrics) log << "  " << k << " = " << format_number(x) << "\n";
    }
    log << "wrote " << dir.string() << " (" << format_number(out.wall_time_s) << " s)\n";
    if (out.validation_failed) {
      log << "validation failed\n";
      return 2;
    }
    return 0;
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ModelError& e) {
    log << "model error: " << e.what() << "\n";
    return 2;
  } catch (const NotApplicable& e) {
    log << "not applicable: " << e.what() << "\n";
    return 2;
  } catch (const MethodMisuse& e) {
    log << "method misuse: " << e.what() << "\n";
    return 2;
  } catch (const RunDegenerate& e) {
    log << "degenerate run: " << e.what() << "\n";
    return 3;
  } catch (const PathDegenerate& e) {
    log << "degenerate path: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return 1;
  }
}

std::string format_builtins() {
  std::ostringstream o;
  for (const auto& b : list_builtins()) {
    o << b.name << "\n";
    o << "  " << b.summary << "\n";
    o << "  required:";
    for (const auto& k : b.required) o << " " << k;
    o << "\n";
    o << "  defaults: " << b.defaults.dump() << "\n";
  }
  return o.str();
}

}  // namespace hypograd
