#include "hypograd/config.hpp"

#include "hypograd/errors.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <set>
#include <sstream>

namespace hypograd {

using nlohmann::json;

namespace {

constexpr std::array<std::pair<Experiment, const char*>, 8> kExperimentNames{{
    {Experiment::validate, "validate"},
    {Experiment::estimate, "estimate"},
    {Experiment::sweep_T, "sweep_T"},
    {Experiment::gramian, "gramian"},
    {Experiment::kalman, "kalman"},
    {Experiment::harnack, "harnack"},
    {Experiment::entropy_gradient, "entropy_gradient"},
    {Experiment::duality_test, "duality_test"},
}};

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, _] : j.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown or unused key '" + k + "'");
}

const json& need(const json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": missing required key '" + key + "'");
  return j.at(key);
}

double number(const json& j, const std::string& what) {
  if (!j.is_number()) throw ConfigError(what + " must be a number");
  return j.get<double>();
}

int integer(const json& j, const std::string& what) {
  if (!j.is_number_integer()) throw ConfigError(what + " must be an integer");
  return j.get<int>();
}

bool boolean(const json& j, const std::string& what) {
  if (!j.is_boolean()) throw ConfigError(what + " must be true or false");
  return j.get<bool>();
}

std::string text(const json& j, const std::string& what) {
  if (!j.is_string()) throw ConfigError(what + " must be a string");
  return j.get<std::string>();
}

std::uint64_t seed_value(const json& j, const std::string& what) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer() && j.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(j.get<std::int64_t>());
  throw ConfigError(what + " must be a non-negative integer");
}

std::vector<double> number_list(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw ConfigError(what + " must be a non-empty array of numbers");
  std::vector<double> out;
  for (const auto& e : j) out.push_back(number(e, what));
  return out;
}

Vec sized(const json& j, int n, const std::string& what) {
  const Vec v = json_to_vector(j, what);
  if (v.size() != n) throw ConfigError(what + " must have " + std::to_string(n) + " entries");
  return v;
}

json list_json(const std::vector<double>& xs) {
  json a = json::array();
  for (double x : xs) a.push_back(x);
  return a;
}

ModelDecl parse_model(const json& j) {
  ModelDecl d;
  if (j.contains("expression")) {
    check_keys(j, {"expression"}, "model");
    const json& e = j.at("expression");
    check_keys(e, {"m", "d", "z1", "z2", "sigma", "B0", "epsilon", "adapted"}, "model.expression");
    ExpressionModelDecl x;
    x.m = integer(need(e, "m", "model.expression"), "model.expression.m");
    x.d = integer(need(e, "d", "model.expression"), "model.expression.d");
    for (const auto& s : need(e, "z1", "model.expression")) x.z1.push_back(text(s, "model.expression.z1"));
    for (const auto& s : need(e, "z2", "model.expression")) x.z2.push_back(text(s, "model.expression.z2"));
    x.sigma = json_to_matrix(need(e, "sigma", "model.expression"), "model.expression.sigma");
    x.b0 = json_to_matrix(need(e, "B0", "model.expression"), "model.expression.B0");
    if (e.contains("epsilon")) x.epsilon = number(e["epsilon"], "model.expression.epsilon");
    if (e.contains("adapted")) x.adapted = boolean(e["adapted"], "model.expression.adapted");
    d.expression = x;
    return d;
  }
  check_keys(j, {"builtin", "params"}, "model");
  d.builtin = text(need(j, "builtin", "model"), "model.builtin");
  if (j.contains("params")) d.params = j.at("params");
  if (!d.params.is_object()) throw ConfigError("model.params must be an object");
  // Store the merged parameters so that spelling out a default does not change the hash.
  for (const auto& info : list_builtins()) {
    if (info.name != d.builtin) continue;
    json merged = info.defaults;
    for (const auto& [k, val] : d.params.items()) merged[k] = val;
    d.params = merged;
    return d;
  }
  throw ConfigError("unknown builtin model '" + d.builtin + "'");
}

json model_json(const ModelDecl& d) {
  if (d.expression) {
    const auto& x = *d.expression;
    return json{{"expression",
                 {{"m", x.m},
                  {"d", x.d},
                  {"z1", x.z1},
                  {"z2", x.z2},
                  {"sigma", matrix_to_json(x.sigma)},
                  {"B0", matrix_to_json(x.b0)},
                  {"epsilon", x.epsilon},
                  {"adapted", x.adapted}}}};
  }
  return json{{"builtin", d.builtin}, {"params", d.params}};
}

EstimatorConfig parse_estimator(const json& j) {
  check_keys(j,
             {"n_paths", "master_seed", "method", "fd_bump", "antithetic", "phi", "xi", "c_bound", "pilot_paths",
              "skorokhod_mode", "threads", "moment_p", "max_reject_fraction", "gramian_diagnostics"},
             "estimator");
  EstimatorConfig c;
  if (j.contains("n_paths")) c.n_paths = integer(j["n_paths"], "estimator.n_paths");
  if (j.contains("master_seed")) c.master_seed = seed_value(j["master_seed"], "estimator.master_seed");
  if (j.contains("method")) c.method = method_from_string(text(j["method"], "estimator.method"));
  if (j.contains("fd_bump")) c.fd_bump = number(j["fd_bump"], "estimator.fd_bump");
  if (j.contains("antithetic")) c.antithetic = boolean(j["antithetic"], "estimator.antithetic");
  if (j.contains("phi")) c.phi = phi_kind_from_string(text(j["phi"], "estimator.phi"));
  if (j.contains("xi")) c.xi = xi_choice_from_string(text(j["xi"], "estimator.xi"));
  if (j.contains("c_bound") && !j["c_bound"].is_null()) c.c_bound = number(j["c_bound"], "estimator.c_bound");
  if (j.contains("pilot_paths")) c.pilot_paths = integer(j["pilot_paths"], "estimator.pilot_paths");
  if (j.contains("skorokhod_mode"))
    c.skorokhod_mode = skorokhod_mode_from_string(text(j["skorokhod_mode"], "estimator.skorokhod_mode"));
  if (j.contains("threads")) c.threads = integer(j["threads"], "estimator.threads");
  if (j.contains("moment_p")) c.moment_p = number(j["moment_p"], "estimator.moment_p");
  if (j.contains("max_reject_fraction"))
    c.max_reject_fraction = number(j["max_reject_fraction"], "estimator.max_reject_fraction");
  if (j.contains("gramian_diagnostics"))
    c.gramian_diagnostics = boolean(j["gramian_diagnostics"], "estimator.gramian_diagnostics");
  return c;
}

struct Needs {
  bool points = false;  // x0, v
  bool f = false;
  bool grid_t = false;
  bool grid_n = false;
  bool estimator = false;
  std::set<std::string> extra;  // experiment-specific blocks
};

Needs needs_of(Experiment e) {
  switch (e) {
    case Experiment::validate: return {false, false, false, false, false, {"validate"}};
    case Experiment::estimate: return {true, true, true, true, true, {"methods"}};
    case Experiment::sweep_T: return {true, true, false, true, true, {"T_grid"}};
    case Experiment::gramian: return {false, false, false, false, false, {"t_grid"}};
    case Experiment::kalman: return {false, false, false, false, false, {}};
    case Experiment::harnack: return {false, true, true, true, true, {"harnack"}};
    case Experiment::entropy_gradient: return {true, true, true, true, true, {"lambda_grid"}};
    case Experiment::duality_test: return {true, true, true, true, true, {}};
  }
  return {};
}

std::vector<Vec> vec_list(const json& j, int n, const std::string& what) {
  if (!j.is_array() || j.empty()) throw ConfigError(what + " must be a non-empty array of vectors");
  std::vector<Vec> out;
  for (const auto& e : j) out.push_back(sized(e, n, what));
  return out;
}

}  // namespace

std::string to_string(Experiment e) {
  for (const auto& [k, s] : kExperimentNames)
    if (k == e) return s;
  return "?";
}

Experiment experiment_from_string(const std::string& s) {
  for (const auto& [k, name] : kExperimentNames)
    if (s == name) return k;
  throw ConfigError("unknown experiment '" + s + "'");
}

ModelSpec build_model(const ModelDecl& decl) {
  if (decl.expression) return expression_model(*decl.expression);
  return builtin_model_with_defaults(decl.builtin, decl.params);
}

ExperimentConfig parse_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const json& ver = need(j, "schema_version", "config");
  if (!ver.is_number_integer() || ver.get<int>() != kSchemaVersion)
    throw ConfigError("schema_version mismatch: expected " + std::to_string(kSchemaVersion) + ", got " + ver.dump());

  ExperimentConfig c;
  c.experiment = experiment_from_string(text(need(j, "experiment", "config"), "experiment"));
  const Needs nd = needs_of(c.experiment);
  std::set<std::string> allowed = {"schema_version", "experiment", "model", "output"};
  if (nd.points) allowed.insert({"x0", "v"});
  if (nd.f) allowed.insert("f");
  if (nd.grid_t || nd.grid_n) allowed.insert("grid");
  if (nd.estimator) allowed.insert("estimator");
  allowed.insert(nd.extra.begin(), nd.extra.end());
  check_keys(j, allowed, "config (experiment " + to_string(c.experiment) + ")");

  c.model = parse_model(need(j, "model", "config"));
  const ModelSpec spec = build_model(c.model);
  const int n = spec.dim();
  if (j.contains("output")) c.output = text(j["output"], "output");

  if (nd.points) {
    c.x0 = sized(need(j, "x0", "config"), n, "x0");
    c.v = sized(need(j, "v", "config"), n, "v");
    if (c.v.norm() == 0.0) throw ConfigError("v must be non-zero");
  }
  if (nd.f) {
    c.f = need(j, "f", "config");
    (void)test_function_from_json(c.f, spec.m, spec.d);
  }
  if (nd.grid_t || nd.grid_n) {
    const json& g = need(j, "grid", "config");
    std::set<std::string> gk = {"N"};
    if (nd.grid_t) gk.insert("T");
    check_keys(g, gk, "grid");
    c.n_steps = integer(need(g, "N", "grid"), "grid.N");
    if (c.n_steps < 1) throw ConfigError("grid.N must be >= 1");
    if (nd.grid_t) {
      c.t_final = number(need(g, "T", "grid"), "grid.T");
      if (!(c.t_final > 0.0)) throw ConfigError("grid.T must be > 0");
    }
  }
  if (nd.estimator) {
    c.estimator = j.contains("estimator") ? parse_estimator(j["estimator"]) : EstimatorConfig{};
    c.estimator.n_steps = c.n_steps;
    c.estimator.check();
  }

  switch (c.experiment) {
    case Experiment::validate:
      if (j.contains("validate")) {
        const json& b = j["validate"];
        check_keys(b, {"half_side", "n_samples", "seed"}, "validate");
        if (b.contains("half_side")) c.validate.half_side = number(b["half_side"], "validate.half_side");
        if (b.contains("n_samples")) c.validate.n_samples = integer(b["n_samples"], "validate.n_samples");
        if (b.contains("seed")) c.validate.seed = seed_value(b["seed"], "validate.seed");
      }
      if (!(c.validate.half_side > 0.0) || c.validate.n_samples < 1)
        throw ConfigError("validate needs half_side > 0 and n_samples >= 1");
      break;
    case Experiment::estimate:
      if (j.contains("methods")) {
        const json& ms = j["methods"];
        if (!ms.is_array() || ms.empty()) throw ConfigError("methods must be a non-empty array");
        for (const auto& m : ms) c.methods.push_back(method_from_string(text(m, "methods")));
      }
      break;
    case Experiment::sweep_T:
      c.t_grid = number_list(need(j, "T_grid", "config"), "T_grid");
      break;
    case Experiment::gramian:
      c.t_grid = number_list(need(j, "t_grid", "config"), "t_grid");
      break;
    case Experiment::entropy_gradient:
      c.lambda_grid = number_list(need(j, "lambda_grid", "config"), "lambda_grid");
      break;
    case Experiment::harnack: {
      const json& h = need(j, "harnack", "config");
      check_keys(h, {"x", "v", "p_grid", "l1", "kalman_k"}, "harnack");
      c.harnack.x = vec_list(need(h, "x", "harnack"), n, "harnack.x");
      c.harnack.v = vec_list(need(h, "v", "harnack"), n, "harnack.v");
      if (c.harnack.x.size() != c.harnack.v.size()) throw ConfigError("harnack.x and harnack.v differ in length");
      c.harnack.p_grid = number_list(need(h, "p_grid", "harnack"), "harnack.p_grid");
      if (h.contains("l1")) c.harnack.l1 = number(h["l1"], "harnack.l1");
      if (h.contains("kalman_k") && !h["kalman_k"].is_null())
        c.harnack.kalman_k = integer(h["kalman_k"], "harnack.kalman_k");
      break;
    }
    case Experiment::kalman:
    case Experiment::duality_test:
      break;
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return parse_config(j);
}

json estimator_to_json(const EstimatorConfig& c) {
  return json{{"n_paths", c.n_paths},
              {"master_seed", c.master_seed},
              {"method", to_string(c.method)},
              {"fd_bump", c.fd_bump},
              {"antithetic", c.antithetic},
              {"phi", to_string(c.phi)},
              {"xi", to_string(c.xi)},
              {"c_bound", c.c_bound ? json(*c.c_bound) : json(nullptr)},
              {"pilot_paths", c.pilot_paths},
              {"skorokhod_mode", to_string(c.skorokhod_mode)},
              {"threads", c.threads},
              {"moment_p", c.moment_p},
              {"max_reject_fraction", c.max_reject_fraction},
              {"gramian_diagnostics", c.gramian_diagnostics}};
}

json to_json(const ExperimentConfig& c) {
  const Needs nd = needs_of(c.experiment);
  json j{{"schema_version", c.schema_version},
         {"experiment", to_string(c.experiment)},
         {"model", model_json(c.model)},
         {"output", c.output}};
  if (nd.points) {
    j["x0"] = vector_to_json(c.x0);
    j["v"] = vector_to_json(c.v);
  }
  if (nd.f) j["f"] = c.f;
  if (nd.grid_t) j["grid"] = {{"T", c.t_final}, {"N", c.n_steps}};
  else if (nd.grid_n) j["grid"] = {{"N", c.n_steps}};
  if (nd.estimator) j["estimator"] = estimator_to_json(c.estimator);
  switch (c.experiment) {
    case Experiment::validate:
      j["validate"] = {{"half_side", c.validate.half_side}, {"n_samples", c.validate.n_samples}, {"seed", c.validate.seed}};
      break;
    case Experiment::estimate:
      if (!c.methods.empty()) {
        j["methods"] = json::array();
        for (Method m : c.methods) j["methods"].push_back(to_string(m));
      }
      break;
    case Experiment::sweep_T: j["T_grid"] = list_json(c.t_grid); break;
    case Experiment::gramian: j["t_grid"] = list_json(c.t_grid); break;
    case Experiment::entropy_gradient: j["lambda_grid"] = list_json(c.lambda_grid); break;
    case Experiment::harnack: {
      json xs = json::array(), vs = json::array();
      for (const auto& x : c.harnack.x) xs.push_back(vector_to_json(x));
      for (const auto& v : c.harnack.v) vs.push_back(vector_to_json(v));
      j["harnack"] = {{"x", xs},
                      {"v", vs},
                      {"p_grid", list_json(c.harnack.p_grid)},
                      {"l1", c.harnack.l1},
                      {"kalman_k", c.harnack.kalman_k ? json(*c.harnack.kalman_k) : json(nullptr)}};
      break;
    }
    case Experiment::kalman:
    case Experiment::duality_test:
      break;
  }
  return j;
}

std::string sha256_hex(const std::string& data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output");
  if (j.contains("estimator")) j["estimator"].erase("threads");
  return sha256_hex(j.dump());
}

}  // namespace hypograd
