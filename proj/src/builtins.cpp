#include "hypograd/errors.hpp"
#include "hypograd/model.hpp"

#include <cmath>
#include <set>

namespace hypograd {

namespace {

using nlohmann::json;

void require_exact_keys(const std::string& model, const json& params,
                        const std::vector<std::string>& keys) {
  if (!params.is_object()) throw ConfigError(model + ": params must be an object");
  const std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [k, _] : params.items())
    if (!known.count(k)) throw ConfigError(model + ": unknown parameter '" + k + "'");
  for (const auto& k : keys)
    if (!params.contains(k)) throw ConfigError(model + ": missing parameter '" + k + "'");
}

double number_param(const json& params, const std::string& key) {
  const auto& j = params.at(key);
  if (!j.is_number()) throw ConfigError("parameter '" + key + "' must be a number");
  return j.get<double>();
}

int int_param(const json& params, const std::string& key) {
  const auto& j = params.at(key);
  if (!j.is_number_integer()) throw ConfigError("parameter '" + key + "' must be an integer");
  return j.get<int>();
}

// A scalar stands for that multiple of the identity when the target is square.
Eigen::MatrixXd matrix_param(const json& params, const std::string& key, int rows, int cols) {
  const auto& j = params.at(key);
  if (j.is_number()) {
    if (rows != cols) throw ConfigError("parameter '" + key + "' must be a " +
                                        std::to_string(rows) + "x" + std::to_string(cols) + " matrix");
    return j.get<double>() * Eigen::MatrixXd::Identity(rows, cols);
  }
  Eigen::MatrixXd mtx = json_to_matrix(j, key);
  if (mtx.rows() != rows || mtx.cols() != cols)
    throw ConfigError("parameter '" + key + "' has shape " + std::to_string(mtx.rows()) + "x" +
                      std::to_string(mtx.cols()) + ", expected " + std::to_string(rows) + "x" +
                      std::to_string(cols));
  return mtx;
}

void check_dim(const std::string& what, int v) {
  if (v < 1 || v > kMaxBlock)
    throw ConfigError(what + " must be between 1 and " + std::to_string(kMaxBlock));
}

// Shared wiring for Z(z) = G z + b with B₀ = ∇^(2)Z^(1).
ModelSpec affine_model(std::string name, int m, int d, const SMat& g, const Vec& b,
                       const BMat& sigma) {
  ModelSpec spec;
  spec.name = std::move(name);
  spec.m = m;
  spec.d = d;
  const int n = m + d;
  spec.z1 = [g, b, m](const Vec& x) -> BVec {
    return g.topRows(m) * x + b.head(m);
  };
  spec.z2 = [g, b, d](const Vec& x) -> BVec {
    return g.bottomRows(d) * x + b.tail(d);
  };
  const Z1Jacobian j1{g.topLeftCorner(m, m), g.topRightCorner(m, d)};
  const Z2Jacobian j2{g.bottomLeftCorner(d, m), g.bottomRightCorner(d, d)};
  spec.jac_z1 = [j1](const Vec&) { return j1; };
  spec.jac_z2 = [j2](const Vec&) { return j2; };
  spec.hess_z1 = [m, n](const Vec&) {
    Z1Hessian h;
    for (int a = 0; a < m; ++a) h.h[a] = SMat::Zero(n, n);
    return h;
  };
  spec.sigma = sigma;
  spec.b0 = j1.c;
  spec.const_a1 = j1.a1;
  spec.const_c = true;
  spec.linear_g = g;
  spec.linear_b = b;

  // W = 1 + |z|^2 works for every affine drift with l1 = l2 = 0.
  const double trace_ss = (sigma * sigma.transpose()).trace();
  const double gnorm = op_norm(g);
  HypothesisData hy;
  hy.w = [](const Vec& x) { return 1.0 + x.squaredNorm(); };
  hy.grad2_w = [d](const Vec& x) -> BVec { return 2.0 * x.tail(d); };
  hy.c_const = std::max({4.0, trace_ss + 2.0 * gnorm + b.norm(), gnorm});
  hy.l1 = 0.0;
  hy.l2 = 0.0;
  spec.hypothesis = hy;
  check_spec(spec);
  return spec;
}

ModelSpec make_kinetic_ou(const json& p) {
  require_exact_keys("kinetic_ou", p, {"dim", "K", "Gamma", "sigma"});
  const int n = int_param(p, "dim");
  check_dim("kinetic_ou.dim", n);
  const Eigen::MatrixXd k = matrix_param(p, "K", n, n);
  const Eigen::MatrixXd gam = matrix_param(p, "Gamma", n, n);
  const Eigen::MatrixXd sig = matrix_param(p, "sigma", n, n);
  SMat g = SMat::Zero(2 * n, 2 * n);
  g.topRightCorner(n, n) = Eigen::MatrixXd::Identity(n, n);
  g.bottomLeftCorner(n, n) = -k;
  g.bottomRightCorner(n, n) = -gam;
  return affine_model("kinetic_ou", n, n, g, Vec::Zero(2 * n), sig);
}

ModelSpec make_integrator_chain(const json& p) {
  require_exact_keys("integrator_chain", p, {"m", "d", "A", "B0", "z2_x", "z2_y", "z2_c", "sigma"});
  const int m = int_param(p, "m"), d = int_param(p, "d");
  check_dim("integrator_chain.m", m);
  check_dim("integrator_chain.d", d);
  SMat g(m + d, m + d);
  g.topLeftCorner(m, m) = matrix_param(p, "A", m, m);
  g.topRightCorner(m, d) = matrix_param(p, "B0", m, d);
  g.bottomLeftCorner(d, m) = matrix_param(p, "z2_x", d, m);
  g.bottomRightCorner(d, d) = matrix_param(p, "z2_y", d, d);
  const Eigen::VectorXd c = json_to_vector(p.at("z2_c"), "z2_c");
  if (c.size() != d) throw ConfigError("parameter 'z2_c' must have d entries");
  Vec b = Vec::Zero(m + d);
  b.tail(d) = c;
  return affine_model("integrator_chain", m, d, g, b, matrix_param(p, "sigma", d, d));
}

// H(x,y) = V(x) + ½⟨M(x)y,y⟩ with separable V and diagonal M, friction F ≡ γ:
//   V(x)   = Σ k2/2 x_i² + c4 x_i⁴
//   M_i(x) = mass0 + mass1 tanh²(x_i)
ModelSpec make_hamiltonian(const json& p) {
  require_exact_keys("hamiltonian", p,
                     {"dim", "k2", "c4", "mass0", "mass1", "friction", "sigma", "hyp_c"});
  const int n = int_param(p, "dim");
  check_dim("hamiltonian.dim", n);
  const double k2 = number_param(p, "k2"), c4 = number_param(p, "c4");
  const double mass0 = number_param(p, "mass0"), mass1 = number_param(p, "mass1");
  const double gam = number_param(p, "friction"), hyp_c = number_param(p, "hyp_c");
  if (!(mass0 > 0.0) || mass1 < 0.0) throw ConfigError("hamiltonian: need mass0 > 0, mass1 >= 0");
  if (k2 < 0.0 || c4 < 0.0) throw ConfigError("hamiltonian: need k2 >= 0, c4 >= 0 (V >= 0)");

  struct Mass {
    double m, dm, d2m;
  };
  auto mass = [mass0, mass1](double x) {
    const double t = std::tanh(x), s2 = 1.0 - t * t;
    return Mass{mass0 + mass1 * t * t, mass1 * 2.0 * t * s2, mass1 * 2.0 * s2 * (s2 - 2.0 * t * t)};
  };

  ModelSpec spec;
  spec.name = "hamiltonian";
  spec.m = n;
  spec.d = n;
  spec.z1 = [n, mass](const Vec& z) {
    BVec out(n);
    for (int i = 0; i < n; ++i) out(i) = mass(z(i)).m * z(n + i);
    return out;
  };
  spec.z2 = [n, mass, k2, c4, gam](const Vec& z) {
    BVec out(n);
    for (int i = 0; i < n; ++i) {
      const double x = z(i), y = z(n + i);
      const Mass ms = mass(x);
      out(i) = -(k2 * x + 4.0 * c4 * x * x * x) - 0.5 * ms.dm * y * y - gam * ms.m * y;
    }
    return out;
  };
  spec.jac_z1 = [n, mass](const Vec& z) {
    Z1Jacobian j{BMat::Zero(n, n), BMat::Zero(n, n)};
    for (int i = 0; i < n; ++i) {
      const Mass ms = mass(z(i));
      j.a1(i, i) = ms.dm * z(n + i);
      j.c(i, i) = ms.m;
    }
    return j;
  };
  spec.jac_z2 = [n, mass, k2, c4, gam](const Vec& z) {
    Z2Jacobian j{BMat::Zero(n, n), BMat::Zero(n, n)};
    for (int i = 0; i < n; ++i) {
      const double x = z(i), y = z(n + i);
      const Mass ms = mass(x);
      j.g21(i, i) = -(k2 + 12.0 * c4 * x * x) - 0.5 * ms.d2m * y * y - gam * ms.dm * y;
      j.g22(i, i) = -ms.dm * y - gam * ms.m;
    }
    return j;
  };
  spec.hess_z1 = [n, mass](const Vec& z) {
    Z1Hessian h;
    for (int i = 0; i < n; ++i) {
      const Mass ms = mass(z(i));
      h.h[i] = SMat::Zero(2 * n, 2 * n);
      h.h[i](i, i) = ms.d2m * z(n + i);
      h.h[i](i, n + i) = ms.dm;
      h.h[i](n + i, i) = ms.dm;
    }
    return h;
  };
  spec.sigma = matrix_param(p, "sigma", n, n);
  spec.b0 = mass0 * BMat::Identity(n, n);
  spec.epsilon = 0.0;
  if (mass1 == 0.0) {
    spec.const_a1 = BMat::Zero(n, n);
    spec.const_c = true;
    if (c4 == 0.0) {
      SMat g = SMat::Zero(2 * n, 2 * n);
      g.topRightCorner(n, n) = mass0 * Eigen::MatrixXd::Identity(n, n);
      g.bottomLeftCorner(n, n) = -k2 * Eigen::MatrixXd::Identity(n, n);
      g.bottomRightCorner(n, n) = -gam * mass0 * Eigen::MatrixXd::Identity(n, n);
      spec.linear_g = g;
      spec.linear_b = Vec::Zero(2 * n);
    }
  }

  HypothesisData hy;
  hy.w = [n, mass, k2, c4](const Vec& z) {
    double w = 1.0;
    for (int i = 0; i < n; ++i) {
      const double x = z(i), y = z(n + i);
      w += 0.5 * k2 * x * x + c4 * x * x * x * x + 0.5 * mass(x).m * y * y;
    }
    return w;
  };
  hy.grad2_w = [n, mass](const Vec& z) {
    BVec g(n);
    for (int i = 0; i < n; ++i) g(i) = mass(z(i)).m * z(n + i);
    return g;
  };
  hy.c_const = hyp_c;
  hy.l1 = 0.5;
  hy.l2 = 0.5;
  spec.hypothesis = hy;
  check_spec(spec);
  return spec;
}

json merged(const json& defaults, const json& params) {
  if (!params.is_null() && !params.is_object()) throw ConfigError("params must be an object");
  json out = defaults;
  if (params.is_object())
    for (const auto& [k, v] : params.items()) out[k] = v;
  return out;
}

}  // namespace

const std::vector<BuiltinInfo>& list_builtins() {
  static const std::vector<BuiltinInfo> table = [] {
    std::vector<BuiltinInfo> t;
    t.push_back({"hamiltonian",
                 "stochastic Hamiltonian system, V = sum k2/2 x^2 + c4 x^4, "
                 "M(x) = diag(mass0 + mass1 tanh^2 x), friction F = const",
                 {"dim", "k2", "c4", "mass0", "mass1", "friction", "sigma", "hyp_c"},
                 json{{"dim", 1},
                      {"k2", 1.0},
                      {"c4", 0.1},
                      {"mass0", 1.0},
                      {"mass1", 0.0},
                      {"friction", 0.0},
                      {"sigma", 1.0},
                      {"hyp_c", 40.0}}});
    t.push_back({"integrator_chain",
                 "Z1 = A x + B0 y, Z2 = z2_x x + z2_y y + z2_c",
                 {"m", "d", "A", "B0", "z2_x", "z2_y", "z2_c", "sigma"},
                 chain_preset(1)});
    t.push_back({"kinetic_ou",
                 "Z1 = y, Z2 = -K x - Gamma y",
                 {"dim", "K", "Gamma", "sigma"},
                 json{{"dim", 1}, {"K", 1.0}, {"Gamma", 1.0}, {"sigma", 1.0}}});
    return t;
  }();
  return table;
}

json chain_preset(int k) {
  if (k < 0 || k > 2) throw ConfigError("chain presets exist for k = 0, 1, 2");
  const int m = k + 1;
  json a = json::array(), b0 = json::array(), zx = json::array({json::array()});
  for (int r = 0; r < m; ++r) {
    json row = json::array();
    for (int c = 0; c < m; ++c) row.push_back(c == r + 1 ? 1.0 : 0.0);
    a.push_back(row);
    b0.push_back(json::array({r == m - 1 ? 1.0 : 0.0}));
    zx[0].push_back(0.0);
  }
  return json{{"m", m},         {"d", 1},           {"A", a},
              {"B0", b0},       {"z2_x", zx},       {"z2_y", json::array({json::array({0.0})})},
              {"z2_c", json::array({0.0})},  {"sigma", 1.0}};
}

ModelSpec builtin_model(const std::string& name, const json& params) {
  if (name == "kinetic_ou") return make_kinetic_ou(params);
  if (name == "hamiltonian") return make_hamiltonian(params);
  if (name == "integrator_chain") return make_integrator_chain(params);
  throw ConfigError("unknown builtin model '" + name + "'");
}

ModelSpec builtin_model_with_defaults(const std::string& name, const json& params) {
  for (const auto& info : list_builtins())
    if (info.name == name) return builtin_model(name, merged(info.defaults, params));
  throw ConfigError("unknown builtin model '" + name + "'");
}

}  // namespace hypograd
