#pragma once

#include "hypograd/linalg.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace hypograd {

/// (∇^(1)Z^(1), ∇^(2)Z^(1)) at one state: m×m and m×d.
struct Z1Jacobian {
  BMat a1;
  BMat c;
};

/// (∇^(1)Z^(2), ∇^(2)Z^(2)) at one state: d×m and d×d.
struct Z2Jacobian {
  BMat g21;
  BMat g22;
};

/// Second derivatives of Z^(1): h[a] is the (m+d)×(m+d) Hessian of component a.
struct Z1Hessian {
  std::array<SMat, kMaxBlock> h;
};

/// Directional derivative of (A1, C) along a state perturbation e.
struct Z1Variation {
  BMat da1;
  BMat dc;
};

Z1Variation vary(const Z1Hessian& hess, int m, int d, const Vec& e);

struct HypothesisData {
  std::function<double(const Vec&)> w;
  std::function<BVec(const Vec&)> grad2_w;
  double c_const = 1.0;
  double l1 = 0.0;
  double l2 = 0.0;
};

struct ModelSpec {
  std::string name;
  int m = 0;
  int d = 0;
  std::function<BVec(const Vec&)> z1;
  std::function<BVec(const Vec&)> z2;
  std::function<Z1Jacobian(const Vec&)> jac_z1;
  std::function<Z2Jacobian(const Vec&)> jac_z2;
  std::function<Z1Hessian(const Vec&)> hess_z1;  // optional; needed for the Skorokhod trace
  BMat sigma;
  BMat b0;
  double epsilon = 0.0;
  std::optional<HypothesisData> hypothesis;

  // Structural facts known at construction time.
  std::optional<BMat> const_a1;  // ∇^(1)Z^(1) is this constant matrix
  bool const_c = false;          // ∇^(2)Z^(1) ≡ B₀
  std::optional<SMat> linear_g;  // Z(z) = G z + b
  Vec linear_b;
  bool adapted_asserted = false;  // declared adapted in config; checked by validate_model

  double sigma_condition_cap = 1e10;

  int dim() const { return m + d; }
  bool adapted() const { return (const_a1.has_value() && const_c) || adapted_asserted; }
  bool linear() const { return linear_g.has_value(); }

  Vec drift(const Vec& x) const;
  /// Full (m+d)×(m+d) Jacobian ∇Z.
  SMat jacobian(const Vec& x) const;
  /// B(x) = ∇^(2)Z^(1)(x) − B₀.
  BMat split_b(const Vec& x) const;
};

/// Dimension and invertibility checks that make a spec usable at all.
/// Throws ConfigError on shape mismatch and ModelError on singular σ.
void check_spec(const ModelSpec& spec);

struct ValidationCheck {
  std::string name;
  bool pass = true;
  Vec witness;
  double margin = 0.0;
  std::string detail;
};

struct ValidationReport {
  std::vector<ValidationCheck> checks;
  bool overall = true;
};

struct SampleBox {
  Vec lo;
  Vec hi;
  static SampleBox centered(int dim, double half_side);
};

ValidationReport validate_model(const ModelSpec& spec, const SampleBox& box, int n_samples,
                                std::uint64_t seed);

/// Halton point k (k ≥ 1) in [0,1)^dim, bases = first primes.
Vec halton_point(std::uint64_t k, int dim);

// ---- built-in models ------------------------------------------------------

struct BuiltinInfo {
  std::string name;
  std::string summary;
  std::vector<std::string> required;
  nlohmann::json defaults;
};

const std::vector<BuiltinInfo>& list_builtins();

/// Strict constructor: every required key must be present and well-sized,
/// unknown keys are rejected.
ModelSpec builtin_model(const std::string& name, const nlohmann::json& params);

/// Parameters of the integrator chain with Kalman index k (k = 0, 1, 2):
/// A is the (k+1)×(k+1) upper shift, B₀ the last unit vector, Z^(2) ≡ 0.
nlohmann::json chain_preset(int k);

/// Fills missing keys from the documented defaults, then calls builtin_model.
ModelSpec builtin_model_with_defaults(const std::string& name, const nlohmann::json& params);

/// Drift declared by expressions over x1..xm, y1..yd.
struct ExpressionModelDecl {
  int m = 0;
  int d = 0;
  std::vector<std::string> z1;
  std::vector<std::string> z2;
  Eigen::MatrixXd sigma;
  Eigen::MatrixXd b0;
  double epsilon = 0.0;
  bool adapted = false;
};

ModelSpec expression_model(const ExpressionModelDecl& decl);

// JSON helpers shared with the config layer.
Eigen::MatrixXd json_to_matrix(const nlohmann::json& j, const std::string& what);
Eigen::VectorXd json_to_vector(const nlohmann::json& j, const std::string& what);
nlohmann::json matrix_to_json(const Eigen::MatrixXd& m);
nlohmann::json vector_to_json(const Eigen::VectorXd& v);

}  // namespace hypograd
