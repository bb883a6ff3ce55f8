#pragma once

#include "hypograd/estimator.hpp"
#include "hypograd/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace hypograd {

inline constexpr int kSchemaVersion = 1;

enum class Experiment { validate, estimate, sweep_T, gramian, kalman, harnack, entropy_gradient, duality_test };

std::string to_string(Experiment e);
Experiment experiment_from_string(const std::string& s);

/// Either a builtin (name + params, merged over the documented defaults) or
/// an expression drift.
struct ModelDecl {
  std::string builtin;
  nlohmann::json params = nlohmann::json::object();
  std::optional<ExpressionModelDecl> expression;
};

ModelSpec build_model(const ModelDecl& decl);

struct HarnackDecl {
  std::vector<Vec> x, v;
  std::vector<double> p_grid;
  double l1 = 0.0;
  std::optional<int> kalman_k;  // from the Kalman index of (∇^(1)Z^(1), B₀) when absent
};

struct ValidateDecl {
  double half_side = 2.0;
  int n_samples = 512;
  std::uint64_t seed = 1;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  Experiment experiment = Experiment::estimate;
  ModelDecl model;
  Vec x0, v;
  nlohmann::json f;            // test function declaration (tag + params)
  double t_final = 1.0;        // grid.T
  int n_steps = 64;            // grid.N
  EstimatorConfig estimator;   // n_steps mirrors grid.N
  std::vector<Method> methods;       // estimate: one record per method
  std::vector<double> t_grid;        // sweep_T, gramian
  std::vector<double> lambda_grid;   // entropy_gradient
  HarnackDecl harnack;
  ValidateDecl validate;
  std::string output = "results";
};

/// Strict parse: unknown keys, keys unused by the experiment, missing required
/// keys and dimension mismatches all throw ConfigError.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical form with every default made explicit; parse_config(to_json(c))
/// reproduces c.
nlohmann::json to_json(const ExperimentConfig& c);

nlohmann::json estimator_to_json(const EstimatorConfig& c);

/// SHA-256 (hex) of the canonical config with the execution-only fields
/// (output, estimator.threads) removed.
std::string config_hash(const ExperimentConfig& c);

std::string sha256_hex(const std::string& data);

}  // namespace hypograd
