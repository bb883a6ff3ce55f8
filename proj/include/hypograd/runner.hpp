#pragma once

#include "hypograd/config.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace hypograd {

struct ResultRecord {
  std::string config_hash;
  std::string run_id;  // first 12 hex digits of sha256(config_hash:label)
  std::string experiment;
  std::string label;
  nlohmann::json echo;                    // canonical config minus execution-only fields
  std::map<std::string, double> metrics;  // finite values only
  std::vector<std::string> omitted;       // metrics dropped for being non-finite
  nlohmann::json details;                 // structured extras (validation checks, rank lists)
};

nlohmann::json to_json(const ResultRecord& r);

/// Columns for plotdata.csv: abscissa first, then value and std_error columns.
struct PlotTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

struct RunOutcome {
  std::vector<ResultRecord> records;
  std::optional<PlotTable> plot;
  bool validation_failed = false;
  double wall_time_s = 0.0;
};

RunOutcome run_experiment(const ExperimentConfig& cfg);

/// %.17g, so that doubles survive a text round trip.
std::string format_number(double x);

/// Writes results.json, results.csv, plotdata.csv (when present) and timing.json.
void write_artifacts(const std::filesystem::path& dir, const RunOutcome& out, int threads);

std::string results_csv(const std::vector<ResultRecord>& records);
std::string plot_csv(const PlotTable& t);

struct RunOverrides {
  std::optional<int> threads;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

/// Loads, runs and persists one config. Returns the process exit code:
/// 0 success, 2 invalid config or failed validation, 3 degenerate run, 1 other.
int run_config_file(const std::filesystem::path& path, const RunOverrides& ov, std::ostream& log);

/// Human-readable table of builtin models with their parameter keys and defaults.
std::string format_builtins();

}  // namespace hypograd
