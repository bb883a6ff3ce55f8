#pragma once

#include "hypograd/linalg.hpp"
#include "hypograd/model.hpp"

#include <cstddef>
#include <cstdint>
#include <vector>

namespace hypograd {

struct TimeGrid {
  double t_final = 1.0;
  int n_steps = 1;

  TimeGrid() = default;
  TimeGrid(double t, int n);

  double dt() const { return t_final / n_steps; }
  double t(int i) const { return t_final * i / n_steps; }
};

/// Brownian increments ΔB_i ~ N(0, Δt I_d), one row per step.
struct NoisePath {
  Eigen::MatrixXd increments;  // N × d
  std::uint64_t stream = 0;
};

/// Increments for one stream of the counter-based generator. With negate set,
/// the antithetic partner of the same stream is returned.
NoisePath sample_noise(const TimeGrid& grid, int d, std::uint64_t master_seed,
                       std::uint64_t stream, std::uint32_t family = 0, bool negate = false);

struct StatePath {
  std::vector<Vec> x;  // N+1 states
  bool valid = true;
  std::size_t failed_step = 0;
};

StatePath simulate_path(const ModelSpec& spec, const Vec& x0, const TimeGrid& grid,
                        const NoisePath& noise);

struct TerminalFlow {
  std::vector<BMat> k;  // K(T, t_i), i = 0..N
  bool valid = true;
  std::size_t failed_step = 0;
};

/// K(T,t_i) = P_{N-1}···P_i with P_i = I + Δt A1_i, from per-step generators.
TerminalFlow terminal_flow(const std::vector<BMat>& a1, double dt);
TerminalFlow terminal_flow(const ModelSpec& spec, const StatePath& path, const TimeGrid& grid);

struct JacobianPath {
  std::vector<Vec> j;  // ∇_v X_{t_i}, i = 0..N
  bool valid = true;
  std::size_t failed_step = 0;
};

JacobianPath directional_jacobian(const ModelSpec& spec, const StatePath& path,
                                  const TimeGrid& grid, const Vec& v);

}  // namespace hypograd
