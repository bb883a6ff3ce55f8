#include "hypograd/flow.hpp"

#include "hypograd/errors.hpp"
#include "hypograd/rng.hpp"

#include <cmath>

namespace hypograd {

TimeGrid::TimeGrid(double t, int n) : t_final(t), n_steps(n) {
  if (!(t > 0.0) || !std::isfinite(t)) throw ConfigError("time horizon must be positive");
  if (n < 1) throw ConfigError("n_steps must be positive");
}

NoisePath sample_noise(const TimeGrid& grid, int d, std::uint64_t master_seed,
                       std::uint64_t stream, std::uint32_t family, bool negate) {
  NoisePath out;
  out.stream = stream;
  out.increments.resize(grid.n_steps, d);
  NormalStream gen(master_seed, stream, family);
  const double scale = (negate ? -1.0 : 1.0) * std::sqrt(grid.dt());
  for (int i = 0; i < grid.n_steps; ++i)
    for (int c = 0; c < d; ++c) out.increments(i, c) = scale * gen.next();
  return out;
}

StatePath simulate_path(const ModelSpec& spec, const Vec& x0, const TimeGrid& grid,
                        const NoisePath& noise) {
  const int m = spec.m, d = spec.d, n = grid.n_steps;
  if (x0.size() != m + d) throw ConfigError("initial condition has wrong dimension");
  if (noise.increments.rows() != n || noise.increments.cols() != d)
    throw ConfigError("noise path does not match grid and d");
  const double dt = grid.dt();
  StatePath path;
  path.x.resize(static_cast<std::size_t>(n) + 1);
  path.x[0] = x0;
  for (int i = 0; i < n; ++i) {
    const Vec& xi = path.x[static_cast<std::size_t>(i)];
    Vec next = xi + dt * spec.drift(xi);
    next.tail(d) += spec.sigma * noise.increments.row(i).transpose();
    if (!next.allFinite()) {
      path.valid = false;
      path.failed_step = static_cast<std::size_t>(i) + 1;
      path.x.resize(static_cast<std::size_t>(i) + 1);
      return path;
    }
    path.x[static_cast<std::size_t>(i) + 1] = next;
  }
  return path;
}

TerminalFlow terminal_flow(const std::vector<BMat>& a1, double dt) {
  const std::size_t n = a1.size();
  TerminalFlow out;
  const int m = n > 0 ? static_cast<int>(a1[0].rows()) : 0;
  out.k.resize(n + 1);
  out.k[n] = BMat::Identity(m, m);
  for (std::size_t i = n; i-- > 0;) {
    // K(T,t_i) = K(T,t_{i+1}) (I + Δt A1_i)
    out.k[i] = out.k[i + 1] + dt * (out.k[i + 1] * a1[i]);
    if (!out.k[i].allFinite()) {
      out.valid = false;
      out.failed_step = i;
      return out;
    }
  }
  return out;
}

TerminalFlow terminal_flow(const ModelSpec& spec, const StatePath& path, const TimeGrid& grid) {
  if (!path.valid) throw MethodMisuse("terminal_flow needs a valid path");
  std::vector<BMat> a1;
  a1.reserve(static_cast<std::size_t>(grid.n_steps));
  for (int i = 0; i < grid.n_steps; ++i)
    a1.push_back(spec.jac_z1(path.x[static_cast<std::size_t>(i)]).a1);
  return terminal_flow(a1, grid.dt());
}

JacobianPath directional_jacobian(const ModelSpec& spec, const StatePath& path,
                                  const TimeGrid& grid, const Vec& v) {
  if (!path.valid) throw MethodMisuse("directional_jacobian needs a valid path");
  if (v.size() != spec.dim()) throw ConfigError("direction has wrong dimension");
  if (!(v.norm() > 0.0)) throw ConfigError("direction must be nonzero");
  const double dt = grid.dt();
  JacobianPath out;
  out.j.resize(static_cast<std::size_t>(grid.n_steps) + 1);
  out.j[0] = v;
  for (int i = 0; i < grid.n_steps; ++i) {
    const auto si = static_cast<std::size_t>(i);
    out.j[si + 1] = out.j[si] + dt * (spec.jacobian(path.x[si]) * out.j[si]);
    if (!out.j[si + 1].allFinite()) {
      out.valid = false;
      out.failed_step = si + 1;
      return out;
    }
  }
  return out;
}

}  // namespace hypograd
