#pragma once

#include <array>
#include <cstdint>

namespace hypograd {

// Philox4x32-10 (Salmon, Moraes, Dror, Shaw 2011). Stateless: output is a pure
// function of (counter, key), so any path's noise can be regenerated from its
// index alone, independent of thread scheduling.
using PhiloxCounter = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

PhiloxCounter philox4x32_10(PhiloxCounter ctr, PhiloxKey key);

/// Standard-normal stream for one (master_seed, family, stream) triple.
/// Blocks are consumed in order; every block yields two normals (Box-Muller on
/// two 53-bit uniforms).
class NormalStream {
 public:
  NormalStream(std::uint64_t master_seed, std::uint64_t stream, std::uint32_t family = 0);

  double next();

 private:
  void refill();

  PhiloxKey key_;
  std::uint64_t stream_;
  std::uint32_t family_;
  std::uint32_t block_ = 0;
  std::array<double, 2> buf_{};
  int pos_ = 2;
};

/// Uniform in (0, 1] from 64 random bits, 53-bit resolution.
double uniform_open_closed(std::uint32_t hi, std::uint32_t lo);

}  // namespace hypograd
