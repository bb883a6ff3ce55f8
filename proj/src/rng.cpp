#include "hypograd/rng.hpp"

#include <cmath>
#include <numbers>

namespace hypograd {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& lo, std::uint32_t& hi) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  lo = static_cast<std::uint32_t>(p);
  hi = static_cast<std::uint32_t>(p >> 32);
}

}  // namespace

PhiloxCounter philox4x32_10(PhiloxCounter ctr, PhiloxKey key) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t lo0, hi0, lo1, hi1;
    mulhilo(kMul0, ctr[0], lo0, hi0);
    mulhilo(kMul1, ctr[2], lo1, hi1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

double uniform_open_closed(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = (static_cast<std::uint64_t>(hi) << 32) | lo;
  // (k + 1) * 2^-53 for k in [0, 2^53): never zero, so log() is safe.
  return (static_cast<double>(bits >> 11) + 1.0) * 0x1.0p-53;
}

NormalStream::NormalStream(std::uint64_t master_seed, std::uint64_t stream, std::uint32_t family)
    : key_{static_cast<std::uint32_t>(master_seed), static_cast<std::uint32_t>(master_seed >> 32)},
      stream_(stream),
      family_(family) {}

void NormalStream::refill() {
  const PhiloxCounter ctr{static_cast<std::uint32_t>(stream_),
                          static_cast<std::uint32_t>(stream_ >> 32), block_++, family_};
  const PhiloxCounter r = philox4x32_10(ctr, key_);
  const double u1 = uniform_open_closed(r[0], r[1]);
  const double u2 = uniform_open_closed(r[2], r[3]);
  const double rad = std::sqrt(-2.0 * std::log(u1));
  const double ang = 2.0 * std::numbers::pi * u2;
  buf_ = {rad * std::cos(ang), rad * std::sin(ang)};
  pos_ = 0;
}

double NormalStream::next() {
  if (pos_ >= 2) refill();
  return buf_[pos_++];
}

}  // namespace hypograd
