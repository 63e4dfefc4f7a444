#include "ctlab/rng.hpp"

#include <cmath>

namespace ctlab {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                    std::uint32_t& lo) {
  std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

inline std::array<std::uint32_t, 4> round_once(
    const std::array<std::uint32_t, 4>& c,
    const std::array<std::uint32_t, 2>& k) {
  std::uint32_t hi0, lo0, hi1, lo1;
  mulhilo(kMul0, c[0], hi0, lo0);
  mulhilo(kMul1, c[2], hi1, lo1);
  return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
}

inline double to_unit(std::uint64_t bits) {
  // (0, 1]: 53 high bits, shifted into the open-below interval.
  return static_cast<double>((bits >> 11) + 1) * 0x1.0p-53;
}

}  // namespace

std::array<std::uint32_t, 4> Philox::rounds(std::array<std::uint32_t, 4> ctr,
                                            std::array<std::uint32_t, 2> key) {
  for (int r = 0; r < 10; ++r) {
    ctr = round_once(ctr, key);
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

std::array<std::uint32_t, 4> Philox::block(std::uint64_t counter) const {
  std::array<std::uint32_t, 4> ctr = {
      static_cast<std::uint32_t>(counter),
      static_cast<std::uint32_t>(counter >> 32),
      static_cast<std::uint32_t>(stream_),
      static_cast<std::uint32_t>(stream_ >> 32)};
  return rounds(ctr, key_);
}

double RngStream::uniform() {
  auto b = engine_.block(next_++);
  std::uint64_t lane =
      (static_cast<std::uint64_t>(b[1]) << 32) | b[0];
  return to_unit(lane);
}

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  auto b = engine_.block(next_++);
  std::uint64_t lane0 = (static_cast<std::uint64_t>(b[1]) << 32) | b[0];
  std::uint64_t lane1 = (static_cast<std::uint64_t>(b[3]) << 32) | b[2];
  double u1 = to_unit(lane0);
  double u2 = to_unit(lane1);
  double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(6.283185307179586476925286766559 * u2);
  has_spare_ = true;
  return r * std::cos(6.283185307179586476925286766559 * u2);
}

}  // namespace ctlab
