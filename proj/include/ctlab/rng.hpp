#pragma once

#include <array>
#include <cstdint>

namespace ctlab {

// Philox4x32-10 counter-based generator (Salmon, Moraes, Dror, Shaw 2011).
// The value stream is a pure function of (seed, stream, draw index), so
// results are reproducible across platforms and independent of any thread
// schedule.  Streams with distinct ids never overlap: the stream id lives in
// the high counter words, the draw index in the low ones.
class Philox {
 public:
  Philox(std::uint64_t seed, std::uint64_t stream = 0)
      : key_{static_cast<std::uint32_t>(seed),
             static_cast<std::uint32_t>(seed >> 32)},
        stream_(stream) {}

  // One 128-bit output block for the given draw counter.
  std::array<std::uint32_t, 4> block(std::uint64_t counter) const;

  // Raw 10-round keyed bijection; exposed for known-answer tests.
  static std::array<std::uint32_t, 4> rounds(std::array<std::uint32_t, 4> ctr,
                                             std::array<std::uint32_t, 2> key);

 private:
  std::array<std::uint32_t, 2> key_;
  std::uint64_t stream_;
};

// Sequential view over one Philox stream.  Each call consumes one counter
// block, so interleaving uniform and normal draws cannot collide.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream = 0)
      : engine_(seed, stream) {}

  // Uniform double in (0, 1].
  double uniform();

  // Standard normal via Box-Muller; pairs come from a single block.
  double normal();

 private:
  Philox engine_;
  std::uint64_t next_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace ctlab
