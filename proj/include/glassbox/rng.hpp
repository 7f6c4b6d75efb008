#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace glassbox {

// xoshiro256** (Blackman & Vigna), state expanded from a 64-bit seed with
// SplitMix64. The integer stream is bit-identical on every platform; the
// floating-point helpers use only IEEE-exact operations apart from the
// log/cos in normal().
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept;
  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  // Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t uniform_int(std::uint64_t bound) noexcept;
  // Box-Muller; consumes two uniforms per call.
  double normal(double mean = 0.0, double stddev = 1.0) noexcept;

  // Independent sub-stream keyed by `key`. Depends only on this generator's
  // seed, never on how much of the stream has been consumed.
  Rng split(std::uint64_t key) const noexcept;
  Rng split(std::string_view label) const noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

std::uint64_t splitmix64(std::uint64_t& state) noexcept;
// FNV-1a, used for hashing labels and for golden-trace fingerprints.
std::uint64_t fnv1a64(const void* data, std::size_t size,
                      std::uint64_t basis = 0xcbf29ce484222325ULL) noexcept;

}  // namespace glassbox
