#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "mcslam/lie.hpp"

namespace mcslam {

/// Portable seedable generator.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. The standard distributions are not portable across library
/// implementations, so uniform and normal variates are derived here directly
/// from the raw 64-bit stream.
///
/// Streams: `Rng::stream(seed, "name")` seeds an independent engine from
/// splitmix64(seed ^ fnv1a(name)). Each simulator subsystem owns one named
/// stream ("trajectory", "imu-noise", "scene", "misalign", ...), so adding
/// draws to one subsystem never shifts another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  static Rng stream(std::uint64_t seed, std::string_view name);

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  /// Standard normal via the Marsaglia polar method.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  Vec3 normal3(double stddev) { return Vec3(normal(), normal(), normal()) * stddev; }
  Vec3 unit_vector();

  static std::uint64_t splitmix64(std::uint64_t x);
  static std::uint64_t fnv1a(std::string_view s);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mcslam
