#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "sliceprof/errors.hpp"

namespace sliceprof {

/// Seeded random source with save/restore of the full stream state.
///
/// All randomness in the library flows through this class so that a run is
/// reproducible from a seed and resumable from a checkpoint.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform double in [0, 1).
  double uniform01() {
    return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }

  /// Uniform integer in [0, n). Requires n >= 1.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw value_error("uniform_int: n must be >= 1");
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return mean + stddev * normal_(engine_);
  }

  /// Serializes engine and distribution state as a text block.
  std::string save_state() const {
    std::ostringstream os;
    os << engine_ << ' ' << normal_;
    return os.str();
  }

  void load_state(const std::string& text) {
    std::istringstream is(text);
    is >> engine_ >> normal_;
    if (!is) throw data_error("rng state: unparsable state block");
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace sliceprof
