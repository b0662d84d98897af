#pragma once

#include <cstdint>
#include <random>

#include "spillover/normal.hpp"

namespace spillover {

/// Deterministic random stream. Draws are defined entirely by this header
/// (uniforms from the engine bits, normals by inverse CDF), so a given seed
/// produces identical streams on every platform and in every run.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform on the open interval (0,1).
  double uniform() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal() { return normal_quantile(uniform()); }

  int bernoulli(double p) { return uniform() < p ? 1 : 0; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace spillover
