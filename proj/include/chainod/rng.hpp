#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace chainod {

// Seeded generator with portable derived distributions. The engine is
// std::mt19937_64, whose output sequence is fixed by the standard; uniform
// and normal draws are derived here rather than through <random>
// distributions, whose algorithms differ between standard libraries.
class Rng {
 public:
  static constexpr const char* algorithm = "mt19937_64";

  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform on [-1, 1).
  double symmetric() { return 2.0 * uniform() - 1.0; }

  // Standard normal via Box-Muller; draws come in pairs.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace chainod
