#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace fcpmp {

// Counter-free splitmix64 generator. Hand-rolled so that streams are
// bit-identical across platforms and standard libraries; std::normal_distribution
// makes no such guarantee.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller with cached spare.
  double normal(double mean, double stddev) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives a child seed from a root seed, a stream name and up to three indices.
// Components are mixed through splitmix64 steps so sibling streams are
// statistically independent and replayable in isolation.
inline std::uint64_t derive_stream(std::uint64_t root, std::string_view name,
                                   std::uint64_t a = 0, std::uint64_t b = 0,
                                   std::uint64_t c = 0) {
  auto mix = [](std::uint64_t h, std::uint64_t v) {
    h ^= v + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
    std::uint64_t z = h + 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  std::uint64_t h = root;
  for (char ch : name) h = mix(h, static_cast<std::uint64_t>(static_cast<unsigned char>(ch)));
  h = mix(h, a);
  h = mix(h, b);
  h = mix(h, c);
  return h;
}

}  // namespace fcpmp
