#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace tmrd {

// Deterministic random source. All distributions are implemented on top of
// the raw mt19937_64 stream so that sequences are identical across standard
// library implementations, and the full state round-trips through a string
// (needed for checkpoint resume).
class Rng {
 public:
  Rng() : engine_(0x9e3779b97f4a7c15ull) {}
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [lo, hi] inclusive
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(engine_() % span);
  }

  // Box-Muller; draws two uniforms per call and discards the pair's twin so
  // the state never carries hidden caches across checkpoints.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void deserialize(const std::string& blob) {
    std::istringstream is(blob);
    is >> engine_;
    if (!is) throw std::runtime_error("rng state blob is malformed");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace tmrd
