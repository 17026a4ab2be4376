#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace falldet {

// Seeded generator shared by initialization, dropout, shuffling and the
// synthetic data generator. Same seed, same stream, same platform: same bits.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  // Resamples until the draw lands within two standard deviations.
  double truncated_normal(double stddev) {
    for (;;) {
      double z = normal();
      if (z > -2.0 && z < 2.0) return z * stddev;
    }
  }
  bool bernoulli(double p) { return uniform() < p; }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  std::uint64_t next() { return engine_(); }

private:
  std::mt19937_64 engine_;
};

}  // namespace falldet
