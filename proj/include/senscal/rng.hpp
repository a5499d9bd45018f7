#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace senscal {

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Counter-based substream ids so that every source of randomness hangs off a
// single user seed. Streams are identified by a path of integers, e.g.
// {stream::bootstrap, replicate_index}.
namespace stream {
inline constexpr std::uint64_t simulate = 1;
inline constexpr std::uint64_t bootstrap = 2;
inline constexpr std::uint64_t study_rep = 3;
inline constexpr std::uint64_t boundary = 4;
}  // namespace stream

// Deterministic xoshiro256** generator with hand-rolled distributions, so
// that identical seeds give identical draws on every build.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::initializer_list<std::uint64_t> path = {}) {
    std::uint64_t mix = seed;
    (void)splitmix64_next(mix);
    for (std::uint64_t part : path) {
      mix ^= part + 0x9e3779b97f4a7c15ULL + (mix << 6) + (mix >> 2);
      (void)splitmix64_next(mix);
    }
    for (auto& word : s_) word = splitmix64_next(mix);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform on [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer on [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // Box-Muller on (0,1] uniforms
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double angle = 6.283185307179586476925286766559 * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

  // Marsaglia-Tsang; mean = shape, scale 1
  double gamma(double shape) {
    if (shape < 1.0) {
      double u = 1.0 - uniform();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = 1.0 - uniform();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

  double student_t(double df) {
    double chisq = 2.0 * gamma(0.5 * df);
    return normal() * std::sqrt(df / chisq);
  }

  // density (rate/2) exp(-rate |x|)
  double laplace(double rate) {
    double u = uniform() - 0.5;
    double sign = u < 0.0 ? -1.0 : 1.0;
    return -sign * std::log1p(-2.0 * std::fabs(u)) / rate;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t s_[4];
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace senscal
