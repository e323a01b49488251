#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace casd {

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

// Deterministic 64-bit RNG (splitmix64). Uniforms come from the top 53 bits,
// normals from Box-Muller, so two runs with the same seed produce the same
// stream on any platform with IEEE doubles.
struct Rng {
  uint64_t state;

  explicit Rng(uint64_t seed = 0) : state(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0,1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int n) { return int(next_u64() % uint64_t(n)); }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    // Marsaglia polar method; uses only sqrt/log on (0,1] arguments.
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    have_spare_ = true;
    return u * m;
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // derive an independent stream, stable in (seed, salt)
  static uint64_t mix(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Polynomial sin/cos on [-pi, pi], built from +,-,* only, so the synthetic
// data pipeline does not depend on libm accuracy.
namespace detmath {

inline double sin_poly(double x) {
  // |x| <= pi/2 after folding; degree-13 Taylor, error < 1e-12 on the range
  double x2 = x * x;
  double r = -1.0 / 6227020800.0;
  r = r * x2 + 1.0 / 39916800.0;
  r = r * x2 - 1.0 / 362880.0;
  r = r * x2 + 1.0 / 5040.0;
  r = r * x2 - 1.0 / 120.0;
  r = r * x2 + 1.0 / 6.0;
  r = -r * x2 + 1.0;
  return x * r;
}

inline double cos_poly(double x) {
  double x2 = x * x;
  double r = 1.0 / 479001600.0;
  r = r * x2 - 1.0 / 3628800.0;
  r = r * x2 + 1.0 / 40320.0;
  r = r * x2 - 1.0 / 720.0;
  r = r * x2 + 1.0 / 24.0;
  r = r * x2 - 0.5;
  r = r * x2 + 1.0;
  return r;
}

constexpr double kPi = 3.14159265358979323846;

// valid for |x| <= pi (all joint angles are sampled within that range)
inline double sin(double x) {
  if (x > kPi / 2) return sin_poly(kPi - x);
  if (x < -kPi / 2) return sin_poly(-kPi - x);
  return sin_poly(x);
}

inline double cos(double x) {
  if (x > kPi / 2) return -cos_poly(kPi - x);
  if (x < -kPi / 2) return -cos_poly(kPi + x);
  return cos_poly(x);
}

}  // namespace detmath

}  // namespace casd
