#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace nvf {

// splitmix64: tiny seedable generator with portable output, used everywhere a
// simulation result must be reproducible across platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, bound). bound must be > 0.
  uint64_t below(uint64_t bound) { return next() % bound; }

  // Uniform in [lo, hi].
  uint64_t range(uint64_t lo, uint64_t hi) { return lo + below(hi - lo + 1); }

  double unit() { return double(next() >> 11) * (1.0 / 9007199254740992.0); }

  uint64_t state() const { return state_; }

 private:
  uint64_t state_;
};

// Zipfian generator over [0, n) with exponent s, YCSB style: precomputed
// zeta, constant-time draws.
class Zipfian {
 public:
  Zipfian(uint64_t n, double s, uint64_t seed);
  uint64_t next();

 private:
  uint64_t n_;
  double theta_, alpha_, zetan_, eta_;
  Rng rng_;
};

inline Zipfian::Zipfian(uint64_t n, double s, uint64_t seed)
    : n_(n), theta_(s), rng_(seed) {
  double zetan = 0, zeta2 = 0;
  for (uint64_t i = 1; i <= n_; i++) {
    zetan += 1.0 / std::pow(double(i), theta_);
    if (i == 2) zeta2 = zetan;
  }
  zetan_ = zetan;
  alpha_ = 1.0 / (1.0 - theta_);
  eta_ = (1.0 - std::pow(2.0 / double(n_), 1.0 - theta_)) / (1.0 - zeta2 / zetan_);
}

inline uint64_t Zipfian::next() {
  double u = rng_.unit();
  double uz = u * zetan_;
  if (uz < 1.0) return 0;
  if (uz < 1.0 + std::pow(0.5, theta_)) return 1;
  return uint64_t(double(n_) * std::pow(eta_ * u - eta_ + 1.0, alpha_));
}

}  // namespace nvf
