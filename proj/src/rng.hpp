#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "util.hpp"

namespace seqctl {

// Deterministic RNG. All draw primitives are implemented by hand on top of
// mt19937_64 so that results do not depend on the standard library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive. Rejection sampling keeps the
  // distribution exact.
  int uniform_int(int lo, int hi) {
    require(lo <= hi, Error::Kind::InvalidArgument, "uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
    uint64_t limit = UINT64_MAX - (UINT64_MAX % span);
    uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return lo + static_cast<int>(v % span);
  }

  // Box-Muller with a cached spare.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Samples an index from unnormalized nonnegative weights by a single
  // uniform draw and an ascending CDF walk.
  int categorical(const double* w, int n, double* draw_out = nullptr) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += w[i];
    require(total > 0.0 && std::isfinite(total), Error::Kind::Runtime,
            "categorical: weights must be finite with positive sum");
    double raw = uniform();
    if (draw_out != nullptr) *draw_out = raw;
    double u = raw * total;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      acc += w[i];
      if (u < acc) return i;
    }
    return n - 1;  // guard against accumulated rounding
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent stream, e.g. one per document.
  Rng fork(uint64_t stream) const {
    uint64_t h = fnv1a(&stream, sizeof(stream), seed_hash_);
    return Rng(h);
  }

  static Rng forked(uint64_t seed, uint64_t stream) {
    Rng r(seed);
    r.seed_hash_ = fnv1a(&seed, sizeof(seed));
    return r.fork(stream);
  }

 private:
  std::mt19937_64 gen_;
  uint64_t seed_hash_ = 14695981039346656037ull;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace seqctl
