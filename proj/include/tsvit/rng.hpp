#pragma once

#include <cmath>
#include <cstdint>

namespace tsvit {

// Deterministic, platform-independent random stream (splitmix64). The
// standard <random> distributions are implementation-defined, so every
// sampled value here is produced from explicit arithmetic on the raw
// 64-bit stream to keep outputs bit-identical across toolchains.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Strictly inside (0, 1).
    double uniform01() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller; one sample per call (the sibling sample is discarded to
    // keep the stream position independent of call parity).
    double normal() {
        double u1 = uniform01();
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Standard Gumbel(0,1) via inverse CDF.
    double gumbel() { return -std::log(-std::log(uniform01())); }

    // Stable combination of seed components into a fresh stream seed.
    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

  private:
    uint64_t state_;
};

}  // namespace tsvit
