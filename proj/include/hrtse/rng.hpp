#pragma once

#include <cstdint>
#include <vector>

namespace hrtse {

// Deterministic RNG with explicit substreams. The C++ <random> distributions
// are implementation-defined, so every draw here is spelled out; the same
// (seed, call sequence) yields the same bits on any platform. Core generator
// is splitmix64, which is plenty for data simulation and weight init.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive on both ends. Modulo bias is irrelevant at our range sizes.
    int uniform_int(int lo, int hi) {
        return lo + int(next_u64() % uint64_t(hi - lo + 1));
    }

    // Box-Muller without cached spare, so the draw count stays predictable.
    double normal();

    float uniformf(float lo, float hi) { return float(uniform(lo, hi)); }
    float normalf() { return float(normal()); }

    // Independent substream; forks of forks stay decorrelated.
    Rng fork(uint64_t stream) const;

    // Fisher-Yates over indices 0..n-1.
    std::vector<int> permutation(int n);

  private:
    uint64_t state_;
};

// Stable 64-bit content hash (FNV-1a) used for checkpoint identity checks.
uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace hrtse
