#pragma once

#include <cstdint>

#include "math.hpp"

namespace tofr {

inline uint64_t mix64(uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Counter-based RNG. The stream is a pure function of (key, counter), so a
// snapshot of both replays the exact same draws from any thread or pixel.
struct RngState {
    uint64_t key = 0;
    uint64_t counter = 0;
};

class Rng {
  public:
    Rng() = default;
    explicit Rng(RngState s) : state_(s) {}
    Rng(uint64_t seed, uint64_t frame, uint64_t pixel, uint64_t sample, uint64_t lane) {
        uint64_t k = mix64(seed ^ 0x5bd1e995u);
        k = mix64(k ^ frame);
        k = mix64(k ^ (pixel * 0x9e3779b97f4a7c15ull));
        k = mix64(k ^ (sample * 0xc2b2ae3d27d4eb4full));
        k = mix64(k ^ (lane * 0x165667b19e3779f9ull));
        state_.key = k;
        state_.counter = 0;
    }

    RngState state() const { return state_; }
    void restore(RngState s) { state_ = s; }

    uint64_t next_u64() { return mix64(state_.key ^ (0x9e3779b97f4a7c15ull * ++state_.counter)); }

    // uniform in [0,1) with 53 random bits
    double next() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double next_range(double lo, double hi) { return lo + (hi - lo) * next(); }

    uint32_t next_below(uint32_t n) { return uint32_t(next_u64() % n); }

  private:
    RngState state_;
};

}  // namespace tofr
