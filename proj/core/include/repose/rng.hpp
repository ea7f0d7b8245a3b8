#pragma once

// Deterministic, explicitly-passed random number generator.
//
// xoshiro256++ seeded through splitmix64. Chosen over std::mt19937 because
// the output stream is pinned by this file alone (no standard-library
// implementation freedom), which the bitwise-reproducibility contract needs.
// There is no global RNG anywhere in the library: every sampling function
// takes an Rng& parameter.

#include <array>
#include <cmath>
#include <cstdint>

namespace repose {

namespace detail {
inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
inline uint64_t rotl64(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }
}  // namespace detail

class Rng {
  public:
    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = detail::splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = detail::rotl64(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = detail::rotl64(s_[3], 45);
        return result;
    }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo,hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0,n). n must be > 0. Rejection-free modulo bias is
    // avoided by rejecting the tail of the 64-bit range.
    uint64_t uniform_u64(uint64_t n) {
        const uint64_t limit = ~uint64_t{0} - (~uint64_t{0} % n);
        uint64_t v;
        do { v = next_u64(); } while (v >= limit);
        return v % n;
    }

    // Standard normal via Box-Muller (cosine branch only, so the generator
    // state is exactly the four xoshiro words - nothing cached between calls,
    // which keeps state serialization trivial).
    double normal() {
        const double u1 = 1.0 - uniform();  // (0,1]: keeps log() finite
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    const std::array<uint64_t, 4>& state() const { return s_; }
    void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

  private:
    std::array<uint64_t, 4> s_{};
};

}  // namespace repose
