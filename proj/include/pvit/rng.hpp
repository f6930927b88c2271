#pragma once

// Deterministic 64-bit PRNG used everywhere randomness is needed.
// splitmix64 core with Box-Muller normals on top; no std::random
// distributions so that streams are identical across platforms.
// The identifier below is embedded in dataset headers.

#include <cmath>
#include <cstdint>
#include <string>

namespace pvit {

inline constexpr const char* kRngId = "splitmix64/box-muller-v1";

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Mixes a label into a seed so that independent streams (datasets, epochs,
// batch slots) can be derived from one base seed without overlap.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL + (salt << 6) + (salt >> 2));
    splitmix64(s);
    return splitmix64(s);
}

inline std::uint64_t hash_str(const std::string& text) {
    // FNV-1a, 64-bit.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    // Uniform in [0,1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    double normal() {
        // Box-Muller; draws two uniforms per call, returns one deviate.
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

    Rng fork(std::uint64_t salt) { return Rng(mix_seed(next_u64(), salt)); }

private:
    std::uint64_t state_;
};

}  // namespace pvit
