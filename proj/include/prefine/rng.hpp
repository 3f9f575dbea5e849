#pragma once

// Deterministic, splittable random streams. Every random decision in the
// pipeline flows through this generator so that runs are reproducible
// bit-for-bit across platforms and worker counts: the standard library's
// distributions are implementation-defined, so uniform/normal draws are
// constructed here explicitly.

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

namespace prefine {

inline uint64_t splitmix64(uint64_t& state) noexcept {
    state += 0x9E3779B97F4A7C15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Stable 64-bit content hash (FNV-1a), used for stream tags and manifests.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xCBF29CE484222325ull) noexcept {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s) noexcept {
    return fnv1a64(s.data(), s.size());
}

// xoshiro256++ seeded via splitmix64. Streams derived with split() are
// decorrelated for distinct tags and independent of how much the parent
// stream has been consumed.
class Rng {
public:
    explicit Rng(uint64_t seed) noexcept : seed_(seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    uint64_t next_u64() noexcept {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // [0, 1) with 53 random bits.
    double uniform() noexcept {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Box-Muller, cosine branch only: exactly two uniforms per draw.
    double normal() noexcept {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    double normal(double mean, double stddev) noexcept {
        return mean + stddev * normal();
    }

    // Unbiased integer in [0, n), n >= 1. Rejection sampling on the top bits.
    int uniform_int(int n) noexcept {
        const uint64_t bound = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<int>(x % bound);
    }

    // Integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) noexcept {
        return lo + uniform_int(hi - lo + 1);
    }

    // Child stream derived from this stream's seed and a tag; unaffected by
    // draws already made from the parent.
    Rng split(uint64_t tag) const noexcept {
        uint64_t sm = seed_ ^ (tag * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull);
        uint64_t derived = splitmix64(sm);
        derived ^= splitmix64(sm);
        return Rng(derived);
    }

    Rng split(std::string_view tag) const noexcept {
        return split(fnv1a64(tag));
    }

    Rng split(uint64_t tag_a, uint64_t tag_b) const noexcept {
        return split(tag_a).split(tag_b);
    }

    uint64_t seed() const noexcept { return seed_; }

private:
    static uint64_t rotl(uint64_t x, int k) noexcept {
        return (x << k) | (x >> (64 - k));
    }

    uint64_t seed_;
    std::array<uint64_t, 4> s_{};
};

}  // namespace prefine
