// Self-contained deterministic RNG. The standard <random> distributions are
// implementation-defined, so everything that must reproduce bit-for-bit
// (datasets, weight init, batch order) goes through this generator instead.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace segrefine {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Stable per-item seed: hash of a base seed and a textual tag (sample id,
/// stream name, ...). Used so parallel per-sample generation stays ordered.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
    std::uint64_t s = base ^ fnv1a64(tag);
    return splitmix64(s);
}

/// xoshiro256++ with splitmix64 seeding. State is four u64 words and is
/// serialized into checkpoints verbatim.
class Rng {
public:
    using State = std::array<std::uint64_t, 4>;

    explicit Rng(std::uint64_t seed = 0) {
        std::uint64_t sm = seed;
        for (auto& w : state_) w = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, bound). Rejection sampling, no modulo bias.
    std::uint64_t uniform_int(std::uint64_t bound) {
        if (bound <= 1) return 0;
        const std::uint64_t threshold = (0ULL - bound) % bound;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    /// Standard normal via Box-Muller (uncached, fixed evaluation order).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        // Guard log(0); pushes u1 to the smallest representable positive step.
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Fisher-Yates shuffle driven by this generator (std::shuffle is
    /// implementation-defined).
    template <typename Vec>
    void shuffle(Vec& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    const State& state() const { return state_; }
    void set_state(const State& s) { state_ = s; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    State state_{};
};

}  // namespace segrefine
