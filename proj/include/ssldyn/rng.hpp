#pragma once

// Counter-based SplitMix64. Every draw is mix(seed + n*golden) for the n-th
// call, so a stream is fully determined by (seed, call count) on any
// platform. No std:: distributions are used because their output is
// implementation-defined.

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace ssldyn {

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() { return mix(seed_ + (++counter_) * kGamma); }

    // Child stream k. Depends only on the seed, never on how much of this
    // stream has been consumed.
    Rng split(std::uint64_t k) const { return Rng(mix(seed_ ^ mix(k + 0x5851f42d4c957f2dULL))); }

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below(0)");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do { x = next_u64(); } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Marsaglia polar method; the spare value is discarded so that each call
    // consumes a whole number of pairs.
    double normal() {
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        return u * std::sqrt(-2.0 * std::log(s) / s);
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

private:
    static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

} // namespace ssldyn
