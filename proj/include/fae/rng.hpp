#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <vector>

namespace fae {

// SplitMix64 finalizer, used as the hash behind every random stream in the
// project so that results are reproducible across platforms and standard
// library versions.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() { return mix64(state_++); }

    // Uniform in (0,1); never returns an endpoint.
    double uniform() { return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Unbiased enough for shuffling; Lemire multiply-shift.
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next()) * n) >> 64);
    }

private:
    std::uint64_t state_;
};

// Counter-based generator: a draw is a pure function of (key, a, b, c), so
// callers can regenerate identical noise for a given logical position without
// carrying mutable state around.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t key) : key_(key) {}

    double normal(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        const std::uint64_t h = chain(a, b, c);
        const double u1 = to_unit(mix64(h ^ 0x243F6A8885A308D3ull));
        const double u2 = to_unit(mix64(h ^ 0x13198A2E03707344ull));
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double uniform(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
        return to_unit(chain(a, b, c));
    }

private:
    static double to_unit(std::uint64_t bits) {
        return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
    }

    std::uint64_t chain(std::uint64_t a, std::uint64_t b, std::uint64_t c) const {
        std::uint64_t h = mix64(key_ ^ a);
        h = mix64(h ^ b);
        h = mix64(h ^ c);
        return h;
    }

    std::uint64_t key_;
};

inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    SplitMix64 rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(perm[i - 1], perm[j]);
    }
    return perm;
}

}  // namespace fae
