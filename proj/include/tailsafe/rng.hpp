#pragma once

#include "black_scholes.hpp"

#include <cstdint>

namespace tailsafe {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Counter-based generator: every draw is a pure function of (seed, path, step, channel),
/// so panels are reproducible regardless of evaluation order.
class CounterRng {
public:
    constexpr explicit CounterRng(std::uint64_t seed) noexcept : seed_(seed) {}

    constexpr std::uint64_t bits(std::uint64_t path, std::uint64_t step, std::uint64_t channel) const noexcept {
        std::uint64_t h = mix64(seed_);
        h = mix64(h ^ path);
        h = mix64(h ^ (step * 0xD6E8FEB86659FD93ULL));
        return mix64(h ^ (channel + 0x632BE59BD9B4E019ULL));
    }

    /// Uniform on the open interval (0,1).
    constexpr double uniform(std::uint64_t path, std::uint64_t step, std::uint64_t channel) const noexcept {
        return (static_cast<double>(bits(path, step, channel) >> 11) + 0.5) * 0x1.0p-53;
    }

    double normal(std::uint64_t path, std::uint64_t step, std::uint64_t channel) const {
        return bs::norm_inv(uniform(path, step, channel));
    }

    constexpr std::uint64_t seed() const noexcept { return seed_; }

private:
    std::uint64_t seed_;
};

/// Per-path view onto a CounterRng.
struct RngStream {
    CounterRng rng;
    std::uint64_t path = 0;

    double normal(std::uint64_t step, std::uint64_t channel) const { return rng.normal(path, step, channel); }
};

/// Derives the generator seed for replicate `index` of a base seed.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) noexcept {
    return mix64(base ^ mix64(index + 1));
}

}  // namespace tailsafe
