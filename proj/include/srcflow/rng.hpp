#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace srcflow {

/// Counter-based generator: output i of stream (seed, stream) is
/// splitmix64(key + (i + 1) * golden), with key a hash of (seed, stream).
/// Any draw can be reproduced from (seed, stream, counter) alone, so
/// independent streams never share state.
class Rng {
public:
    Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
        : key_(mix(mix(seed) ^ (stream * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL))) {}

    std::uint64_t next_u64() noexcept {
        ++counter_;
        return mix(key_ + counter_ * kGolden);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; both values of a pair are used.
    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Uniform integer in [0, n) by rejection; n > 0.
    std::uint64_t below(std::uint64_t n) noexcept {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    std::uint64_t counter() const noexcept { return counter_; }

    static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
        z += 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Derives a child seed from a parent seed and a list of indices.
    template <class... Ix>
    static constexpr std::uint64_t derive(std::uint64_t seed, Ix... ix) noexcept {
        std::uint64_t s = mix(seed);
        ((s = mix(s ^ (static_cast<std::uint64_t>(ix) + 0x632BE59BD9B4E019ULL))), ...);
        return s;
    }

private:
    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace srcflow
