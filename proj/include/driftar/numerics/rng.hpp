#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "driftar/numerics/tensor.hpp"

namespace driftar {

/// Serializable generator state.
struct RngState {
    std::array<std::uint64_t, 4> words{};
    bool has_spare = false;
    double spare = 0.0;

    friend bool operator==(const RngState&, const RngState&) = default;
};

/// xoshiro256** seeded through splitmix64.
///
/// Integer and uniform draws are bit-identical on every platform. Normal
/// draws use Box-Muller with a cached second variate, so they inherit the
/// host libm's log/sin/cos rounding.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
        std::uint64_t x = seed;
        for (auto& w : state_.words) {
            w = splitmix64(x);
        }
    }

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() noexcept {
        auto& s = state_.words;
        const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
        const std::uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) {
            throw DomainError("Rng::below(0)");
        }
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    double normal() noexcept {
        if (state_.has_spare) {
            state_.has_spare = false;
            return state_.spare;
        }
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        state_.spare = radius * std::sin(angle);
        state_.has_spare = true;
        return radius * std::cos(angle);
    }

    Tensor normal_tensor(Shape shape, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& v : t.values()) {
            v = stddev * normal();
        }
        return t;
    }

    // Independent child stream; leaves this generator advanced by one draw.
    Rng fork() noexcept { return Rng(next_u64()); }

    const RngState& state() const noexcept { return state_; }
    void set_state(const RngState& state) noexcept { state_ = state; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

    static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    RngState state_;
};

}  // namespace driftar
