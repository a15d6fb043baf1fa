#pragma once

// Deterministic, serializable RNG. One generator type backs every random
// decision in the library (init, dropout, shuffling, synthetic data) so a
// run is a pure function of its seed. xoshiro256** core, splitmix64 seeding,
// Box-Muller normals without a cached spare so the full state is the four
// words below.

#include <array>
#include <cmath>
#include <cstdint>

namespace liger {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}
inline std::uint64_t rotl64(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
}
}  // namespace detail

class Rng {
public:
    using State = std::array<std::uint64_t, 4>;

    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& w : s_) w = detail::splitmix64(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl64(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = detail::rotl64(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t uniform_below(std::uint64_t n) {
        // Rejection sampling keeps the distribution exact.
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    double normal(double mu = 0.0, double sigma = 1.0) {
        const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mu + sigma * r * std::cos(6.283185307179586477 * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent child stream; parent state is untouched.
    Rng split(std::uint64_t stream) const {
        std::uint64_t x = s_[0] ^ detail::rotl64(s_[1], 13) ^ (stream * 0x9E3779B97F4A7C15ull + 0x243F6A8885A308D3ull);
        Rng child(0);
        for (auto& w : child.s_) w = detail::splitmix64(x);
        return child;
    }

    State state() const { return s_; }
    void set_state(const State& s) { s_ = s; }

private:
    State s_{};
};

}  // namespace liger
