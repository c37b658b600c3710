#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace shapelab {

// splitmix64; used for seeding and for deriving named child streams.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_;
};

// xoshiro256** with serializable state. All simulation randomness goes
// through this generator so runs replay identically across platforms
// (std::uniform_*_distribution is not bit-stable between stdlibs).
class Xoshiro256 {
public:
    using State = std::array<std::uint64_t, 4>;

    static Xoshiro256 seeded(std::uint64_t seed) {
        SplitMix64 sm(seed);
        Xoshiro256 rng;
        for (auto& word : rng.state_) word = sm.next();
        return rng;
    }

    std::uint64_t next() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Unbiased integer in [0, n) via rejection on the top bits.
    std::uint64_t uniform_below(std::uint64_t n) {
        const std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            const std::uint64_t r = next();
            if (r >= threshold) return r % n;
        }
    }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    const State& state() const { return state_; }
    void set_state(const State& s) { state_ = s; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    State state_{1, 2, 3, 4};
};

// Deterministic child-seed derivation: mixes a base seed with a stream tag
// (and optional index) so distinct uses never share a stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ base;
    for (char c : tag) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x00000100000001b3ULL;
    }
    return SplitMix64(h).next();
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::uint64_t index) {
    return SplitMix64(derive_seed(base, tag) ^ (index * 0x9e3779b97f4a7c15ULL)).next();
}

}  // namespace shapelab
