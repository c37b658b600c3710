#pragma once

#include <bit>
#include <cstdint>
#include <string_view>

namespace shapelab {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x00000100000001b3ULL;

inline std::uint64_t fnv1a64(std::string_view data,
                             std::uint64_t h = kFnvOffset) {
    for (char c : data) {
        h ^= static_cast<std::uint8_t>(c);
        h *= kFnvPrime;
    }
    return h;
}

// Incremental FNV-1a over a canonical byte stream. Doubles are hashed by
// their IEEE-754 bit pattern so fingerprints are exact, not approximate.
class Fnv1a {
public:
    Fnv1a& add_byte(std::uint8_t b) {
        hash_ ^= b;
        hash_ *= kFnvPrime;
        return *this;
    }

    Fnv1a& add_u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) add_byte(static_cast<std::uint8_t>(v >> (8 * i)));
        return *this;
    }

    Fnv1a& add_i64(std::int64_t v) { return add_u64(static_cast<std::uint64_t>(v)); }

    Fnv1a& add_double(double v) { return add_u64(std::bit_cast<std::uint64_t>(v)); }

    Fnv1a& add_str(std::string_view s) {
        add_u64(s.size());
        for (char c : s) add_byte(static_cast<std::uint8_t>(c));
        return *this;
    }

    std::uint64_t value() const { return hash_; }

private:
    std::uint64_t hash_ = kFnvOffset;
};

}  // namespace shapelab
