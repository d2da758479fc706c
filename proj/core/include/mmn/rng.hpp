#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mmn {

// splitmix64 finaliser; decorrelates structured inputs (seed, epoch, index).
inline std::uint64_t mix_u64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t hash_str(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Stream-keyed derivation: the same (seed, key parts) always yields the same
// engine regardless of call order elsewhere.  Keeps augmentation, shuffling
// and dropout reproducible and independently replayable.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t h = mix_u64(seed);
    h = mix_u64(h ^ a);
    h = mix_u64(h ^ b);
    h = mix_u64(h ^ c);
    return h;
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t a,
                                std::uint64_t b = 0, std::uint64_t c = 0) {
    return std::mt19937_64(derive_seed(seed, a, b, c));
}

// Purpose tags for derived RNG streams.
namespace rng_stream {
inline constexpr std::uint64_t shuffle = hash_str("shuffle");
inline constexpr std::uint64_t augment = hash_str("augment");
inline constexpr std::uint64_t dropout = hash_str("dropout");
inline constexpr std::uint64_t init    = hash_str("init");
inline constexpr std::uint64_t synth   = hash_str("synth");
} // namespace rng_stream

} // namespace mmn
