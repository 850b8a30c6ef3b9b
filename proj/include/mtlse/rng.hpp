#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace mtlse {

// Every stochastic component draws from its own named stream so that adding
// or removing one component (e.g. the discriminator) does not shift the
// draws seen by the others.
inline std::uint64_t hash_name(const std::string& name) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char c : name) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::mt19937_64 seeded_rng(std::uint64_t seed, const std::string& stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed),
                      static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(hash_name(stream)),
                      static_cast<std::uint32_t>(hash_name(stream) >> 32)};
    return std::mt19937_64(seq);
}

}  // namespace mtlse
