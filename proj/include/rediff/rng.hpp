#pragma once

#include <cstdint>
#include <string_view>

namespace rediff {

// 64-bit FNV-1a, used for substream derivation and content hashes.
inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    // splitmix64 finalizer over the xor-rotated pair
    uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

// Deterministic splitmix64 generator. All randomness in the project flows
// from one run seed through named substreams so that data construction,
// init and decoding can be reproduced independently of each other.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform in (0, 1]; used for noise levels where 1/t must stay finite
    double uniform_open0() { return 1.0 - uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) {
        // multiply-shift bounded draw; bias is negligible for the small n used here
        return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Independent substream named by a label (and optional index).
    Rng substream(std::string_view label) const {
        return Rng(hash_combine(state_, fnv1a(label)));
    }
    Rng substream(std::string_view label, uint64_t index) const {
        return Rng(hash_combine(hash_combine(state_, fnv1a(label)), index));
    }

    uint64_t state() const { return state_; }

private:
    uint64_t state_;
};

}  // namespace rediff
