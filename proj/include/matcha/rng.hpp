#pragma once

#include <cstdint>
#include <random>

namespace matcha {

// Seedable, splittable RNG. A split derives a child stream from the root
// seed and a stream id, so draws in one stream never perturb another.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(mix(seed, 0x9e3779b97f4a7c15ull)) {}

    // Child stream keyed by id; independent of draws already made here.
    Rng split(std::uint64_t stream_id) const { return Rng(mix(seed_, stream_id)); }

    std::uint64_t seed() const { return seed_; }

    double uniform() {
        return std::uniform_real_distribution<double>(0.0, 1.0)(gen_);
    }
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(gen_);
    }
    double normal() {
        return std::normal_distribution<double>(0.0, 1.0)(gen_);
    }
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {  // inclusive
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(gen_);
    }

    std::mt19937_64& engine() { return gen_; }

    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        // splitmix64 finalizer over the combined word
        std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
};

}  // namespace matcha
