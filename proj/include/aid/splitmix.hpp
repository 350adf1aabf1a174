#pragma once

#include <cstdint>

namespace aid {

// SplitMix64. Small, splittable, identical output on every platform;
// the weight-generation and trace-generation contracts both pin this
// exact sequence.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // High 53 bits over 2^53, uniform in [0, 1).
    double uniform01() {
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    // Affine map of uniform01 onto [-0.1, 0.1); the toy-model weight scale.
    double weight() {
        return uniform01() * 0.2 - 0.1;
    }

    // Uniform integer in [0, n), n >= 1. Modulo bias is irrelevant here
    // (n is tiny against 2^64) and keeps the sequence platform-exact.
    std::uint64_t below(std::uint64_t n) {
        return next() % n;
    }

private:
    std::uint64_t state_;
};

} // namespace aid
