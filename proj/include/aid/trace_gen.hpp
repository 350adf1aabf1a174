#pragma once

#include <cstdint>

#include "aid/trace.hpp"

namespace aid {

// Bounds for randomly generated validation traces. Defaults sit inside the
// enumeration oracle's caps.
struct RandomTraceSpec {
    int max_layers = 3;
    int max_tokens = 10;
    int max_steps = 3;
    int max_heads = 2;
    bool allow_other = false;
};

// Deterministic valid trace drawn from the SplitMix64 stream of `seed`:
// random block sizes, strictly positive normalized rows.
AttentionTrace random_trace(const RandomTraceSpec& spec, std::uint64_t seed);

} // namespace aid
