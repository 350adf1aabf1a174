#pragma once

#include <string>
#include <vector>

#include "aid/salience.hpp"
#include "aid/trace.hpp"

namespace aid {

// Hijacker count; two masked hijackers measured best in ablation.
inline constexpr int kDefaultHijackerCount = 2;

// Ranked instruction-token salience totals and the selected set.
struct HijackerReport {
    std::vector<int> instruction_indices; // absolute positions, ascending
    std::vector<double> scores;           // aligned with instruction_indices
    int k = 0;
    std::vector<int> hijackers;           // selected absolute indices, ascending
    std::vector<std::vector<int>> ties;   // score groups straddling the cut
    bool truncated = false;               // k exceeded the instruction count

    double score_of(int absolute_index) const;
    bool is_hijacker(int absolute_index) const;
};

// Top-k instruction tokens by total contributed visual salience. Boundary
// ties go to the lowest token index, which keeps k -> k+1 selections nested.
HijackerReport detect_hijackers(const SalienceField& field, int k);

struct LayerPolicy {
    enum class Kind { PerLayerMean, SingleLayer } kind = Kind::PerLayerMean;
    int layer = 0; // attention layer, used by SingleLayer only
};

// Per-generated-token cosine similarity between the source token's and the
// generated token's attention rows restricted to the image keys.
struct SimilarityCurve {
    int source = 0;
    std::vector<double> values; // one per generated token
    LayerPolicy layer_policy;
};

SimilarityCurve attention_similarity(const HeadAggregatedTrace& trace, int source,
                                     LayerPolicy policy = {});

std::string report_to_json(const HijackerReport& report);

// One row per instruction token: index, text, score, selected flag.
std::string report_to_csv(const HijackerReport& report, const std::vector<std::string>& texts);

std::string similarity_to_json(const SimilarityCurve& curve);

} // namespace aid
