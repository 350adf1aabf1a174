#pragma once

#include <string>
#include <vector>

#include "aid/detector.hpp"
#include "aid/salience.hpp"
#include "aid/trace.hpp"

namespace aid {

// Attention cut-off for the selected hijackers. layer_cap counts salience
// layers: attention layers 0..layer_cap-1 are edited, so layer_cap = L masks
// every attention layer and layer_cap = 0 masks none. visual_fraction rho
// masks the first ceil(rho * |image block|) image keys in position order.
// strict additionally severs hijacker edges to non-hijacker instruction keys
// that carry visual information at the edited layer.
struct DisentanglementPlan {
    std::vector<int> hijackers; // absolute instruction positions
    int layer_cap = 0;
    double visual_fraction = 1.0;
    bool strict = false;
};

// Plan lowered against a concrete trace: the exact keys to zero per edited
// attention layer. The strict key sets are resolved from the instruction
// salience of the trace the plan is applied to.
struct ResolvedPlan {
    std::vector<int> hijackers;
    int masked_layers = 0;                      // attention layers [0, masked_layers)
    std::vector<int> image_keys;                // same for every edited layer
    std::vector<std::vector<int>> strict_keys;  // per edited layer, may be empty
};

// Outcome of the keep/revert comparison between the unmasked and masked
// salience fields. delta is the drop in the summed instruction-to-image
// salience ratios; the mask is kept only when the drop is strictly positive.
struct DisentanglementDecision {
    struct PerToken {
        int generated = 0;     // absolute position
        double unmasked = 0.0; // ratio sum over instruction sources
        double masked = 0.0;
    };
    double delta = 0.0;
    bool keep = false;
    double unmasked_ratio_sum = 0.0;
    double masked_ratio_sum = 0.0;
    std::vector<PerToken> per_token;
};

DisentanglementPlan build_plan(const HijackerReport& report, int layer_cap,
                               double visual_fraction, bool strict);

ResolvedPlan resolve_plan(const HeadAggregatedTrace& trace, const DisentanglementPlan& plan);

// Zeroes the masked keys of `row` (the prefill row of hijacker `self`) and
// renormalizes the survivors. Rows the mask removes no mass from are left
// bit-identical; a row losing all mass collapses onto the self edge.
// Returns true when the row changed.
bool mask_row(Eigen::VectorXd& row, const std::vector<int>& image_keys,
              const std::vector<int>& strict_keys, int self);

// New trace with every targeted (layer, hijacker) row edited; all other rows
// are returned bit-identical. Exactly idempotent.
HeadAggregatedTrace apply_plan(const HeadAggregatedTrace& trace,
                               const DisentanglementPlan& plan);

DisentanglementDecision re_disentanglement(const SalienceField& unmasked,
                                           const SalienceField& masked);

std::string plan_to_json(const DisentanglementPlan& plan);
DisentanglementPlan plan_from_json(std::string_view text);
std::string decision_to_json(const DisentanglementDecision& decision);

} // namespace aid
