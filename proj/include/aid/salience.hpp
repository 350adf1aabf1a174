#pragma once

#include <Eigen/Core>

#include <string>
#include <vector>

#include "aid/trace.hpp"

namespace aid {

// Layer convention for the generated-token recursions. The written form
// couples generated token i at layer l to the same-layer instruction and
// image values; the previous-layer variant is a compile-time sensitivity
// knob, not the default.
enum class GenTerms { SameLayer, PreviousLayer };

// Visual-information tables over salience layers 0..L, where layer 0 is the
// pre-attention base case and layer l >= 1 reads attention layer l-1.
//
// vis(l, a): visual information of the a-th image token (ordinal within the
// image block). ins(l, b): likewise for instruction tokens. gen_instruction[i]
// is the (L+1) x num_instruction table of contributions from each instruction
// token to generated token i; gen_image[i] the (L+1) column of direct
// image-driven contributions (the sentinel source).
struct SalienceField {
    TokenLayout layout;
    Eigen::MatrixXd vis;
    Eigen::MatrixXd ins;
    std::vector<Eigen::MatrixXd> gen_instruction;
    std::vector<Eigen::VectorXd> gen_image;

    int top_layer() const { return static_cast<int>(vis.rows()) - 1; }
    int num_generated() const { return static_cast<int>(gen_instruction.size()); }

    // Sum over generated tokens of the top-layer contribution from the
    // instruction token with ordinal `b`; the detector's ranking score.
    double instruction_total(int b) const {
        double acc = 0.0;
        for (const auto& g : gen_instruction) acc += g(top_layer(), b);
        return acc;
    }
};

// The (1+w) interaction sums run over the edges that carry weight plus the
// query's own residual edge; a zero-weight edge is not an interaction, which
// is what lets a fully severed token's salience collapse to an exact zero.
Eigen::MatrixXd compute_visual_salience(const HeadAggregatedTrace& trace);

Eigen::MatrixXd compute_instruction_salience(const HeadAggregatedTrace& trace,
                                             const Eigen::MatrixXd& vis);

template <GenTerms Terms = GenTerms::SameLayer>
std::vector<Eigen::MatrixXd> compute_generated_contributions(const HeadAggregatedTrace& trace,
                                                             const Eigen::MatrixXd& vis,
                                                             const Eigen::MatrixXd& ins);

template <GenTerms Terms = GenTerms::SameLayer>
std::vector<Eigen::VectorXd> compute_image_contribution(const HeadAggregatedTrace& trace,
                                                        const Eigen::MatrixXd& vis);

// Full field in one call; requires at least one decode step.
template <GenTerms Terms = GenTerms::SameLayer>
SalienceField compute_salience(const HeadAggregatedTrace& trace);

// Size caps for the enumeration oracle.
inline constexpr int kOracleMaxLayers = 4;
inline constexpr int kOracleMaxTokens = 16;
inline constexpr int kOracleMaxSteps = 4;

// Same quantities by literal term-by-term expansion of the recursions, no
// memoization. Exponential in depth; throws instance_too_large beyond the
// caps above.
SalienceField oracle_salience(const HeadAggregatedTrace& trace);

// Largest entrywise relative deviation between two fields of equal shape.
double max_relative_deviation(const SalienceField& a, const SalienceField& b);

// Report JSON (top-layer gen map keyed by absolute indices, "-1" for the
// image-driven channel); per_layer adds the per-layer gen dumps.
std::string salience_to_json(const SalienceField& field, bool per_layer = false);

} // namespace aid
