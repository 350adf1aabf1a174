#pragma once

#include <Eigen/Core>

#include <string>
#include <string_view>
#include <vector>

#include "aid/error.hpp"

namespace aid {

enum class TokenRole { Image, Instruction, Generated, Other };

const char* role_name(TokenRole r);
TokenRole role_from_name(std::string_view name);

// Half-open [begin, end) index range over absolute token positions.
struct IndexRange {
    int begin = 0;
    int end   = 0;

    int  size() const { return end - begin; }
    bool contains(int i) const { return i >= begin && i < end; }

    bool operator==(const IndexRange&) const = default;
};

// Role assignment per absolute position. Block order is fixed:
// [other*] [image+] [instruction+] [generated*].
struct TokenLayout {
    std::vector<TokenRole> roles;
    IndexRange image_range;
    IndexRange instruction_range;
    int generated_start = 0;

    int num_tokens() const { return static_cast<int>(roles.size()); }
    int num_image() const { return image_range.size(); }
    int num_instruction() const { return instruction_range.size(); }
    int num_generated() const { return num_tokens() - generated_start; }
    int num_other() const { return image_range.begin; }

    bool is_image(int i) const { return image_range.contains(i); }
    bool is_instruction(int i) const { return instruction_range.contains(i); }
    bool is_generated(int i) const { return i >= generated_start && i < num_tokens(); }

    bool operator==(const TokenLayout&) const = default;
};

// Builds and validates a layout from a role list; throws layout_violation
// when the block order or non-emptiness rules are broken.
TokenLayout make_layout(const std::vector<TokenRole>& roles);

// Immutable record of one autoregressive run's attention weights.
//
// prefill[layer][head][query] is query's causal row (length query+1) over
// positions 0..generated_start-1; decode[step][layer][head] is the single
// query row of the token at position generated_start+step.
struct AttentionTrace {
    int num_layers = 0;
    int num_heads  = 0;
    TokenLayout layout;
    std::vector<std::string> texts; // per absolute position, may be empty
    std::vector<std::vector<std::vector<Eigen::VectorXd>>> prefill;
    std::vector<std::vector<std::vector<Eigen::VectorXd>>> decode;
    std::string meta; // verbatim `meta` JSON object from the source document, "" if absent

    int num_decode_steps() const { return static_cast<int>(decode.size()); }
};

enum class HeadPolicy { Mean, Max };

// AttentionTrace with the head axis collapsed; what all analyses consume.
struct HeadAggregatedTrace {
    int num_layers = 0;
    TokenLayout layout;
    HeadPolicy policy = HeadPolicy::Mean;
    std::vector<std::vector<Eigen::VectorXd>> prefill; // [layer][query]
    std::vector<std::vector<Eigen::VectorXd>> decode;  // [step][layer]

    int num_decode_steps() const { return static_cast<int>(decode.size()); }

    // Row of the query at absolute position `pos` in attention layer `layer`.
    const Eigen::VectorXd& row(int layer, int pos) const {
        return pos < layout.generated_start ? prefill[layer][pos]
                                            : decode[pos - layout.generated_start][layer];
    }
};

// Ingestion tolerance for externally produced rows; internal renormalizations
// hold 1e-12.
inline constexpr double kRowSumTolerance = 1e-6;

AttentionTrace load_trace(std::string_view json_text);
AttentionTrace load_trace_file(const std::string& path);
std::string serialize_trace(const AttentionTrace& trace);

// Validates an in-memory trace against the same rules as load_trace.
void validate_trace(const AttentionTrace& trace);

HeadAggregatedTrace aggregate_heads(const AttentionTrace& trace, HeadPolicy policy);

bool traces_equal(const AttentionTrace& a, const AttentionTrace& b);

} // namespace aid
