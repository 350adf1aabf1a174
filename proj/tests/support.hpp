#pragma once

#include <initializer_list>
#include <string>
#include <vector>

#include "aid/trace.hpp"

namespace aid::testing {

// Hand-crafts single-head traces row by row. Rows default to uniform; any
// row can be overridden before build(). Weights are taken verbatim, so a
// builder row must already sum to ~1.
class TraceBuilder {
public:
    TraceBuilder(int num_layers, std::vector<TokenRole> roles)
        : layers_(num_layers), layout_(make_layout(roles)) {
        prefill_.resize(layers_);
        for (int l = 0; l < layers_; ++l) {
            prefill_[l].reserve(layout_.generated_start);
            for (int q = 0; q < layout_.generated_start; ++q)
                prefill_[l].push_back(uniform_row(q + 1));
        }
        decode_.resize(layout_.num_generated());
        for (int s = 0; s < layout_.num_generated(); ++s) {
            int q = layout_.generated_start + s;
            decode_[s].reserve(layers_);
            for (int l = 0; l < layers_; ++l) decode_[s].push_back(uniform_row(q + 1));
        }
    }

    TraceBuilder& prefill_row(int layer, int query, std::initializer_list<double> weights) {
        prefill_[layer][query] = to_vec(weights);
        return *this;
    }

    TraceBuilder& decode_row(int step, int layer, std::initializer_list<double> weights) {
        decode_[step][layer] = to_vec(weights);
        return *this;
    }

    // Same override applied at every layer.
    TraceBuilder& prefill_row_all(int query, std::initializer_list<double> weights) {
        for (int l = 0; l < layers_; ++l) prefill_[l][query] = to_vec(weights);
        return *this;
    }

    TraceBuilder& decode_row_all(int step, std::initializer_list<double> weights) {
        for (int l = 0; l < layers_; ++l) decode_[step][l] = to_vec(weights);
        return *this;
    }

    HeadAggregatedTrace build() const {
        HeadAggregatedTrace trace;
        trace.num_layers = layers_;
        trace.layout = layout_;
        trace.policy = HeadPolicy::Mean;
        trace.prefill = prefill_;
        trace.decode = decode_;
        return trace;
    }

    static Eigen::VectorXd uniform_row(int len) {
        return Eigen::VectorXd::Constant(len, 1.0 / static_cast<double>(len));
    }

private:
    static Eigen::VectorXd to_vec(std::initializer_list<double> weights) {
        Eigen::VectorXd v(static_cast<Eigen::Index>(weights.size()));
        Eigen::Index i = 0;
        for (double w : weights) v[i++] = w;
        return v;
    }

    int layers_;
    TokenLayout layout_;
    std::vector<std::vector<Eigen::VectorXd>> prefill_;
    std::vector<std::vector<Eigen::VectorXd>> decode_;
};

inline std::vector<TokenRole> roles_of(int n_other, int n_img, int n_ins, int n_gen) {
    std::vector<TokenRole> roles(n_other, TokenRole::Other);
    roles.insert(roles.end(), n_img, TokenRole::Image);
    roles.insert(roles.end(), n_ins, TokenRole::Instruction);
    roles.insert(roles.end(), n_gen, TokenRole::Generated);
    return roles;
}

inline HeadAggregatedTrace uniform_trace(int num_layers, int n_img, int n_ins, int n_gen,
                                         int n_other = 0) {
    return TraceBuilder(num_layers, roles_of(n_other, n_img, n_ins, n_gen)).build();
}

// Smallest legal document: 1 layer, 1 head, 2 image + 1 instruction, 1 step.
inline std::string minimal_trace_json() {
    return R"({
      "version": 1,
      "num_layers": 1,
      "num_heads": 1,
      "tokens": [
        {"index": 0, "role": "image"},
        {"index": 1, "role": "image"},
        {"index": 2, "role": "instruction", "text": "what"},
        {"index": 3, "role": "generated"}
      ],
      "prefill_attention": [[[
        [1.0],
        [0.4, 0.6],
        [0.3, 0.2, 0.5]
      ]]],
      "decode_steps": [
        {"attention": [[[0.2, 0.2, 0.3, 0.3]]]}
      ]
    })";
}

} // namespace aid::testing
