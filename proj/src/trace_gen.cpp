#include "aid/trace_gen.hpp"

#include "aid/splitmix.hpp"

namespace aid {

namespace {

Eigen::VectorXd random_row(SplitMix64& rng, int len) {
    Eigen::VectorXd row(len);
    double sum = 0.0;
    for (int j = 0; j < len; ++j) {
        double u = rng.uniform01();
        if (u == 0.0) u = 0.5;
        row[j] = u;
        sum += u;
    }
    row /= sum;
    return row;
}

} // namespace

AttentionTrace random_trace(const RandomTraceSpec& spec, std::uint64_t seed) {
    if (spec.max_layers < 1 || spec.max_steps < 1 || spec.max_heads < 1)
        throw error(errc::invalid_config, "random trace bounds must be >= 1");
    SplitMix64 rng(seed);

    const int n_other = spec.allow_other ? static_cast<int>(rng.below(2)) : 0;
    const int budget = spec.max_tokens - n_other;
    if (budget < 3)
        throw error(errc::invalid_config, "max_tokens leaves no room for image+instruction+generated");

    const int L = 1 + static_cast<int>(rng.below(spec.max_layers));
    const int H = 1 + static_cast<int>(rng.below(spec.max_heads));
    const int n_gen = 1 + static_cast<int>(rng.below(std::min(spec.max_steps, budget - 2)));
    const int remaining = budget - n_gen;
    const int n_img = 1 + static_cast<int>(rng.below(remaining - 1));
    const int n_ins = remaining - n_img;

    AttentionTrace trace;
    trace.num_layers = L;
    trace.num_heads = H;
    std::vector<TokenRole> roles(n_other, TokenRole::Other);
    roles.insert(roles.end(), n_img, TokenRole::Image);
    roles.insert(roles.end(), n_ins, TokenRole::Instruction);
    roles.insert(roles.end(), n_gen, TokenRole::Generated);
    trace.layout = make_layout(roles);
    trace.texts.assign(roles.size(), std::string());

    trace.prefill.resize(L);
    for (int l = 0; l < L; ++l) {
        trace.prefill[l].resize(H);
        for (int h = 0; h < H; ++h)
            for (int q = 0; q < trace.layout.generated_start; ++q)
                trace.prefill[l][h].push_back(random_row(rng, q + 1));
    }
    trace.decode.resize(n_gen);
    for (int s = 0; s < n_gen; ++s) {
        int q = trace.layout.generated_start + s;
        trace.decode[s].resize(L);
        for (int l = 0; l < L; ++l)
            for (int h = 0; h < H; ++h)
                trace.decode[s][l].push_back(random_row(rng, q + 1));
    }
    return trace;
}

} // namespace aid
