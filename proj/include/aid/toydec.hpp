#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <vector>

#include "aid/detector.hpp"
#include "aid/disentangle.hpp"
#include "aid/salience.hpp"
#include "aid/trace.hpp"

namespace aid {

struct ToyConfig {
    int vocab_size = 32;
    int d_model = 16;
    int num_heads = 2;
    int num_layers = 2;
    int max_seq_len = 64;
    std::uint64_t seed = 0;

    int head_dim() const { return d_model / num_heads; }
};

// Attention-plus-residual decoder, no feed-forward or normalization blocks.
// Weight matrices apply as y = W x with x a column vector; q_bias is zero in
// built models and only populated by planting.
struct LayerWeights {
    Eigen::MatrixXd wq, wk, wv, wo;
    Eigen::VectorXd q_bias;
};

struct ToyModel {
    ToyConfig config;
    Eigen::MatrixXd embedding;   // vocab x d_model, one row per token id
    std::vector<LayerWeights> layers;
    Eigen::MatrixXd unembedding; // vocab x d_model, logits = U h
};

// Deterministic weights: one SplitMix64 stream seeded by config.seed mapped
// to [-0.1, 0.1), drawn as embedding, then per layer Q, K, V, O (row-major),
// then unembedding. Same config and seed give bit-identical weights anywhere.
ToyModel build_model(const ToyConfig& config);

// Toy prompt convention: positions [0, num_image) are image pseudo-tokens
// with reserved ids equal to their positions; instruction tokens follow.
struct PromptSpec {
    int num_image = 4;
    int num_instruction = 3;
    std::vector<int> instruction_ids; // defaults to num_image + j per position

    int length() const { return num_image + num_instruction; }
    int token_id(int pos) const;
};

// One autoregressive run over a model: owns the KV cache, records every
// attention row, and applies an installed plan's row edit to hijacker
// queries before the value mixing. Single-threaded by construction.
class DecodeSession {
public:
    DecodeSession(const ToyModel& model, const PromptSpec& prompt);

    // Installing a plan restarts the session: hijacker rows live in the
    // prefill, and the cache built from unedited rows must not survive.
    void install_plan(const ResolvedPlan& plan);

    int step();            // greedily decode one token, returns its id
    void decode(int steps);

    const std::vector<int>& token_ids() const { return tokens_; }
    std::vector<int> generated_ids() const;
    int num_generated() const { return static_cast<int>(tokens_.size()) - prompt_.length(); }

    // Logits produced after consuming each position so far.
    const std::vector<Eigen::VectorXd>& logits_history() const { return logits_; }

    AttentionTrace trace() const;

private:
    void reset();
    void run_position(int pos, int token_id);

    const ToyModel& model_;
    PromptSpec prompt_;
    std::optional<ResolvedPlan> plan_;
    std::vector<int> tokens_;
    std::vector<Eigen::MatrixXd> k_cache_, v_cache_; // per layer, one row per position
    std::vector<Eigen::VectorXd> logits_;
    // recorded rows: prefill_rows_[layer][head][query], decode_rows_[step][layer][head]
    std::vector<std::vector<std::vector<Eigen::VectorXd>>> prefill_rows_;
    std::vector<std::vector<std::vector<Eigen::VectorXd>>> decode_rows_;
};

struct DecodeResult {
    std::vector<int> tokens; // generated ids only
    AttentionTrace trace;
};

DecodeResult greedy_decode(const ToyModel& model, const PromptSpec& prompt, int steps,
                           const ResolvedPlan* plan = nullptr);

struct AidParams {
    int k = kDefaultHijackerCount;
    int layer_cap = -1; // -1 means every layer
    double visual_fraction = 1.0;
    bool strict = false;
    int probe_steps = 1;
    int total_steps = 4;
    HeadPolicy heads = HeadPolicy::Mean;
    // 0 = detect once (the kept mask persists through the KV cache for the
    // rest of decoding); n > 0 re-runs the keep/revert comparison with n more
    // tokens of context each time, reverting to the baseline if any re-check
    // says so.
    int reeval_interval = 0;
    // Replay a previously saved plan instead of building one from the
    // detection result (detection still runs for the audit record).
    std::optional<DisentanglementPlan> preset_plan;
};

// Full probe -> detect -> plan -> re-check -> restart-or-revert record.
struct AidOutcome {
    AttentionTrace baseline_trace;
    std::vector<int> baseline_tokens;
    HijackerReport report;
    DisentanglementPlan plan;
    SalienceField probe_salience;
    SalienceField masked_salience;
    DisentanglementDecision decision;
    struct Reevaluation {
        int steps;     // generated tokens of context at this re-check
        double delta;
        bool keep;
    };
    std::vector<Reevaluation> reevaluations;
    bool restarted = false; // initial decision and every re-check kept the mask
    AttentionTrace final_trace;
    std::vector<int> final_tokens;
};

AidOutcome run_aid(const ToyModel& model, const PromptSpec& prompt, const AidParams& params);

// First probe_steps decode steps of a trace, with the layout shrunk to match.
AttentionTrace truncate_decode_steps(const AttentionTrace& trace, int steps);

// Model whose query/key projections carry gain-scaled marker perturbations
// making the target instruction position a provable hijacker: the target's
// prefill attention concentrates on a fixed trailing image sub-region at
// every layer, and generated tokens concentrate on the target. One other
// instruction position is designated quiet (content-driven rows) for curve
// comparisons; quiet_out reports which. The construction is searched
// deterministically (quiet candidates in fixed order, gain doubling capped
// at 2^20); unreachable thresholds raise planting_failed.
ToyModel plant_hijacker(const ToyConfig& config, const PromptSpec& prompt, int target,
                        int check_steps = 4, int* quiet_out = nullptr);

// The image positions the planted target is steered toward.
std::vector<int> planted_region(const PromptSpec& prompt);

inline constexpr double kPlantTargetRegionMass = 0.9;
inline constexpr double kPlantGeneratedMass = 0.5;
inline constexpr double kPlantGainCap = 1048576.0; // 2^20

} // namespace aid
