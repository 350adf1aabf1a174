#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "aid/splitmix.hpp"
#include "aid/toydec.hpp"
#include "planted_fixture.hpp"
#include "reference_model.hpp"

using namespace aid;

namespace {

ToyConfig small_config(std::uint64_t seed) {
    ToyConfig config;
    config.vocab_size = 32;
    config.d_model = 16;
    config.num_heads = 2;
    config.num_layers = 2;
    config.max_seq_len = 64;
    config.seed = seed;
    return config;
}

PromptSpec small_prompt() {
    PromptSpec prompt;
    prompt.num_image = 4;
    prompt.num_instruction = 3;
    return prompt;
}

bool weights_equal(const ToyModel& a, const ToyModel& b) {
    if (!(a.embedding == b.embedding) || !(a.unembedding == b.unembedding)) return false;
    for (size_t l = 0; l < a.layers.size(); ++l)
        if (!(a.layers[l].wq == b.layers[l].wq) || !(a.layers[l].wk == b.layers[l].wk) ||
            !(a.layers[l].wv == b.layers[l].wv) || !(a.layers[l].wo == b.layers[l].wo))
            return false;
    return true;
}

} // namespace

TEST_CASE("same config builds bit-identical weights") {
    ToyModel a = build_model(small_config(11));
    ToyModel b = build_model(small_config(11));
    CHECK(weights_equal(a, b));
}

TEST_CASE("adjacent seeds differ somewhere") {
    ToyModel a = build_model(small_config(11));
    ToyModel b = build_model(small_config(12));
    CHECK_FALSE(weights_equal(a, b));
}

TEST_CASE("invalid configurations are rejected") {
    ToyConfig bad = small_config(1);
    bad.d_model = 8;
    bad.num_heads = 3;
    CHECK_THROWS_AS(build_model(bad), error);
    try {
        build_model(bad);
    } catch (const error& e) {
        CHECK(e.code() == errc::invalid_config);
    }
    ToyConfig zero = small_config(1);
    zero.num_layers = 0;
    CHECK_THROWS_AS(build_model(zero), error);
}

TEST_CASE("weights stay inside the generation interval") {
    ToyModel model = build_model(small_config(5));
    CHECK(model.embedding.maxCoeff() < 0.1);
    CHECK(model.embedding.minCoeff() >= -0.1);
    CHECK(model.layers[0].wq.maxCoeff() < 0.1);
    CHECK(model.layers[1].wo.minCoeff() >= -0.1);
}

TEST_CASE("weight draw order is embedding, per-layer qkvo row-major, unembedding") {
    ToyModel model = build_model(small_config(5));
    SplitMix64 rng(5);
    CHECK(model.embedding(0, 0) == rng.weight());
    CHECK(model.embedding(0, 1) == rng.weight());
    // skip the rest of the embedding block
    for (int i = 2; i < 32 * 16; ++i) rng.weight();
    CHECK(model.layers[0].wq(0, 0) == rng.weight());
    for (int i = 1; i < 16 * 16; ++i) rng.weight();
    CHECK(model.layers[0].wk(0, 0) == rng.weight());
}

TEST_CASE("zero steps decodes nothing and records prefill only") {
    ToyModel model = build_model(small_config(3));
    DecodeResult result = greedy_decode(model, small_prompt(), 0);
    CHECK(result.tokens.empty());
    CHECK(result.trace.num_decode_steps() == 0);
    CHECK(result.trace.layout.generated_start == 7);
    CHECK(result.trace.layout.num_generated() == 0);
    CHECK_NOTHROW(validate_trace(result.trace));
}

TEST_CASE("same session parameters give identical tokens and traces") {
    ToyModel model = build_model(small_config(3));
    DecodeResult a = greedy_decode(model, small_prompt(), 5);
    DecodeResult b = greedy_decode(model, small_prompt(), 5);
    CHECK(a.tokens == b.tokens);
    CHECK(traces_equal(a.trace, b.trace));
}

TEST_CASE("recorded rows are causal and sum to one within 1e-12") {
    ToyModel model = build_model(small_config(9));
    DecodeResult result = greedy_decode(model, small_prompt(), 4);
    CHECK_NOTHROW(validate_trace(result.trace));
    for (int l = 0; l < result.trace.num_layers; ++l)
        for (int h = 0; h < result.trace.num_heads; ++h)
            for (int q = 0; q < result.trace.layout.generated_start; ++q) {
                const Eigen::VectorXd& row = result.trace.prefill[l][h][q];
                CHECK(row.size() == q + 1);
                CHECK(std::abs(row.sum() - 1.0) <= 1e-12);
            }
    for (int s = 0; s < result.trace.num_decode_steps(); ++s)
        for (int l = 0; l < result.trace.num_layers; ++l)
            for (int h = 0; h < result.trace.num_heads; ++h)
                CHECK(std::abs(result.trace.decode[s][l][h].sum() - 1.0) <= 1e-12);
}

TEST_CASE("decoding past max_seq_len is rejected") {
    ToyConfig config = small_config(3);
    config.max_seq_len = 8;
    ToyModel model = build_model(config);
    CHECK_THROWS_AS(greedy_decode(model, small_prompt(), 2), error);
    try {
        greedy_decode(model, small_prompt(), 2);
    } catch (const error& e) {
        CHECK(e.code() == errc::length_exceeded);
    }
}

TEST_CASE("cached logits match the independent full-recompute reference") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        ToyModel model = build_model(small_config(seed));
        PromptSpec prompt = small_prompt();
        DecodeSession session(model, prompt);
        session.decode(4);

        std::vector<int> ids = session.token_ids();
        for (size_t upto = prompt.length(); upto <= ids.size(); ++upto) {
            std::vector<int> prefix(ids.begin(), ids.begin() + upto);
            Eigen::VectorXd reference = aid::testing::reference_logits(model, prefix);
            const Eigen::VectorXd& cached = session.logits_history()[upto - 1];
            CHECK((cached - reference).cwiseAbs().maxCoeff() <= 1e-12);
        }
    }
}

TEST_CASE("planted model steers the target to the region and the tail to the target") {
    ToyConfig config = small_config(1);
    PromptSpec prompt = small_prompt();
    const int target = 5; // second instruction token
    ToyModel model = plant_hijacker(config, prompt, target, 4);

    DecodeResult run = greedy_decode(model, prompt, 4);
    HeadAggregatedTrace aggr = aggregate_heads(run.trace, HeadPolicy::Mean);
    std::vector<int> region = planted_region(prompt);
    CHECK(region == std::vector<int>{2, 3});

    for (int l = 0; l < aggr.num_layers; ++l) {
        double mass = 0.0;
        for (int key : region) mass += aggr.prefill[l][target][key];
        CHECK(mass >= kPlantTargetRegionMass);
    }
    for (int s = 0; s < aggr.num_decode_steps(); ++s)
        for (int l = 0; l < aggr.num_layers; ++l)
            CHECK(aggr.decode[s][l][target] >= kPlantGeneratedMass);

    // Detection by oracle totals lands on the planted target.
    AttentionTrace probe = truncate_decode_steps(run.trace, 3);
    SalienceField oracle = oracle_salience(aggregate_heads(probe, HeadPolicy::Mean));
    HijackerReport report = detect_hijackers(oracle, 1);
    CHECK(report.hijackers == std::vector<int>{target});
}

TEST_CASE("planting rejects head chunks too narrow for the marker channels") {
    ToyConfig config = small_config(1);
    config.d_model = 4;
    config.num_heads = 4; // head_dim 1
    CHECK_THROWS_AS(plant_hijacker(config, small_prompt(), 5, 2), error);
    try {
        plant_hijacker(config, small_prompt(), 5, 2);
    } catch (const error& e) {
        CHECK(e.code() == errc::planting_failed);
    }
}

TEST_CASE("installed plan edits exactly the causally reachable rows") {
    ToyConfig config = small_config(4);
    PromptSpec prompt = small_prompt();
    aid::testing::PlantedFixture fixture = aid::testing::plant_first_viable(config, prompt, 4);
    const ToyModel& model = fixture.model;
    const int target = fixture.target;

    DecodeResult baseline = greedy_decode(model, prompt, 4);
    HeadAggregatedTrace aggr = aggregate_heads(baseline.trace, HeadPolicy::Mean);
    SalienceField field = compute_salience(aggr);
    DisentanglementPlan plan = build_plan(detect_hijackers(field, 1), 2, 1.0, false);
    ResolvedPlan resolved = resolve_plan(aggr, plan);
    REQUIRE(resolved.hijackers == std::vector<int>{target});

    DecodeResult hooked = greedy_decode(model, prompt, 4, &resolved);

    // Hijacker rows: exactly zero on masked keys, sum 1 within 1e-12, per head.
    for (int l = 0; l < resolved.masked_layers; ++l)
        for (int h = 0; h < hooked.trace.num_heads; ++h) {
            const Eigen::VectorXd& row = hooked.trace.prefill[l][h][target];
            for (int key : resolved.image_keys) CHECK(row[key] == 0.0);
            CHECK(std::abs(row.sum() - 1.0) <= 1e-12);
        }

    // Positions before the first hijacker are untouched at every layer, and
    // every non-hijacker row is untouched at the first attention layer.
    for (int l = 0; l < hooked.trace.num_layers; ++l)
        for (int h = 0; h < hooked.trace.num_heads; ++h)
            for (int q = 0; q < target; ++q)
                CHECK(hooked.trace.prefill[l][h][q] == baseline.trace.prefill[l][h][q]);
    for (int h = 0; h < hooked.trace.num_heads; ++h)
        for (int q = 0; q < hooked.trace.layout.generated_start; ++q)
            if (q != target)
                CHECK(hooked.trace.prefill[0][h][q] == baseline.trace.prefill[0][h][q]);
}

TEST_CASE("reverted decision returns the plain greedy continuation") {
    ToyModel model = build_model(small_config(6));
    PromptSpec prompt = small_prompt();
    AidParams params;
    params.k = 1;
    params.visual_fraction = 0.0; // empty mask, delta is exactly zero
    params.probe_steps = 2;
    params.total_steps = 5;
    AidOutcome outcome = run_aid(model, prompt, params);
    CHECK(outcome.decision.delta == 0.0);
    CHECK_FALSE(outcome.decision.keep);
    DecodeResult plain = greedy_decode(model, prompt, 5);
    CHECK(outcome.final_tokens == plain.tokens);
    CHECK(traces_equal(outcome.final_trace, plain.trace));
}

TEST_CASE("planted scenario keeps the mask and lowers the hijacker curve everywhere") {
    ToyConfig config = small_config(2);
    PromptSpec prompt = small_prompt();
    const int target = 5;
    ToyModel model = plant_hijacker(config, prompt, target, 4);

    AidParams params;
    params.k = 1;
    params.probe_steps = 4;
    params.total_steps = 4;
    AidOutcome outcome = run_aid(model, prompt, params);
    CHECK(outcome.plan.hijackers == std::vector<int>{target});
    CHECK(outcome.decision.keep);
    CHECK(outcome.decision.delta > 0.0);

    HeadAggregatedTrace before = aggregate_heads(outcome.baseline_trace, HeadPolicy::Mean);
    HeadAggregatedTrace after = aggregate_heads(outcome.final_trace, HeadPolicy::Mean);
    SimilarityCurve base_curve = attention_similarity(before, target);
    SimilarityCurve final_curve = attention_similarity(after, target);
    REQUIRE(base_curve.values.size() == final_curve.values.size());
    for (size_t i = 0; i < base_curve.values.size(); ++i)
        CHECK(final_curve.values[i] < base_curve.values[i]);
}

TEST_CASE("planted hijacker dominates the quiet instruction token's similarity curve") {
    for (std::uint64_t seed : {3ULL, 7ULL, 11ULL}) {
        ToyConfig config = small_config(seed);
        PromptSpec prompt = small_prompt();
        aid::testing::PlantedFixture fixture = aid::testing::plant_first_viable(config, prompt, 4);
        DecodeResult run = greedy_decode(fixture.model, prompt, 4);
        HeadAggregatedTrace aggr = aggregate_heads(run.trace, HeadPolicy::Mean);

        SimilarityCurve hijacker_curve = attention_similarity(aggr, fixture.target);
        SimilarityCurve quiet_curve = attention_similarity(aggr, fixture.quiet);
        for (size_t i = 0; i < hijacker_curve.values.size(); ++i)
            CHECK(hijacker_curve.values[i] > quiet_curve.values[i]);
    }
}

TEST_CASE("re-evaluation interval re-checks the decision with growing context") {
    ToyConfig config = small_config(2);
    PromptSpec prompt = small_prompt();
    aid::testing::PlantedFixture fixture = aid::testing::plant_first_viable(config, prompt, 4);

    AidParams params;
    params.k = 1;
    params.probe_steps = 1;
    params.total_steps = 4;
    params.reeval_interval = 1;
    AidOutcome outcome = run_aid(fixture.model, prompt, params);
    REQUIRE(outcome.decision.keep);
    REQUIRE(outcome.reevaluations.size() == 3); // at 2, 3 and 4 generated tokens
    for (size_t i = 0; i < outcome.reevaluations.size(); ++i) {
        CHECK(outcome.reevaluations[i].steps == 2 + static_cast<int>(i));
        CHECK(outcome.reevaluations[i].keep);
        CHECK(outcome.reevaluations[i].delta > 0.0);
    }
    CHECK(outcome.restarted);

    // The planted hijacker keeps its verdict at every context size, so the
    // final tokens match the single-shot run.
    params.reeval_interval = 0;
    AidOutcome once = run_aid(fixture.model, prompt, params);
    CHECK(outcome.final_tokens == once.final_tokens);
}

TEST_CASE("truncating decode steps keeps a valid layout") {
    ToyModel model = build_model(small_config(8));
    DecodeResult run = greedy_decode(model, small_prompt(), 4);
    AttentionTrace probe = truncate_decode_steps(run.trace, 1);
    CHECK(probe.num_decode_steps() == 1);
    CHECK(probe.layout.num_generated() == 1);
    CHECK_NOTHROW(validate_trace(probe));
    CHECK_THROWS_AS(truncate_decode_steps(run.trace, 9), error);
}
