#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>

#include <json.hpp>

#include "aid/splitmix.hpp"
#include "aid/trace.hpp"
#include "aid/trace_gen.hpp"
#include "support.hpp"

using namespace aid;
using aid::testing::minimal_trace_json;

namespace {

errc code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const error& e) {
        return e.code();
    }
    FAIL("expected an aid::error");
    return errc::malformed_document;
}

} // namespace

TEST_CASE("splitmix64 matches the reference sequence") {
    // First outputs of the reference implementation for seed 0.
    SplitMix64 rng(0);
    CHECK(rng.next() == 0xE220A8397B1DCDAFULL);
    CHECK(rng.next() == 0x6E789E6AA1B965F4ULL);
    CHECK(rng.next() == 0x06C45D188009454FULL);

    SplitMix64 w(42);
    for (int i = 0; i < 1000; ++i) {
        double x = w.weight();
        CHECK(x >= -0.1);
        CHECK(x < 0.1);
    }
}

TEST_CASE("minimal document loads with the declared shape") {
    AttentionTrace trace = load_trace(minimal_trace_json());
    CHECK(trace.num_layers == 1);
    CHECK(trace.num_heads == 1);
    CHECK(trace.layout.image_range.begin == 0);
    CHECK(trace.layout.image_range.end == 2);
    CHECK(trace.layout.instruction_range.begin == 2);
    CHECK(trace.layout.instruction_range.end == 3);
    CHECK(trace.layout.generated_start == 3);
    CHECK(trace.num_decode_steps() == 1);
    CHECK(trace.texts[2] == "what");
    CHECK(trace.prefill[0][0][1][0] == 0.4);
    CHECK(trace.decode[0][0][0].size() == 4);
}

TEST_CASE("instruction block before image block is a layout violation") {
    std::string doc = R"({
      "version": 1, "num_layers": 1, "num_heads": 1,
      "tokens": [
        {"index": 0, "role": "instruction"},
        {"index": 1, "role": "image"}
      ],
      "prefill_attention": [[[[1.0], [0.5, 0.5]]]],
      "decode_steps": []
    })";
    CHECK(code_of([&] { load_trace(doc); }) == errc::layout_violation);
}

TEST_CASE("row summing to 0.9 reports the offending coordinates") {
    std::string doc = R"({
      "version": 1, "num_layers": 1, "num_heads": 1,
      "tokens": [
        {"index": 0, "role": "image"},
        {"index": 1, "role": "instruction"}
      ],
      "prefill_attention": [[[[1.0], [0.4, 0.5]]]],
      "decode_steps": []
    })";
    try {
        load_trace(doc);
        FAIL("expected row_sum_violation");
    } catch (const error& e) {
        CHECK(e.code() == errc::row_sum_violation);
        std::string what = e.what();
        CHECK(what.find("layer 0") != std::string::npos);
        CHECK(what.find("head 0") != std::string::npos);
        CHECK(what.find("query 1") != std::string::npos);
    }
}

TEST_CASE("row length must equal query plus one") {
    std::string doc = R"({
      "version": 1, "num_layers": 1, "num_heads": 1,
      "tokens": [
        {"index": 0, "role": "image"},
        {"index": 1, "role": "instruction"}
      ],
      "prefill_attention": [[[[1.0], [1.0]]]],
      "decode_steps": []
    })";
    CHECK(code_of([&] { load_trace(doc); }) == errc::shape_violation);
}

TEST_CASE("negative and non-finite weights are rejected") {
    std::string doc = R"({
      "version": 1, "num_layers": 1, "num_heads": 1,
      "tokens": [
        {"index": 0, "role": "image"},
        {"index": 1, "role": "instruction"}
      ],
      "prefill_attention": [[[[1.0], [1.5, -0.5]]]],
      "decode_steps": []
    })";
    CHECK(code_of([&] { load_trace(doc); }) == errc::invalid_weight);
}

TEST_CASE("garbage and wrong version are malformed documents") {
    CHECK(code_of([] { load_trace("{nope"); }) == errc::malformed_document);
    CHECK(code_of([] { load_trace(R"({"version": 2})"); }) == errc::malformed_document);
    nlohmann::json doc = nlohmann::json::parse(testing::minimal_trace_json());
    doc["meta"] = "not an object";
    CHECK(code_of([&] { load_trace(doc.dump()); }) == errc::malformed_document);
    doc["meta"] = nlohmann::json::object();
    doc["num_layers"] = "two";
    CHECK(code_of([&] { load_trace(doc.dump()); }) == errc::malformed_document);
}

TEST_CASE("other tokens are only legal before the image block") {
    CHECK_NOTHROW(make_layout(testing::roles_of(2, 2, 1, 1)));
    std::vector<TokenRole> bad{TokenRole::Image, TokenRole::Other, TokenRole::Instruction};
    CHECK(code_of([&] { make_layout(bad); }) == errc::layout_violation);
}

TEST_CASE("serialize then reload reproduces the trace exactly") {
    RandomTraceSpec spec;
    spec.allow_other = true;
    for (std::uint64_t seed : {7ULL, 8ULL, 9ULL, 10ULL}) {
        AttentionTrace trace = random_trace(spec, seed);
        AttentionTrace again = load_trace(serialize_trace(trace));
        CHECK(traces_equal(trace, again));
    }
}

TEST_CASE("meta object is preserved through a round trip") {
    nlohmann::json doc = nlohmann::json::parse(minimal_trace_json());
    doc["meta"] = {{"origin", "unit-test"}, {"run", 3}};
    AttentionTrace trace = load_trace(doc.dump());
    AttentionTrace again = load_trace(serialize_trace(trace));
    CHECK(traces_equal(trace, again));
    CHECK(nlohmann::json::parse(again.meta)["origin"] == "unit-test");
}

TEST_CASE("single-head aggregation is bitwise identity under both policies") {
    AttentionTrace trace = load_trace(minimal_trace_json());
    for (HeadPolicy policy : {HeadPolicy::Mean, HeadPolicy::Max}) {
        HeadAggregatedTrace aggr = aggregate_heads(trace, policy);
        for (int q = 0; q < trace.layout.generated_start; ++q)
            for (Eigen::Index j = 0; j < aggr.prefill[0][q].size(); ++j)
                CHECK(aggr.prefill[0][q][j] == trace.prefill[0][0][q][j]);
        CHECK(aggr.decode[0][0][3] == trace.decode[0][0][0][3]);
    }
}

TEST_CASE("two-head mean and max follow the frozen examples") {
    AttentionTrace trace;
    trace.num_layers = 1;
    trace.num_heads = 2;
    trace.layout = make_layout(testing::roles_of(0, 1, 1, 0));
    trace.texts.assign(2, "");
    trace.prefill.resize(1);
    trace.prefill[0].resize(2);
    Eigen::VectorXd h0(2), h1(2);
    h0 << 1.0, 0.0;
    h1 << 0.0, 1.0;
    trace.prefill[0][0] = {Eigen::VectorXd::Constant(1, 1.0), h0};
    trace.prefill[0][1] = {Eigen::VectorXd::Constant(1, 1.0), h1};

    HeadAggregatedTrace mean = aggregate_heads(trace, HeadPolicy::Mean);
    CHECK(mean.prefill[0][1][0] == 0.5);
    CHECK(mean.prefill[0][1][1] == 0.5);

    trace.prefill[0][0][1] << 0.8, 0.2;
    trace.prefill[0][1][1] << 0.3, 0.7;
    HeadAggregatedTrace mx = aggregate_heads(trace, HeadPolicy::Max);
    CHECK(mx.prefill[0][1][0] == doctest::Approx(0.8 / 1.5).epsilon(1e-15));
    CHECK(mx.prefill[0][1][1] == doctest::Approx(0.7 / 1.5).epsilon(1e-15));
    CHECK(std::abs(mx.prefill[0][1].sum() - 1.0) <= 1e-12);
}

TEST_CASE("mean aggregation commutes with head permutation") {
    RandomTraceSpec spec;
    spec.max_heads = 2;
    for (std::uint64_t seed : {21ULL, 22ULL, 23ULL}) {
        AttentionTrace trace = random_trace(spec, seed);
        if (trace.num_heads < 2) continue;
        AttentionTrace swapped = trace;
        for (auto& layer : swapped.prefill) std::swap(layer[0], layer[1]);
        for (auto& step : swapped.decode)
            for (auto& layer : step) std::swap(layer[0], layer[1]);
        HeadAggregatedTrace a = aggregate_heads(trace, HeadPolicy::Mean);
        HeadAggregatedTrace b = aggregate_heads(swapped, HeadPolicy::Mean);
        for (int q = 0; q < trace.layout.generated_start; ++q)
            for (int l = 0; l < trace.num_layers; ++l)
                CHECK(a.prefill[l][q] == b.prefill[l][q]);
    }
}

TEST_CASE("random traces validate and keep causal row lengths") {
    RandomTraceSpec spec;
    spec.allow_other = true;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        AttentionTrace trace = random_trace(spec, seed);
        CHECK_NOTHROW(validate_trace(trace));
        for (int l = 0; l < trace.num_layers; ++l)
            for (int h = 0; h < trace.num_heads; ++h)
                for (int q = 0; q < trace.layout.generated_start; ++q)
                    CHECK(trace.prefill[l][h][q].size() == q + 1);
    }
}

TEST_CASE("decode step count must match generated tokens") {
    std::string doc = R"({
      "version": 1, "num_layers": 1, "num_heads": 1,
      "tokens": [
        {"index": 0, "role": "image"},
        {"index": 1, "role": "instruction"},
        {"index": 2, "role": "generated"}
      ],
      "prefill_attention": [[[[1.0], [0.5, 0.5]]]],
      "decode_steps": []
    })";
    CHECK(code_of([&] { load_trace(doc); }) == errc::shape_violation);
}
