#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "aid/detector.hpp"
#include "aid/disentangle.hpp"
#include "aid/salience.hpp"
#include "aid/toydec.hpp"
#include "aid/trace.hpp"
#include "aid/trace_gen.hpp"

namespace {

using nlohmann::json;

constexpr const char* kToolVersion = "0.1.0";
constexpr double kOracleCheckTolerance = 1e-9;

// Shortest round-trip decimal; keeps CSV output byte-stable.
std::string format_double(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p - buf);
}

struct Options {
    std::string trace_path;
    std::string plan_path; // replay this plan instead of building one
    std::string out_dir = ".";
    int k = aid::kDefaultHijackerCount;
    int layer_cap = -1; // -1 = every layer
    double rho = 1.0;
    bool strict = false;
    std::string heads = "mean";
    int probe_steps = 1;
    int reeval_interval = 0;
    std::uint64_t seed = 0;

    // toy decoder knobs
    bool toy = false;
    int plant = -1; // instruction ordinal, -1 = no planting
    int images = 4;
    int instructions = 3;
    std::vector<int> prompt_ids; // explicit instruction token ids
    int steps = 4;
    int vocab = 32;
    int d_model = 16;
    int model_heads = 2;
    int model_layers = 2;

    bool per_layer = false;
    std::vector<double> fractions{0.0, 0.25, 0.5, 0.75, 1.0};

    // oracle-check knobs
    int count = 100;
    int max_layers = 3;
    int max_tokens = 10;
    int max_steps = 3;

    aid::HeadPolicy head_policy() const {
        return heads == "max" ? aid::HeadPolicy::Max : aid::HeadPolicy::Mean;
    }
};

json make_manifest(const std::string& command, const Options& opt,
                   const std::vector<std::string>& outputs) {
    json inputs = json::object();
    if (!opt.trace_path.empty()) inputs["trace"] = opt.trace_path;
    if (!opt.plan_path.empty()) inputs["plan"] = opt.plan_path;
    json params{{"k", opt.k},
                {"layer_cap", opt.layer_cap},
                {"rho", opt.rho},
                {"strict", opt.strict},
                {"heads", opt.heads},
                {"probe_steps", opt.probe_steps},
                {"reeval_interval", opt.reeval_interval},
                {"seed", opt.seed}};
    if (opt.toy || command == "aid") {
        params["toy"] = opt.toy;
        params["plant"] = opt.plant;
        params["images"] = opt.images;
        params["instructions"] = opt.instructions;
        params["prompt"] = opt.prompt_ids;
        params["steps"] = opt.steps;
        params["vocab"] = opt.vocab;
        params["d_model"] = opt.d_model;
        params["model_heads"] = opt.model_heads;
        params["model_layers"] = opt.model_layers;
    }
    if (command == "sweep") {
        json f = json::array();
        for (double v : opt.fractions) f.push_back(v);
        params["fractions"] = std::move(f);
    }
    if (command == "oracle-check") {
        params["count"] = opt.count;
        params["max_layers"] = opt.max_layers;
        params["max_tokens"] = opt.max_tokens;
        params["max_steps"] = opt.max_steps;
    }
    return json{{"command", command},
                {"tool_version", kToolVersion},
                {"inputs", std::move(inputs)},
                {"params", std::move(params)},
                {"out_dir", opt.out_dir},
                {"outputs", outputs}};
}

void write_file(const std::string& dir, const std::string& name, const std::string& content) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir + "/" + name, std::ios::binary);
    if (!out) throw aid::error(aid::errc::malformed_document, "cannot write " + dir + "/" + name);
    out << content;
}

// JSON artifacts carry the manifest as a top-level key, CSV as a comment line.
void write_json_artifact(const std::string& dir, const std::string& name, const std::string& body,
                         const json& manifest) {
    json doc = json::parse(body);
    doc["manifest"] = manifest;
    write_file(dir, name, doc.dump() + "\n");
}

void write_csv_artifact(const std::string& dir, const std::string& name, const std::string& body,
                        const json& manifest) {
    write_file(dir, name, "# manifest " + manifest.dump() + "\n" + body);
}

std::string similarity_csv(const aid::HeadAggregatedTrace& aggr) {
    std::ostringstream out;
    out << "source,generated,similarity\n";
    const aid::TokenLayout& lt = aggr.layout;
    for (int b = 0; b < lt.num_instruction(); ++b) {
        int source = lt.instruction_range.begin + b;
        aid::SimilarityCurve curve = aid::attention_similarity(aggr, source);
        for (size_t i = 0; i < curve.values.size(); ++i)
            out << source << ',' << lt.generated_start + static_cast<int>(i) << ','
                << format_double(curve.values[i]) << '\n';
    }
    return out.str();
}

int cmd_analyze(const Options& opt) {
    aid::AttentionTrace trace = aid::load_trace_file(opt.trace_path);
    aid::HeadAggregatedTrace aggr = aid::aggregate_heads(trace, opt.head_policy());
    aid::SalienceField field = aid::compute_salience(aggr);
    aid::HijackerReport report = aid::detect_hijackers(field, opt.k);

    json manifest = make_manifest(
        "analyze", opt, {"salience.json", "report.json", "scores.csv", "similarity.csv"});
    write_json_artifact(opt.out_dir, "salience.json",
                        aid::salience_to_json(field, opt.per_layer), manifest);
    write_json_artifact(opt.out_dir, "report.json", aid::report_to_json(report), manifest);
    write_csv_artifact(opt.out_dir, "scores.csv", aid::report_to_csv(report, trace.texts),
                       manifest);
    write_csv_artifact(opt.out_dir, "similarity.csv", similarity_csv(aggr), manifest);
    std::cout << "analyze: " << report.hijackers.size() << " hijacker(s) of "
              << trace.layout.num_instruction() << " instruction tokens\n";
    return 0;
}

json tokens_json(const std::vector<int>& baseline, const std::vector<int>& final_tokens,
                 bool restarted) {
    return json{{"baseline_tokens", baseline},
                {"final_tokens", final_tokens},
                {"restarted", restarted}};
}

std::optional<aid::DisentanglementPlan> load_plan(const Options& opt) {
    if (opt.plan_path.empty()) return std::nullopt;
    std::ifstream in(opt.plan_path, std::ios::binary);
    if (!in)
        throw aid::error(aid::errc::malformed_document,
                         "cannot open plan file '" + opt.plan_path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return aid::plan_from_json(buf.str());
}

int cmd_aid(const Options& opt) {
    std::vector<std::string> outputs{"plan.json", "decision.json", "salience_unmasked.json",
                                     "salience_masked.json"};
    if (opt.toy)
        outputs.insert(outputs.end(),
                       {"tokens.json", "baseline_trace.json", "final_trace.json"});
    json manifest = make_manifest("aid", opt, outputs);

    if (opt.toy) {
        aid::ToyConfig config{opt.vocab, opt.d_model, opt.model_heads, opt.model_layers,
                              64, opt.seed};
        if (config.max_seq_len < opt.images + opt.instructions + opt.steps)
            config.max_seq_len = opt.images + opt.instructions + opt.steps;
        aid::PromptSpec prompt;
        prompt.num_image = opt.images;
        prompt.num_instruction = opt.prompt_ids.empty()
                                     ? opt.instructions
                                     : static_cast<int>(opt.prompt_ids.size());
        prompt.instruction_ids = opt.prompt_ids;

        aid::ToyModel model =
            opt.plant >= 0
                ? aid::plant_hijacker(config, prompt, opt.images + opt.plant, opt.steps)
                : aid::build_model(config);

        aid::AidParams params;
        params.k = opt.k;
        params.layer_cap = opt.layer_cap;
        params.visual_fraction = opt.rho;
        params.strict = opt.strict;
        params.probe_steps = opt.probe_steps;
        params.total_steps = opt.steps;
        params.heads = opt.head_policy();
        params.reeval_interval = opt.reeval_interval;
        params.preset_plan = load_plan(opt);
        aid::AidOutcome outcome = aid::run_aid(model, prompt, params);

        write_json_artifact(opt.out_dir, "plan.json", aid::plan_to_json(outcome.plan), manifest);
        json decision_doc = json::parse(aid::decision_to_json(outcome.decision));
        decision_doc["restarted"] = outcome.restarted;
        json reevals = json::array();
        for (const auto& r : outcome.reevaluations)
            reevals.push_back(json{{"steps", r.steps}, {"delta", r.delta}, {"keep", r.keep}});
        decision_doc["reevaluations"] = std::move(reevals);
        write_json_artifact(opt.out_dir, "decision.json", decision_doc.dump(), manifest);
        write_json_artifact(opt.out_dir, "salience_unmasked.json",
                            aid::salience_to_json(outcome.probe_salience, opt.per_layer),
                            manifest);
        write_json_artifact(opt.out_dir, "salience_masked.json",
                            aid::salience_to_json(outcome.masked_salience, opt.per_layer),
                            manifest);
        write_json_artifact(
            opt.out_dir, "tokens.json",
            tokens_json(outcome.baseline_tokens, outcome.final_tokens, outcome.restarted)
                .dump(),
            manifest);
        // Session traces already carry the trace schema; the manifest rides in meta.
        aid::AttentionTrace baseline = outcome.baseline_trace;
        baseline.meta = json{{"manifest", manifest}}.dump();
        aid::AttentionTrace final_trace = outcome.final_trace;
        final_trace.meta = baseline.meta;
        write_file(opt.out_dir, "baseline_trace.json", aid::serialize_trace(baseline) + "\n");
        write_file(opt.out_dir, "final_trace.json", aid::serialize_trace(final_trace) + "\n");
        std::cout << "aid: keep=" << (outcome.decision.keep ? "true" : "false")
                  << " delta=" << format_double(outcome.decision.delta) << "\n";
        return 0;
    }

    // Trace mode: apply the pipeline to an existing trace, no regeneration.
    aid::AttentionTrace trace = aid::load_trace_file(opt.trace_path);
    aid::HeadAggregatedTrace aggr = aid::aggregate_heads(trace, opt.head_policy());
    aid::SalienceField unmasked = aid::compute_salience(aggr);
    aid::HijackerReport report = aid::detect_hijackers(unmasked, opt.k);
    std::optional<aid::DisentanglementPlan> preset = load_plan(opt);
    int cap = opt.layer_cap < 0 ? aggr.num_layers : opt.layer_cap;
    aid::DisentanglementPlan plan =
        preset ? *preset : aid::build_plan(report, cap, opt.rho, opt.strict);
    aid::HeadAggregatedTrace masked_trace = aid::apply_plan(aggr, plan);
    aid::SalienceField masked = aid::compute_salience(masked_trace);
    aid::DisentanglementDecision decision = aid::re_disentanglement(unmasked, masked);

    write_json_artifact(opt.out_dir, "plan.json", aid::plan_to_json(plan), manifest);
    write_json_artifact(opt.out_dir, "decision.json", aid::decision_to_json(decision), manifest);
    write_json_artifact(opt.out_dir, "salience_unmasked.json",
                        aid::salience_to_json(unmasked, opt.per_layer), manifest);
    write_json_artifact(opt.out_dir, "salience_masked.json",
                        aid::salience_to_json(masked, opt.per_layer), manifest);
    std::cout << "aid: keep=" << (decision.keep ? "true" : "false")
              << " delta=" << format_double(decision.delta) << "\n";
    return 0;
}

int cmd_sweep(const Options& opt) {
    aid::AttentionTrace trace = aid::load_trace_file(opt.trace_path);
    aid::HeadAggregatedTrace aggr = aid::aggregate_heads(trace, opt.head_policy());
    aid::SalienceField unmasked = aid::compute_salience(aggr);
    aid::HijackerReport report = aid::detect_hijackers(unmasked, opt.k);
    int cap = opt.layer_cap < 0 ? aggr.num_layers : opt.layer_cap;

    std::ostringstream csv;
    csv << "rho,delta,hijacker_total,kept\n";
    for (double rho : opt.fractions) {
        if (rho < 0.0 || rho > 1.0)
            throw aid::error(aid::errc::invalid_config, "sweep fraction outside [0, 1]");
        aid::DisentanglementPlan plan = aid::build_plan(report, cap, rho, opt.strict);
        aid::HeadAggregatedTrace masked_trace = aid::apply_plan(aggr, plan);
        aid::SalienceField masked = aid::compute_salience(masked_trace);
        aid::DisentanglementDecision decision = aid::re_disentanglement(unmasked, masked);

        double hijacker_total = 0.0;
        for (int h : plan.hijackers)
            hijacker_total += masked.instruction_total(h - aggr.layout.instruction_range.begin);

        csv << format_double(rho) << ',' << format_double(decision.delta) << ','
            << format_double(hijacker_total) << ',' << (decision.keep ? 1 : 0) << '\n';
    }

    json manifest = make_manifest("sweep", opt, {"sweep.csv"});
    write_csv_artifact(opt.out_dir, "sweep.csv", csv.str(), manifest);
    std::cout << "sweep: " << opt.fractions.size() << " fractions\n";
    return 0;
}

int cmd_oracle_check(const Options& opt) {
    if (opt.max_layers > aid::kOracleMaxLayers || opt.max_tokens > aid::kOracleMaxTokens ||
        opt.max_steps > aid::kOracleMaxSteps)
        throw aid::error(aid::errc::instance_too_large,
                         "oracle caps: layers <= " + std::to_string(aid::kOracleMaxLayers) +
                             ", tokens <= " + std::to_string(aid::kOracleMaxTokens) +
                             ", steps <= " + std::to_string(aid::kOracleMaxSteps));
    aid::RandomTraceSpec spec;
    spec.max_layers = opt.max_layers;
    spec.max_tokens = opt.max_tokens;
    spec.max_steps = opt.max_steps;

    double worst = 0.0;
    std::uint64_t worst_seed = opt.seed;
    bool failed = false;
    for (int trial = 0; trial < opt.count; ++trial) {
        std::uint64_t trace_seed = opt.seed + static_cast<std::uint64_t>(trial);
        aid::AttentionTrace trace = aid::random_trace(spec, trace_seed);
        aid::HeadAggregatedTrace aggr = aid::aggregate_heads(trace, aid::HeadPolicy::Mean);
        aid::SalienceField engine = aid::compute_salience(aggr);
        aid::SalienceField oracle = aid::oracle_salience(aggr);
        double dev = aid::max_relative_deviation(engine, oracle);
        if (dev > worst) {
            worst = dev;
            worst_seed = trace_seed;
        }
        if (dev > kOracleCheckTolerance) {
            failed = true;
            std::cout << "FAIL seed " << trace_seed << ": relative deviation "
                      << format_double(dev) << " (reproduce with --count 1 --seed "
                      << trace_seed << ")\n";
        }
    }
    std::cout << "oracle-check: " << opt.count << " traces, max relative deviation "
              << format_double(worst) << " (worst seed " << worst_seed << ")\n";
    return failed ? 1 : 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"instruction-driven visual salience analysis and attention disentanglement"};
    app.require_subcommand(1);
    Options opt;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--k", opt.k, "hijacker count")->capture_default_str();
        cmd->add_option("--layer-cap", opt.layer_cap, "mask layers below this cap, -1 = all")
            ->capture_default_str();
        cmd->add_option("--heads", opt.heads, "head aggregation policy")
            ->check(CLI::IsMember({"mean", "max"}))
            ->capture_default_str();
        cmd->add_option("--out", opt.out_dir, "output directory")->capture_default_str();
    };

    CLI::App* analyze = app.add_subcommand("analyze", "salience, hijacker and similarity reports");
    analyze->add_option("trace", opt.trace_path, "trace JSON file")->required();
    add_common(analyze);
    analyze->add_flag("--per-layer", opt.per_layer, "dump per-layer contribution tables");

    CLI::App* aid_cmd = app.add_subcommand("aid", "detect, disentangle, re-check, restart");
    aid_cmd->add_option("--trace", opt.trace_path, "apply to an existing trace");
    aid_cmd->add_flag("--toy", opt.toy, "run the toy decoder probe/restart loop");
    aid_cmd->add_option("--plan", opt.plan_path, "replay a saved plan instead of detecting");
    add_common(aid_cmd);
    aid_cmd->add_option("--rho", opt.rho, "fraction of the image block to mask")
        ->capture_default_str();
    aid_cmd->add_flag("--strict", opt.strict, "also sever visual-carrying instruction keys");
    aid_cmd->add_option("--probe-steps", opt.probe_steps, "tokens decoded before detection")
        ->capture_default_str();
    aid_cmd->add_option("--reeval-interval", opt.reeval_interval,
                        "re-check the decision every n generated tokens, 0 = once")
        ->capture_default_str();
    CLI::Option* seed_opt = aid_cmd->add_option("--seed", opt.seed, "toy model seed");
    aid_cmd->add_option("--plant", opt.plant, "plant a hijacker at this instruction ordinal");
    aid_cmd->add_option("--images", opt.images, "image pseudo-tokens")->capture_default_str();
    aid_cmd->add_option("--instructions", opt.instructions, "instruction tokens")
        ->capture_default_str();
    aid_cmd->add_option("--prompt", opt.prompt_ids,
                        "explicit instruction token ids (overrides --instructions)")
        ->delimiter(',');
    aid_cmd->add_option("--steps", opt.steps, "tokens to generate")->capture_default_str();
    aid_cmd->add_option("--vocab", opt.vocab, "vocabulary size")->capture_default_str();
    aid_cmd->add_option("--d-model", opt.d_model, "model width")->capture_default_str();
    aid_cmd->add_option("--num-heads", opt.model_heads, "attention heads")
        ->capture_default_str();
    aid_cmd->add_option("--num-layers", opt.model_layers, "attention layers")
        ->capture_default_str();
    aid_cmd->add_flag("--per-layer", opt.per_layer, "dump per-layer contribution tables");

    CLI::App* sweep = app.add_subcommand("sweep", "mask-fraction sweep over one trace");
    sweep->add_option("--trace", opt.trace_path, "trace JSON file")->required();
    add_common(sweep);
    sweep->add_flag("--strict", opt.strict, "also sever visual-carrying instruction keys");
    sweep->add_option("--fractions", opt.fractions, "fractions to sweep")
        ->delimiter(',')
        ->capture_default_str();

    CLI::App* oracle = app.add_subcommand("oracle-check",
                                          "compare recursive salience against the enumeration oracle");
    oracle->add_option("--count", opt.count, "number of random traces")->capture_default_str();
    CLI::Option* oracle_seed_opt = oracle->add_option("--seed", opt.seed, "base seed");
    oracle->add_option("--layers", opt.max_layers, "max layers per trace")
        ->capture_default_str();
    oracle->add_option("--max-tokens", opt.max_tokens, "max tokens per trace")
        ->capture_default_str();
    oracle->add_option("--max-steps", opt.max_steps, "max decode steps per trace")
        ->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    // AID_SEED applies only when --seed was not passed.
    bool seed_flag_used = (aid_cmd->parsed() && seed_opt->count() > 0) ||
                          (oracle->parsed() && oracle_seed_opt->count() > 0);
    if (!seed_flag_used) {
        if (const char* env = std::getenv("AID_SEED")) {
            char* end = nullptr;
            opt.seed = std::strtoull(env, &end, 10);
        }
    }

    try {
        if (analyze->parsed()) return cmd_analyze(opt);
        if (aid_cmd->parsed()) {
            if (opt.toy == !opt.trace_path.empty()) {
                std::cerr << "aid: pass exactly one of --trace <path> or --toy\n";
                return 2;
            }
            return cmd_aid(opt);
        }
        if (sweep->parsed()) return cmd_sweep(opt);
        if (oracle->parsed()) return cmd_oracle_check(opt);
    } catch (const aid::error& e) {
        std::cerr << aid::errc_name(e.code()) << ": " << e.what() << "\n";
        return e.code() == aid::errc::planting_failed ? 3 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
