#include "aid/disentangle.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace aid {

using nlohmann::json;

DisentanglementPlan build_plan(const HijackerReport& report, int layer_cap,
                               double visual_fraction, bool strict) {
    if (report.hijackers.empty())
        throw error(errc::empty_hijacker_set, "plan needs at least one hijacker");
    if (layer_cap < 0)
        throw error(errc::invalid_config, "layer cap must be non-negative");
    if (!(visual_fraction >= 0.0 && visual_fraction <= 1.0))
        throw error(errc::invalid_config, "visual fraction must lie in [0, 1]");

    DisentanglementPlan plan;
    plan.hijackers = report.hijackers;
    std::sort(plan.hijackers.begin(), plan.hijackers.end());
    plan.layer_cap = layer_cap;
    plan.visual_fraction = visual_fraction;
    plan.strict = strict;
    return plan;
}

ResolvedPlan resolve_plan(const HeadAggregatedTrace& trace, const DisentanglementPlan& plan) {
    const TokenLayout& lt = trace.layout;
    if (plan.hijackers.empty())
        throw error(errc::empty_hijacker_set, "plan names no hijackers");
    for (int h : plan.hijackers)
        if (!lt.is_instruction(h))
            throw error(errc::index_out_of_range,
                        "hijacker " + std::to_string(h) + " is not an instruction position");
    if (plan.layer_cap < 0 || plan.layer_cap > trace.num_layers)
        throw error(errc::index_out_of_range, "layer cap exceeds trace depth");
    if (!(plan.visual_fraction >= 0.0 && plan.visual_fraction <= 1.0))
        throw error(errc::invalid_config, "visual fraction must lie in [0, 1]");

    ResolvedPlan resolved;
    resolved.hijackers = plan.hijackers;
    resolved.masked_layers = plan.layer_cap;

    const int n_img = lt.num_image();
    const int masked = static_cast<int>(std::ceil(plan.visual_fraction * n_img));
    for (int a = 0; a < std::min(masked, n_img); ++a)
        resolved.image_keys.push_back(lt.image_range.begin + a);

    resolved.strict_keys.resize(resolved.masked_layers);
    if (plan.strict && resolved.masked_layers > 0) {
        // A non-hijacker instruction key is severed at attention layer l when
        // it carries visual information entering that layer.
        Eigen::MatrixXd vis = compute_visual_salience(trace);
        Eigen::MatrixXd ins = compute_instruction_salience(trace, vis);
        for (int l = 0; l < resolved.masked_layers; ++l) {
            for (int b = 0; b < lt.num_instruction(); ++b) {
                int key = lt.instruction_range.begin + b;
                if (std::find(plan.hijackers.begin(), plan.hijackers.end(), key) !=
                    plan.hijackers.end())
                    continue;
                if (ins(l, b) > 0.0) resolved.strict_keys[l].push_back(key);
            }
        }
    }
    return resolved;
}

bool mask_row(Eigen::VectorXd& row, const std::vector<int>& image_keys,
              const std::vector<int>& strict_keys, int self) {
    double removed = 0.0;
    for (int key : image_keys) {
        if (key >= row.size()) continue; // beyond this row's causal span
        removed += row[key];
        row[key] = 0.0;
    }
    for (int key : strict_keys) {
        if (key >= row.size() || key == self) continue;
        removed += row[key];
        row[key] = 0.0;
    }
    if (removed == 0.0) return false; // nothing redistributed, keep bits as-is

    double surviving = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) surviving += row[j];
    if (surviving == 0.0) {
        // Softmax rows cannot be all-zero; route the full mass to the self
        // edge, the only edge guaranteed unmasked.
        row[self] = 1.0;
    } else {
        row /= surviving;
    }
    return true;
}

HeadAggregatedTrace apply_plan(const HeadAggregatedTrace& trace,
                               const DisentanglementPlan& plan) {
    ResolvedPlan resolved = resolve_plan(trace, plan);
    HeadAggregatedTrace out = trace;
    for (int l = 0; l < resolved.masked_layers; ++l)
        for (int h : resolved.hijackers)
            mask_row(out.prefill[l][h], resolved.image_keys, resolved.strict_keys[l], h);
    return out;
}

namespace {

double ratio_or_zero(double numerator, double denominator) {
    return denominator == 0.0 ? 0.0 : numerator / denominator;
}

} // namespace

DisentanglementDecision re_disentanglement(const SalienceField& unmasked,
                                           const SalienceField& masked) {
    if (!(unmasked.layout == masked.layout) || unmasked.top_layer() != masked.top_layer() ||
        unmasked.num_generated() != masked.num_generated())
        throw error(errc::layout_mismatch,
                    "unmasked and masked fields describe different traces");

    const int top = unmasked.top_layer();
    const int n_ins = unmasked.layout.num_instruction();

    DisentanglementDecision decision;
    for (int i = 0; i < unmasked.num_generated(); ++i) {
        DisentanglementDecision::PerToken row;
        row.generated = unmasked.layout.generated_start + i;
        for (int b = 0; b < n_ins; ++b) {
            row.unmasked +=
                ratio_or_zero(unmasked.gen_instruction[i](top, b), unmasked.gen_image[i][top]);
            row.masked +=
                ratio_or_zero(masked.gen_instruction[i](top, b), masked.gen_image[i][top]);
        }
        decision.unmasked_ratio_sum += row.unmasked;
        decision.masked_ratio_sum += row.masked;
        decision.per_token.push_back(row);
    }
    decision.delta = decision.unmasked_ratio_sum - decision.masked_ratio_sum;
    decision.keep = decision.delta > 0.0;
    return decision;
}

std::string plan_to_json(const DisentanglementPlan& plan) {
    json doc;
    doc["hijackers"] = plan.hijackers;
    doc["layer_cap"] = plan.layer_cap;
    doc["visual_fraction"] = plan.visual_fraction;
    doc["strict"] = plan.strict;
    return doc.dump();
}

DisentanglementPlan plan_from_json(std::string_view text) {
    json doc = json::parse(text, nullptr, false);
    if (doc.is_discarded() || !doc.is_object())
        throw error(errc::malformed_document, "plan is not a JSON object");
    try {
        DisentanglementPlan plan;
        plan.hijackers = doc.at("hijackers").get<std::vector<int>>();
        plan.layer_cap = doc.at("layer_cap").get<int>();
        plan.visual_fraction = doc.at("visual_fraction").get<double>();
        plan.strict = doc.at("strict").get<bool>();
        return plan;
    } catch (const json::exception& e) {
        throw error(errc::malformed_document, std::string("plan document: ") + e.what());
    }
}

std::string decision_to_json(const DisentanglementDecision& decision) {
    json doc;
    doc["delta"] = decision.delta;
    doc["keep"] = decision.keep;
    doc["unmasked_ratio_sum"] = decision.unmasked_ratio_sum;
    doc["masked_ratio_sum"] = decision.masked_ratio_sum;
    json rows = json::array();
    for (const auto& row : decision.per_token)
        rows.push_back(json{{"generated", row.generated},
                            {"unmasked", row.unmasked},
                            {"masked", row.masked}});
    doc["per_token"] = std::move(rows);
    return doc.dump();
}

} // namespace aid
