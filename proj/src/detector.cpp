#include "aid/detector.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace aid {

using nlohmann::json;

double HijackerReport::score_of(int absolute_index) const {
    for (size_t i = 0; i < instruction_indices.size(); ++i)
        if (instruction_indices[i] == absolute_index) return scores[i];
    throw error(errc::index_out_of_range,
                "not an instruction index: " + std::to_string(absolute_index));
}

bool HijackerReport::is_hijacker(int absolute_index) const {
    return std::find(hijackers.begin(), hijackers.end(), absolute_index) != hijackers.end();
}

HijackerReport detect_hijackers(const SalienceField& field, int k) {
    if (k < 1)
        throw error(errc::invalid_config, "hijacker count k must be positive");
    if (field.num_generated() == 0)
        throw error(errc::no_generated_tokens, "salience field covers no generated tokens");

    const TokenLayout& lt = field.layout;
    const int n_ins = lt.num_instruction();

    HijackerReport report;
    report.k = k;
    report.instruction_indices.reserve(n_ins);
    report.scores.reserve(n_ins);
    for (int b = 0; b < n_ins; ++b) {
        report.instruction_indices.push_back(lt.instruction_range.begin + b);
        report.scores.push_back(field.instruction_total(b));
    }

    // Rank by score, ties by lowest absolute index. Sorting ordinals makes
    // the selection independent of any evaluation order.
    std::vector<int> order(n_ins);
    for (int b = 0; b < n_ins; ++b) order[b] = b;
    std::sort(order.begin(), order.end(), [&](int x, int y) {
        if (report.scores[x] != report.scores[y]) return report.scores[x] > report.scores[y];
        return x < y;
    });

    const int take = std::min(k, n_ins);
    report.truncated = k > n_ins;
    for (int r = 0; r < take; ++r)
        report.hijackers.push_back(report.instruction_indices[order[r]]);
    std::sort(report.hijackers.begin(), report.hijackers.end());

    // Record the boundary score class when it straddles the cut.
    if (take < n_ins) {
        double cut = report.scores[order[take - 1]];
        if (report.scores[order[take]] == cut) {
            std::vector<int> group;
            for (int b = 0; b < n_ins; ++b)
                if (report.scores[b] == cut)
                    group.push_back(report.instruction_indices[b]);
            report.ties.push_back(std::move(group));
        }
    }
    return report;
}

namespace {

// Causal rows may end inside the image block (an image-token source attends
// only the keys at or before it); missing keys carry weight zero.
double restricted_cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b, int begin, int end) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int j = begin; j < end; ++j) {
        double wa = j < a.size() ? a[j] : 0.0;
        double wb = j < b.size() ? b[j] : 0.0;
        dot += wa * wb;
        na += wa * wa;
        nb += wb * wb;
    }
    if (na == 0.0 || nb == 0.0) return 0.0; // zero-vector operand
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

} // namespace

SimilarityCurve attention_similarity(const HeadAggregatedTrace& trace, int source,
                                     LayerPolicy policy) {
    const TokenLayout& lt = trace.layout;
    if (!lt.is_image(source) && !lt.is_instruction(source))
        throw error(errc::invalid_source,
                    "similarity source must be an image or instruction token, got position " +
                        std::to_string(source));
    if (trace.num_decode_steps() == 0)
        throw error(errc::no_generated_tokens, "trace has no decode steps");
    if (policy.kind == LayerPolicy::Kind::SingleLayer &&
        (policy.layer < 0 || policy.layer >= trace.num_layers))
        throw error(errc::index_out_of_range, "similarity layer out of range");

    const int begin = lt.image_range.begin;
    const int end = lt.image_range.end;

    SimilarityCurve curve;
    curve.source = source;
    curve.layer_policy = policy;
    curve.values.reserve(trace.num_decode_steps());
    for (int i = 0; i < trace.num_decode_steps(); ++i) {
        int pos = lt.generated_start + i;
        double value = 0.0;
        if (policy.kind == LayerPolicy::Kind::SingleLayer) {
            value = restricted_cosine(trace.row(policy.layer, source),
                                      trace.row(policy.layer, pos), begin, end);
        } else {
            double acc = 0.0;
            for (int l = 0; l < trace.num_layers; ++l)
                acc += restricted_cosine(trace.row(l, source), trace.row(l, pos), begin, end);
            value = acc / static_cast<double>(trace.num_layers);
        }
        curve.values.push_back(value);
    }
    return curve;
}

std::string report_to_json(const HijackerReport& report) {
    json doc;
    doc["k"] = report.k;
    doc["hijackers"] = report.hijackers;
    json scores = json::array();
    for (size_t i = 0; i < report.scores.size(); ++i)
        scores.push_back(json{{"index", report.instruction_indices[i]},
                              {"score", report.scores[i]}});
    doc["scores"] = std::move(scores);
    doc["ties"] = report.ties;
    doc["truncated"] = report.truncated;
    return doc.dump();
}

std::string report_to_csv(const HijackerReport& report, const std::vector<std::string>& texts) {
    std::ostringstream out;
    out << "index,text,score,selected\n";
    for (size_t i = 0; i < report.instruction_indices.size(); ++i) {
        int idx = report.instruction_indices[i];
        char buf[32];
        auto [p, ec] = std::to_chars(buf, buf + sizeof buf, report.scores[i]);
        out << idx << ',' << (idx < static_cast<int>(texts.size()) ? texts[idx] : "") << ','
            << std::string_view(buf, p - buf) << ',' << (report.is_hijacker(idx) ? 1 : 0)
            << '\n';
    }
    return out.str();
}

std::string similarity_to_json(const SimilarityCurve& curve) {
    json doc;
    doc["source"] = curve.source;
    doc["values"] = curve.values;
    doc["layer_policy"] = curve.layer_policy.kind == LayerPolicy::Kind::PerLayerMean
                              ? json("per_layer_mean")
                              : json{{"single_layer", curve.layer_policy.layer}};
    return doc.dump();
}

} // namespace aid
