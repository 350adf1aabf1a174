#include "aid/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace aid {

using nlohmann::json;

const char* role_name(TokenRole r) {
    switch (r) {
        case TokenRole::Image:       return "image";
        case TokenRole::Instruction: return "instruction";
        case TokenRole::Generated:   return "generated";
        case TokenRole::Other:       return "other";
    }
    return "?";
}

TokenRole role_from_name(std::string_view name) {
    if (name == "image") return TokenRole::Image;
    if (name == "instruction") return TokenRole::Instruction;
    if (name == "generated") return TokenRole::Generated;
    if (name == "other") return TokenRole::Other;
    throw error(errc::malformed_document, "unknown token role '" + std::string(name) + "'");
}

TokenLayout make_layout(const std::vector<TokenRole>& roles) {
    // Legal role sequence: other* image+ instruction+ generated*.
    enum Phase { InOther, InImage, InInstruction, InGenerated };
    TokenLayout layout;
    layout.roles = roles;

    Phase phase = InOther;
    int image_begin = -1, image_end = -1;
    int ins_begin = -1, ins_end = -1;
    int gen_begin = -1;
    for (int i = 0; i < static_cast<int>(roles.size()); ++i) {
        TokenRole r = roles[i];
        switch (r) {
            case TokenRole::Other:
                if (phase != InOther)
                    throw error(errc::layout_violation,
                                "other token at position " + std::to_string(i) +
                                    " appears after the image block");
                break;
            case TokenRole::Image:
                if (phase == InOther) {
                    phase = InImage;
                    image_begin = i;
                } else if (phase != InImage) {
                    throw error(errc::layout_violation,
                                "image token at position " + std::to_string(i) +
                                    " breaks image->instruction->generated order");
                }
                image_end = i + 1;
                break;
            case TokenRole::Instruction:
                if (phase == InImage) {
                    phase = InInstruction;
                    ins_begin = i;
                } else if (phase != InInstruction) {
                    throw error(errc::layout_violation,
                                "instruction token at position " + std::to_string(i) +
                                    " breaks image->instruction->generated order");
                }
                ins_end = i + 1;
                break;
            case TokenRole::Generated:
                if (phase == InInstruction) {
                    phase = InGenerated;
                    gen_begin = i;
                } else if (phase != InGenerated) {
                    throw error(errc::layout_violation,
                                "generated token at position " + std::to_string(i) +
                                    " breaks image->instruction->generated order");
                }
                break;
        }
    }
    if (image_begin < 0)
        throw error(errc::layout_violation, "trace has no image tokens");
    if (ins_begin < 0)
        throw error(errc::layout_violation, "trace has no instruction tokens");

    layout.image_range = {image_begin, image_end};
    layout.instruction_range = {ins_begin, ins_end};
    layout.generated_start = gen_begin < 0 ? static_cast<int>(roles.size()) : gen_begin;
    return layout;
}

namespace {

void check_row(const Eigen::VectorXd& row, int layer, int head, int query) {
    if (row.size() != query + 1)
        throw error(errc::shape_violation,
                    "row length " + std::to_string(row.size()) + " != query+1 at layer " +
                        std::to_string(layer) + " head " + std::to_string(head) + " query " +
                        std::to_string(query));
    double sum = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) {
        double w = row[j];
        if (!std::isfinite(w) || w < 0.0)
            throw error(errc::invalid_weight,
                        "non-finite or negative weight at layer " + std::to_string(layer) +
                            " head " + std::to_string(head) + " query " + std::to_string(query) +
                            " key " + std::to_string(j));
        sum += w;
    }
    if (std::abs(sum - 1.0) > kRowSumTolerance)
        throw error(errc::row_sum_violation,
                    "row sums to " + std::to_string(sum) + " at layer " + std::to_string(layer) +
                        " head " + std::to_string(head) + " query " + std::to_string(query));
}

Eigen::VectorXd parse_row(const json& arr, int layer, int head, int query) {
    if (!arr.is_array())
        throw error(errc::malformed_document, "attention row is not an array");
    Eigen::VectorXd row(arr.size());
    Eigen::Index j = 0;
    for (const auto& v : arr) {
        if (!v.is_number())
            throw error(errc::malformed_document, "attention weight is not a number");
        row[j++] = v.get<double>();
    }
    check_row(row, layer, head, query);
    return row;
}

} // namespace

void validate_trace(const AttentionTrace& trace) {
    const TokenLayout& lt = trace.layout;
    if (trace.num_layers < 1 || trace.num_heads < 1)
        throw error(errc::malformed_document, "num_layers and num_heads must be positive");
    make_layout(lt.roles); // re-checks block order and non-emptiness

    if (static_cast<int>(trace.prefill.size()) != trace.num_layers)
        throw error(errc::shape_violation, "prefill layer count mismatch");
    for (int l = 0; l < trace.num_layers; ++l) {
        if (static_cast<int>(trace.prefill[l].size()) != trace.num_heads)
            throw error(errc::shape_violation, "prefill head count mismatch");
        for (int h = 0; h < trace.num_heads; ++h) {
            if (static_cast<int>(trace.prefill[l][h].size()) != lt.generated_start)
                throw error(errc::shape_violation, "prefill query count mismatch");
            for (int q = 0; q < lt.generated_start; ++q)
                check_row(trace.prefill[l][h][q], l, h, q);
        }
    }
    if (static_cast<int>(trace.decode.size()) != lt.num_generated())
        throw error(errc::shape_violation, "decode step count does not match generated tokens");
    for (int s = 0; s < trace.num_decode_steps(); ++s) {
        if (static_cast<int>(trace.decode[s].size()) != trace.num_layers)
            throw error(errc::shape_violation, "decode layer count mismatch");
        int q = lt.generated_start + s;
        for (int l = 0; l < trace.num_layers; ++l) {
            if (static_cast<int>(trace.decode[s][l].size()) != trace.num_heads)
                throw error(errc::shape_violation, "decode head count mismatch");
            for (int h = 0; h < trace.num_heads; ++h)
                check_row(trace.decode[s][l][h], l, h, q);
        }
    }
}

namespace {
AttentionTrace load_trace_impl(std::string_view json_text);
}

AttentionTrace load_trace(std::string_view json_text) {
    try {
        return load_trace_impl(json_text);
    } catch (const json::exception& e) {
        throw error(errc::malformed_document, std::string("trace document: ") + e.what());
    }
}

namespace {

AttentionTrace load_trace_impl(std::string_view json_text) {
    json doc = json::parse(json_text, nullptr, false);
    if (doc.is_discarded() || !doc.is_object())
        throw error(errc::malformed_document, "not a JSON object");

    if (!doc.contains("version") || !doc["version"].is_number_integer() ||
        doc["version"].get<int>() != 1)
        throw error(errc::malformed_document, "missing or unsupported trace version");
    for (const char* key : {"num_layers", "num_heads", "tokens", "prefill_attention",
                            "decode_steps"})
        if (!doc.contains(key))
            throw error(errc::malformed_document, std::string("missing field '") + key + "'");

    AttentionTrace trace;
    trace.num_layers = doc["num_layers"].get<int>();
    trace.num_heads = doc["num_heads"].get<int>();
    if (trace.num_layers < 1 || trace.num_heads < 1)
        throw error(errc::malformed_document, "num_layers and num_heads must be positive");

    const json& tokens = doc["tokens"];
    if (!tokens.is_array() || tokens.empty())
        throw error(errc::malformed_document, "tokens must be a non-empty array");
    std::vector<TokenRole> roles;
    roles.reserve(tokens.size());
    int expect = 0;
    for (const auto& tok : tokens) {
        if (!tok.is_object() || !tok.contains("index") || !tok.contains("role"))
            throw error(errc::malformed_document, "token entry needs index and role");
        if (tok["index"].get<int>() != expect)
            throw error(errc::malformed_document,
                        "token indices must be 0..n-1 in order (got " +
                            tok["index"].dump() + " at position " + std::to_string(expect) + ")");
        roles.push_back(role_from_name(tok["role"].get<std::string>()));
        trace.texts.push_back(tok.contains("text") ? tok["text"].get<std::string>()
                                                   : std::string());
        ++expect;
    }
    trace.layout = make_layout(roles);

    const json& prefill = doc["prefill_attention"];
    if (!prefill.is_array() || static_cast<int>(prefill.size()) != trace.num_layers)
        throw error(errc::shape_violation, "prefill_attention must have num_layers entries");
    trace.prefill.resize(trace.num_layers);
    for (int l = 0; l < trace.num_layers; ++l) {
        const json& heads = prefill[l];
        if (!heads.is_array() || static_cast<int>(heads.size()) != trace.num_heads)
            throw error(errc::shape_violation, "prefill layer must have num_heads entries");
        trace.prefill[l].resize(trace.num_heads);
        for (int h = 0; h < trace.num_heads; ++h) {
            const json& queries = heads[h];
            if (!queries.is_array() ||
                static_cast<int>(queries.size()) != trace.layout.generated_start)
                throw error(errc::shape_violation,
                            "prefill head must have one row per prompt position");
            trace.prefill[l][h].reserve(queries.size());
            for (int q = 0; q < static_cast<int>(queries.size()); ++q)
                trace.prefill[l][h].push_back(parse_row(queries[q], l, h, q));
        }
    }

    const json& steps = doc["decode_steps"];
    if (!steps.is_array())
        throw error(errc::malformed_document, "decode_steps must be an array");
    if (static_cast<int>(steps.size()) != trace.layout.num_generated())
        throw error(errc::shape_violation,
                    "decode_steps count does not match generated token count");
    trace.decode.resize(steps.size());
    for (int s = 0; s < static_cast<int>(steps.size()); ++s) {
        const json& step = steps[s];
        if (!step.is_object() || !step.contains("attention"))
            throw error(errc::malformed_document, "decode step needs an attention field");
        const json& layers = step["attention"];
        if (!layers.is_array() || static_cast<int>(layers.size()) != trace.num_layers)
            throw error(errc::shape_violation, "decode step must have num_layers rows");
        int q = trace.layout.generated_start + s;
        trace.decode[s].resize(trace.num_layers);
        for (int l = 0; l < trace.num_layers; ++l) {
            const json& heads = layers[l];
            if (!heads.is_array() || static_cast<int>(heads.size()) != trace.num_heads)
                throw error(errc::shape_violation, "decode step layer must have num_heads rows");
            trace.decode[s][l].reserve(trace.num_heads);
            for (int h = 0; h < trace.num_heads; ++h)
                trace.decode[s][l].push_back(parse_row(heads[h], l, h, q));
        }
    }

    if (doc.contains("meta")) {
        if (!doc["meta"].is_object())
            throw error(errc::malformed_document, "meta must be an object");
        trace.meta = doc["meta"].dump();
    }
    return trace;
}

} // namespace

AttentionTrace load_trace_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw error(errc::malformed_document, "cannot open trace file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return load_trace(buf.str());
}

std::string serialize_trace(const AttentionTrace& trace) {
    json doc;
    doc["version"] = 1;
    doc["num_layers"] = trace.num_layers;
    doc["num_heads"] = trace.num_heads;

    json tokens = json::array();
    for (int i = 0; i < trace.layout.num_tokens(); ++i) {
        json tok{{"index", i}, {"role", role_name(trace.layout.roles[i])}};
        if (i < static_cast<int>(trace.texts.size()) && !trace.texts[i].empty())
            tok["text"] = trace.texts[i];
        tokens.push_back(std::move(tok));
    }
    doc["tokens"] = std::move(tokens);

    json prefill = json::array();
    for (const auto& layer : trace.prefill) {
        json heads = json::array();
        for (const auto& head : layer) {
            json queries = json::array();
            for (const auto& row : head) {
                json r = json::array();
                for (Eigen::Index j = 0; j < row.size(); ++j) r.push_back(row[j]);
                queries.push_back(std::move(r));
            }
            heads.push_back(std::move(queries));
        }
        prefill.push_back(std::move(heads));
    }
    doc["prefill_attention"] = std::move(prefill);

    json steps = json::array();
    for (const auto& step : trace.decode) {
        json layers = json::array();
        for (const auto& layer : step) {
            json heads = json::array();
            for (const auto& row : layer) {
                json r = json::array();
                for (Eigen::Index j = 0; j < row.size(); ++j) r.push_back(row[j]);
                heads.push_back(std::move(r));
            }
            layers.push_back(std::move(heads));
        }
        steps.push_back(json{{"attention", std::move(layers)}});
    }
    doc["decode_steps"] = std::move(steps);

    if (!trace.meta.empty()) doc["meta"] = json::parse(trace.meta);
    return doc.dump();
}

HeadAggregatedTrace aggregate_heads(const AttentionTrace& trace, HeadPolicy policy) {
    HeadAggregatedTrace out;
    out.num_layers = trace.num_layers;
    out.layout = trace.layout;
    out.policy = policy;

    const int H = trace.num_heads;
    auto collapse = [&](auto row_of_head, Eigen::Index len) -> Eigen::VectorXd {
        // H == 1 must be bit-identical to the input under either policy.
        if (H == 1) return row_of_head(0);
        Eigen::VectorXd row(len);
        if (policy == HeadPolicy::Mean) {
            for (Eigen::Index j = 0; j < len; ++j) {
                double acc = 0.0;
                for (int h = 0; h < H; ++h) acc += row_of_head(h)[j];
                row[j] = acc / static_cast<double>(H);
            }
        } else {
            double sum = 0.0;
            for (Eigen::Index j = 0; j < len; ++j) {
                double m = row_of_head(0)[j];
                for (int h = 1; h < H; ++h) m = std::max(m, row_of_head(h)[j]);
                row[j] = m;
                sum += m;
            }
            row /= sum; // max of row-stochastic rows always has positive mass
        }
        return row;
    };

    out.prefill.resize(trace.num_layers);
    for (int l = 0; l < trace.num_layers; ++l) {
        out.prefill[l].reserve(trace.layout.generated_start);
        for (int q = 0; q < trace.layout.generated_start; ++q)
            out.prefill[l].push_back(
                collapse([&](int h) -> const Eigen::VectorXd& { return trace.prefill[l][h][q]; },
                         q + 1));
    }
    out.decode.resize(trace.decode.size());
    for (int s = 0; s < trace.num_decode_steps(); ++s) {
        int q = trace.layout.generated_start + s;
        out.decode[s].reserve(trace.num_layers);
        for (int l = 0; l < trace.num_layers; ++l)
            out.decode[s].push_back(
                collapse([&](int h) -> const Eigen::VectorXd& { return trace.decode[s][l][h]; },
                         q + 1));
    }
    return out;
}

bool traces_equal(const AttentionTrace& a, const AttentionTrace& b) {
    if (a.num_layers != b.num_layers || a.num_heads != b.num_heads) return false;
    if (!(a.layout == b.layout) || a.texts != b.texts) return false;
    auto rows_equal = [](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
        if (x.size() != y.size()) return false;
        for (Eigen::Index j = 0; j < x.size(); ++j)
            if (x[j] != y[j]) return false;
        return true;
    };
    if (a.prefill.size() != b.prefill.size() || a.decode.size() != b.decode.size()) return false;
    for (size_t l = 0; l < a.prefill.size(); ++l) {
        if (a.prefill[l].size() != b.prefill[l].size()) return false;
        for (size_t h = 0; h < a.prefill[l].size(); ++h) {
            if (a.prefill[l][h].size() != b.prefill[l][h].size()) return false;
            for (size_t q = 0; q < a.prefill[l][h].size(); ++q)
                if (!rows_equal(a.prefill[l][h][q], b.prefill[l][h][q])) return false;
        }
    }
    for (size_t s = 0; s < a.decode.size(); ++s) {
        if (a.decode[s].size() != b.decode[s].size()) return false;
        for (size_t l = 0; l < a.decode[s].size(); ++l) {
            if (a.decode[s][l].size() != b.decode[s][l].size()) return false;
            for (size_t h = 0; h < a.decode[s][l].size(); ++h)
                if (!rows_equal(a.decode[s][l][h], b.decode[s][l][h])) return false;
        }
    }
    if (a.meta.empty() != b.meta.empty()) return false;
    if (!a.meta.empty() && json::parse(a.meta) != json::parse(b.meta)) return false;
    return true;
}

} // namespace aid
