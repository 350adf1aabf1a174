#include "aid/salience.hpp"

#include <cmath>

#include <json.hpp>

namespace aid {

using nlohmann::json;

Eigen::MatrixXd compute_visual_salience(const HeadAggregatedTrace& trace) {
    const TokenLayout& lt = trace.layout;
    const int L = trace.num_layers;
    const int n_img = lt.num_image();
    const int img0 = lt.image_range.begin;

    Eigen::MatrixXd vis(L + 1, n_img);
    vis.row(0).setOnes();
    for (int l = 1; l <= L; ++l) {
        for (int a = 0; a < n_img; ++a) {
            const Eigen::VectorXd& row = trace.prefill[l - 1][img0 + a];
            double acc = 0.0;
            for (int b = 0; b <= a; ++b) {
                // An edge belongs to the interaction set only while it carries
                // weight; the self edge is the residual and always belongs.
                double w = row[img0 + b];
                if (w > 0.0 || b == a) acc += (1.0 + w) * vis(l - 1, b);
            }
            vis(l, a) = acc;
        }
    }
    return vis;
}

Eigen::MatrixXd compute_instruction_salience(const HeadAggregatedTrace& trace,
                                             const Eigen::MatrixXd& vis) {
    const TokenLayout& lt = trace.layout;
    const int L = trace.num_layers;
    const int n_img = lt.num_image();
    const int n_ins = lt.num_instruction();
    const int img0 = lt.image_range.begin;
    const int ins0 = lt.instruction_range.begin;

    Eigen::MatrixXd ins(L + 1, n_ins);
    ins.row(0).setZero();
    for (int l = 1; l <= L; ++l) {
        for (int b = 0; b < n_ins; ++b) {
            const Eigen::VectorXd& row = trace.prefill[l - 1][ins0 + b];
            double acc = 0.0;
            for (int a = 0; a < n_img; ++a)
                acc += row[img0 + a] * vis(l - 1, a);
            for (int c = 0; c <= b; ++c) {
                // Zero-weight edges leave the set; the self edge never does.
                double w = row[ins0 + c];
                if (w > 0.0 || c == b) acc += (1.0 + w) * ins(l - 1, c);
            }
            ins(l, b) = acc;
        }
    }
    return ins;
}

template <GenTerms Terms>
std::vector<Eigen::MatrixXd> compute_generated_contributions(const HeadAggregatedTrace& trace,
                                                             const Eigen::MatrixXd& vis,
                                                             const Eigen::MatrixXd& ins) {
    (void)vis;
    const TokenLayout& lt = trace.layout;
    if (trace.num_decode_steps() == 0)
        throw error(errc::no_generated_tokens, "no generated tokens in trace");
    const int L = trace.num_layers;
    const int n_ins = lt.num_instruction();
    const int ins0 = lt.instruction_range.begin;
    const int gen0 = lt.generated_start;
    const int G = trace.num_decode_steps();

    std::vector<Eigen::MatrixXd> gen(G);
    // Generated tokens in position order: the same-layer cross-generated sum
    // only ever reads finished earlier columns.
    for (int i = 0; i < G; ++i) {
        gen[i].resize(L + 1, n_ins);
        gen[i].row(0).setZero(); // forced by the zero instruction base case
        const int pos = gen0 + i;
        for (int l = 1; l <= L; ++l) {
            const Eigen::VectorXd& row = trace.decode[i][l - 1];
            const double self_w = row[pos];
            for (int b = 0; b < n_ins; ++b) {
                double ins_val = Terms == GenTerms::SameLayer ? ins(l, b) : ins(l - 1, b);
                double acc = row[ins0 + b] * ins_val;
                acc += (1.0 + self_w) * gen[i](l - 1, b);
                for (int j = 0; j < i; ++j)
                    acc += row[gen0 + j] * gen[j](l, b);
                gen[i](l, b) = acc;
            }
        }
    }
    return gen;
}

template <GenTerms Terms>
std::vector<Eigen::VectorXd> compute_image_contribution(const HeadAggregatedTrace& trace,
                                                        const Eigen::MatrixXd& vis) {
    const TokenLayout& lt = trace.layout;
    if (trace.num_decode_steps() == 0)
        throw error(errc::no_generated_tokens, "no generated tokens in trace");
    const int L = trace.num_layers;
    const int n_img = lt.num_image();
    const int img0 = lt.image_range.begin;
    const int G = trace.num_decode_steps();

    std::vector<Eigen::VectorXd> out(G);
    for (int i = 0; i < G; ++i) {
        out[i].resize(L + 1);
        const int pos = lt.generated_start + i;
        {
            // Base layer reads the first attention layer's row.
            const Eigen::VectorXd& row = trace.decode[i][0];
            double acc = 0.0;
            for (int a = 0; a < n_img; ++a)
                acc += row[img0 + a] * vis(0, a);
            out[i][0] = acc;
        }
        for (int l = 1; l <= L; ++l) {
            const Eigen::VectorXd& row = trace.decode[i][l - 1];
            const int vl = Terms == GenTerms::SameLayer ? l : l - 1;
            double acc = 0.0;
            for (int a = 0; a < n_img; ++a)
                acc += row[img0 + a] * vis(vl, a);
            acc += (1.0 + row[pos]) * out[i][l - 1];
            out[i][l] = acc;
        }
    }
    return out;
}

template <GenTerms Terms>
SalienceField compute_salience(const HeadAggregatedTrace& trace) {
    SalienceField field;
    field.layout = trace.layout;
    field.vis = compute_visual_salience(trace);
    field.ins = compute_instruction_salience(trace, field.vis);
    field.gen_instruction = compute_generated_contributions<Terms>(trace, field.vis, field.ins);
    field.gen_image = compute_image_contribution<Terms>(trace, field.vis);
    return field;
}

template std::vector<Eigen::MatrixXd> compute_generated_contributions<GenTerms::SameLayer>(
    const HeadAggregatedTrace&, const Eigen::MatrixXd&, const Eigen::MatrixXd&);
template std::vector<Eigen::MatrixXd> compute_generated_contributions<GenTerms::PreviousLayer>(
    const HeadAggregatedTrace&, const Eigen::MatrixXd&, const Eigen::MatrixXd&);
template std::vector<Eigen::VectorXd> compute_image_contribution<GenTerms::SameLayer>(
    const HeadAggregatedTrace&, const Eigen::MatrixXd&);
template std::vector<Eigen::VectorXd> compute_image_contribution<GenTerms::PreviousLayer>(
    const HeadAggregatedTrace&, const Eigen::MatrixXd&);
template SalienceField compute_salience<GenTerms::SameLayer>(const HeadAggregatedTrace&);
template SalienceField compute_salience<GenTerms::PreviousLayer>(const HeadAggregatedTrace&);

namespace {

// The oracle re-derives every value by expanding the recursions into their
// literal sum trees. No memoization on purpose: each term is an explicit
// weighted path, so the oracle shares no evaluation shortcuts with the
// engine it checks.
struct Enumerator {
    const HeadAggregatedTrace& trace;
    const int img0, n_img, ins0, n_ins, gen0;

    explicit Enumerator(const HeadAggregatedTrace& t)
        : trace(t),
          img0(t.layout.image_range.begin),
          n_img(t.layout.num_image()),
          ins0(t.layout.instruction_range.begin),
          n_ins(t.layout.num_instruction()),
          gen0(t.layout.generated_start) {}

    double vis(int l, int a) const {
        if (l == 0) return 1.0;
        const Eigen::VectorXd& row = trace.prefill[l - 1][img0 + a];
        double acc = 0.0;
        for (int b = 0; b <= a; ++b)
            if (row[img0 + b] > 0.0 || b == a)
                acc += (1.0 + row[img0 + b]) * vis(l - 1, b);
        return acc;
    }

    double ins(int l, int b) const {
        if (l == 0) return 0.0;
        const Eigen::VectorXd& row = trace.prefill[l - 1][ins0 + b];
        double acc = 0.0;
        for (int a = 0; a < n_img; ++a)
            acc += row[img0 + a] * vis(l - 1, a);
        for (int c = 0; c <= b; ++c)
            if (row[ins0 + c] > 0.0 || c == b)
                acc += (1.0 + row[ins0 + c]) * ins(l - 1, c);
        return acc;
    }

    double gen(int i, int l, int b) const {
        if (l == 0) return 0.0;
        const Eigen::VectorXd& row = trace.decode[i][l - 1];
        double acc = row[ins0 + b] * ins(l, b);
        acc += (1.0 + row[gen0 + i]) * gen(i, l - 1, b);
        for (int j = 0; j < i; ++j)
            acc += row[gen0 + j] * gen(j, l, b);
        return acc;
    }

    double gen_image(int i, int l) const {
        const Eigen::VectorXd& row = trace.decode[i][l == 0 ? 0 : l - 1];
        double acc = 0.0;
        for (int a = 0; a < n_img; ++a)
            acc += row[img0 + a] * vis(l, a);
        if (l > 0) acc += (1.0 + row[gen0 + i]) * gen_image(i, l - 1);
        return acc;
    }
};

} // namespace

SalienceField oracle_salience(const HeadAggregatedTrace& trace) {
    if (trace.num_layers > kOracleMaxLayers ||
        trace.layout.num_tokens() > kOracleMaxTokens ||
        trace.num_decode_steps() > kOracleMaxSteps)
        throw error(errc::instance_too_large,
                    "oracle caps: layers <= " + std::to_string(kOracleMaxLayers) +
                        ", tokens <= " + std::to_string(kOracleMaxTokens) +
                        ", decode steps <= " + std::to_string(kOracleMaxSteps));
    if (trace.num_decode_steps() == 0)
        throw error(errc::no_generated_tokens, "no generated tokens in trace");

    Enumerator e(trace);
    const int L = trace.num_layers;

    SalienceField field;
    field.layout = trace.layout;
    field.vis.resize(L + 1, e.n_img);
    for (int l = 0; l <= L; ++l)
        for (int a = 0; a < e.n_img; ++a)
            field.vis(l, a) = e.vis(l, a);
    field.ins.resize(L + 1, e.n_ins);
    for (int l = 0; l <= L; ++l)
        for (int b = 0; b < e.n_ins; ++b)
            field.ins(l, b) = e.ins(l, b);
    const int G = trace.num_decode_steps();
    field.gen_instruction.resize(G);
    field.gen_image.resize(G);
    for (int i = 0; i < G; ++i) {
        field.gen_instruction[i].resize(L + 1, e.n_ins);
        for (int l = 0; l <= L; ++l)
            for (int b = 0; b < e.n_ins; ++b)
                field.gen_instruction[i](l, b) = e.gen(i, l, b);
        field.gen_image[i].resize(L + 1);
        for (int l = 0; l <= L; ++l)
            field.gen_image[i][l] = e.gen_image(i, l);
    }
    return field;
}

namespace {

double rel_dev(double a, double b) {
    if (a == b) return 0.0;
    return std::abs(a - b) / std::max(std::abs(a), std::abs(b));
}

} // namespace

double max_relative_deviation(const SalienceField& a, const SalienceField& b) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.vis.size(); ++i)
        worst = std::max(worst, rel_dev(a.vis(i), b.vis(i)));
    for (Eigen::Index i = 0; i < a.ins.size(); ++i)
        worst = std::max(worst, rel_dev(a.ins(i), b.ins(i)));
    for (size_t g = 0; g < a.gen_instruction.size(); ++g) {
        for (Eigen::Index i = 0; i < a.gen_instruction[g].size(); ++i)
            worst = std::max(worst, rel_dev(a.gen_instruction[g](i), b.gen_instruction[g](i)));
        for (Eigen::Index i = 0; i < a.gen_image[g].size(); ++i)
            worst = std::max(worst, rel_dev(a.gen_image[g][i], b.gen_image[g][i]));
    }
    return worst;
}

std::string salience_to_json(const SalienceField& field, bool per_layer) {
    const TokenLayout& lt = field.layout;
    const int top = field.top_layer();
    json doc;

    json vis = json::array();
    for (int l = 0; l <= top; ++l) {
        json row = json::array();
        for (int a = 0; a < lt.num_image(); ++a) row.push_back(field.vis(l, a));
        vis.push_back(std::move(row));
    }
    doc["vis"] = std::move(vis);

    json ins = json::array();
    for (int l = 0; l <= top; ++l) {
        json row = json::array();
        for (int b = 0; b < lt.num_instruction(); ++b) row.push_back(field.ins(l, b));
        ins.push_back(std::move(row));
    }
    doc["ins"] = std::move(ins);

    json gen = json::object();
    for (int i = 0; i < field.num_generated(); ++i) {
        json per_source = json::object();
        for (int b = 0; b < lt.num_instruction(); ++b)
            per_source[std::to_string(lt.instruction_range.begin + b)] =
                field.gen_instruction[i](top, b);
        per_source["-1"] = field.gen_image[i][top];
        gen[std::to_string(lt.generated_start + i)] = std::move(per_source);
    }
    doc["gen"] = std::move(gen);

    if (per_layer) {
        json layers = json::object();
        for (int i = 0; i < field.num_generated(); ++i) {
            json per_source = json::object();
            for (int b = 0; b < lt.num_instruction(); ++b) {
                json col = json::array();
                for (int l = 0; l <= top; ++l) col.push_back(field.gen_instruction[i](l, b));
                per_source[std::to_string(lt.instruction_range.begin + b)] = std::move(col);
            }
            json img_col = json::array();
            for (int l = 0; l <= top; ++l) img_col.push_back(field.gen_image[i][l]);
            per_source["-1"] = std::move(img_col);
            layers[std::to_string(lt.generated_start + i)] = std::move(per_source);
        }
        doc["gen_layers"] = std::move(layers);
    }

    // Conventions a consumer should know before comparing numbers.
    doc["other_tokens_excluded"] = lt.num_other();
    doc["notes"] = json::array({
        "tokens with role 'other' contribute to no salience sum",
        "image-driven channel uses the same-layer visual table and no cross-generated term",
    });
    return doc.dump();
}

} // namespace aid
