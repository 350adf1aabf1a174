#include "aid/toydec.hpp"

#include <algorithm>
#include <cmath>

#include "aid/splitmix.hpp"

namespace aid {

namespace {

// All reductions run in ascending index order; the trace and logit contracts
// require bit-equal results on every platform.
Eigen::VectorXd det_matvec(const Eigen::MatrixXd& w, const Eigen::VectorXd& x) {
    Eigen::VectorXd y(w.rows());
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
        double acc = 0.0;
        for (Eigen::Index c = 0; c < w.cols(); ++c) acc += w(r, c) * x[c];
        y[r] = acc;
    }
    return y;
}

void fill_row_major(Eigen::MatrixXd& m, SplitMix64& rng) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            m(r, c) = rng.weight();
}

} // namespace

ToyModel build_model(const ToyConfig& config) {
    if (config.vocab_size < 1 || config.d_model < 1 || config.num_heads < 1 ||
        config.num_layers < 1 || config.max_seq_len < 1)
        throw error(errc::invalid_config, "all toy config counts must be >= 1");
    if (config.d_model % config.num_heads != 0)
        throw error(errc::invalid_config,
                    "d_model " + std::to_string(config.d_model) + " not divisible by num_heads " +
                        std::to_string(config.num_heads));

    SplitMix64 rng(config.seed);
    ToyModel model;
    model.config = config;
    model.embedding.resize(config.vocab_size, config.d_model);
    fill_row_major(model.embedding, rng);
    model.layers.resize(config.num_layers);
    for (auto& layer : model.layers) {
        layer.wq.resize(config.d_model, config.d_model);
        layer.wk.resize(config.d_model, config.d_model);
        layer.wv.resize(config.d_model, config.d_model);
        layer.wo.resize(config.d_model, config.d_model);
        fill_row_major(layer.wq, rng);
        fill_row_major(layer.wk, rng);
        fill_row_major(layer.wv, rng);
        fill_row_major(layer.wo, rng);
        layer.q_bias = Eigen::VectorXd::Zero(config.d_model);
    }
    model.unembedding.resize(config.vocab_size, config.d_model);
    fill_row_major(model.unembedding, rng);
    return model;
}

int PromptSpec::token_id(int pos) const {
    if (pos < num_image) return pos;
    int j = pos - num_image;
    if (!instruction_ids.empty()) return instruction_ids[j];
    return num_image + j;
}

DecodeSession::DecodeSession(const ToyModel& model, const PromptSpec& prompt)
    : model_(model), prompt_(prompt) {
    if (prompt.num_image < 1 || prompt.num_instruction < 1)
        throw error(errc::invalid_config, "prompt needs image and instruction tokens");
    if (!prompt.instruction_ids.empty() &&
        static_cast<int>(prompt.instruction_ids.size()) != prompt.num_instruction)
        throw error(errc::invalid_config, "instruction id list length mismatch");
    for (int pos = 0; pos < prompt.length(); ++pos) {
        int id = prompt.token_id(pos);
        if (id < 0 || id >= model.config.vocab_size)
            throw error(errc::invalid_config, "prompt token id out of vocabulary");
    }
    if (prompt.length() > model.config.max_seq_len)
        throw error(errc::length_exceeded, "prompt longer than max_seq_len");
    reset();
}

void DecodeSession::reset() {
    tokens_.clear();
    logits_.clear();
    const int L = model_.config.num_layers;
    k_cache_.assign(L, Eigen::MatrixXd(0, model_.config.d_model));
    v_cache_.assign(L, Eigen::MatrixXd(0, model_.config.d_model));
    prefill_rows_.assign(
        L, std::vector<std::vector<Eigen::VectorXd>>(model_.config.num_heads));
    decode_rows_.clear();
    for (int pos = 0; pos < prompt_.length(); ++pos)
        run_position(pos, prompt_.token_id(pos));
}

void DecodeSession::install_plan(const ResolvedPlan& plan) {
    for (int h : plan.hijackers)
        if (h < prompt_.num_image || h >= prompt_.length())
            throw error(errc::index_out_of_range,
                        "plan hijacker " + std::to_string(h) + " is not a prompt instruction");
    if (plan.masked_layers > model_.config.num_layers)
        throw error(errc::index_out_of_range, "plan masks more layers than the model has");
    plan_ = plan;
    reset(); // cached rows from the unedited prefill must not be reused
}

void DecodeSession::run_position(int pos, int token_id) {
    const ToyConfig& cfg = model_.config;
    const int dk = cfg.head_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    const bool is_prefill = pos < prompt_.length();
    const int step = pos - prompt_.length();

    if (!is_prefill)
        decode_rows_.push_back(std::vector<std::vector<Eigen::VectorXd>>(
            cfg.num_layers, std::vector<Eigen::VectorXd>(cfg.num_heads)));

    Eigen::VectorXd x = model_.embedding.row(token_id).transpose();
    for (int l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& w = model_.layers[l];
        Eigen::VectorXd q = det_matvec(w.wq, x) + w.q_bias;
        Eigen::VectorXd k = det_matvec(w.wk, x);
        Eigen::VectorXd v = det_matvec(w.wv, x);

        k_cache_[l].conservativeResize(pos + 1, Eigen::NoChange);
        v_cache_[l].conservativeResize(pos + 1, Eigen::NoChange);
        k_cache_[l].row(pos) = k.transpose();
        v_cache_[l].row(pos) = v.transpose();

        const bool edit = plan_ && l < plan_->masked_layers &&
                          std::find(plan_->hijackers.begin(), plan_->hijackers.end(), pos) !=
                              plan_->hijackers.end();

        Eigen::VectorXd mixed(cfg.d_model);
        for (int h = 0; h < cfg.num_heads; ++h) {
            const int off = h * dk;
            Eigen::VectorXd scores(pos + 1);
            for (int j = 0; j <= pos; ++j) {
                double acc = 0.0;
                for (int c = 0; c < dk; ++c) acc += q[off + c] * k_cache_[l](j, off + c);
                scores[j] = acc * inv_sqrt_dk;
            }
            double m = scores[0];
            for (int j = 1; j <= pos; ++j) m = std::max(m, scores[j]);
            Eigen::VectorXd row(pos + 1);
            double z = 0.0;
            for (int j = 0; j <= pos; ++j) {
                row[j] = std::exp(scores[j] - m);
                z += row[j];
            }
            row /= z;

            if (edit) mask_row(row, plan_->image_keys, plan_->strict_keys[l], pos);

            for (int c = 0; c < dk; ++c) {
                double acc = 0.0;
                for (int j = 0; j <= pos; ++j) acc += row[j] * v_cache_[l](j, off + c);
                mixed[off + c] = acc;
            }

            if (is_prefill)
                prefill_rows_[l][h].push_back(row);
            else
                decode_rows_[step][l][h] = row;
        }
        x += det_matvec(w.wo, mixed);
    }
    logits_.push_back(det_matvec(model_.unembedding, x));
    tokens_.push_back(token_id);
}

int DecodeSession::step() {
    if (static_cast<int>(tokens_.size()) + 1 > model_.config.max_seq_len)
        throw error(errc::length_exceeded, "decoding past max_seq_len");
    const Eigen::VectorXd& logits = logits_.back();
    int best = 0;
    for (int id = 1; id < model_.config.vocab_size; ++id)
        if (logits[id] > logits[best]) best = id; // ties keep the lowest id
    run_position(static_cast<int>(tokens_.size()), best);
    return best;
}

void DecodeSession::decode(int steps) {
    if (steps < 0) throw error(errc::invalid_config, "negative step count");
    if (prompt_.length() + num_generated() + steps > model_.config.max_seq_len)
        throw error(errc::length_exceeded, "prompt plus steps exceeds max_seq_len");
    for (int s = 0; s < steps; ++s) step();
}

std::vector<int> DecodeSession::generated_ids() const {
    return {tokens_.begin() + prompt_.length(), tokens_.end()};
}

AttentionTrace DecodeSession::trace() const {
    AttentionTrace trace;
    trace.num_layers = model_.config.num_layers;
    trace.num_heads = model_.config.num_heads;
    std::vector<TokenRole> roles(prompt_.num_image, TokenRole::Image);
    roles.insert(roles.end(), prompt_.num_instruction, TokenRole::Instruction);
    roles.insert(roles.end(), num_generated(), TokenRole::Generated);
    trace.layout = make_layout(roles);
    trace.texts.assign(roles.size(), std::string());
    trace.prefill = prefill_rows_;
    trace.decode = decode_rows_;
    return trace;
}

DecodeResult greedy_decode(const ToyModel& model, const PromptSpec& prompt, int steps,
                           const ResolvedPlan* plan) {
    DecodeSession session(model, prompt);
    if (plan) session.install_plan(*plan);
    session.decode(steps);
    return {session.generated_ids(), session.trace()};
}

AttentionTrace truncate_decode_steps(const AttentionTrace& trace, int steps) {
    if (steps < 0 || steps > trace.num_decode_steps())
        throw error(errc::index_out_of_range, "cannot truncate to more steps than recorded");
    AttentionTrace out = trace;
    out.decode.resize(steps);
    out.layout.roles.resize(trace.layout.generated_start + steps);
    out.layout = make_layout(out.layout.roles);
    out.texts.resize(out.layout.num_tokens());
    return out;
}

AidOutcome run_aid(const ToyModel& model, const PromptSpec& prompt, const AidParams& params) {
    if (params.probe_steps < 1)
        throw error(errc::invalid_config, "probe_steps must be >= 1");
    if (params.total_steps < params.probe_steps)
        throw error(errc::invalid_config, "total_steps must cover the probe");
    if (params.reeval_interval < 0)
        throw error(errc::invalid_config, "re-evaluation interval must be >= 0");

    AidOutcome outcome;

    // Stage 1: unmodified decode. The probe is its prefix; the rest is the
    // baseline continuation returned on revert.
    DecodeResult baseline = greedy_decode(model, prompt, params.total_steps);
    outcome.baseline_trace = baseline.trace;
    outcome.baseline_tokens = baseline.tokens;

    AttentionTrace probe = truncate_decode_steps(baseline.trace, params.probe_steps);
    HeadAggregatedTrace aggr = aggregate_heads(probe, params.heads);

    // Stage 2: detection.
    outcome.probe_salience = compute_salience(aggr);
    outcome.report = detect_hijackers(outcome.probe_salience, params.k);

    // Stage 3: plan (fresh or replayed), applied to the probe trace.
    if (params.preset_plan) {
        outcome.plan = *params.preset_plan;
    } else {
        int cap = params.layer_cap < 0 ? probe.num_layers : params.layer_cap;
        outcome.plan = build_plan(outcome.report, cap, params.visual_fraction, params.strict);
    }
    HeadAggregatedTrace masked = apply_plan(aggr, outcome.plan);

    // Stage 4: re-check on the edited trace.
    outcome.masked_salience = compute_salience(masked);
    outcome.decision = re_disentanglement(outcome.probe_salience, outcome.masked_salience);

    // Optional re-evaluations with progressively more generated context; any
    // revert wins, since the mask otherwise persists through the KV cache.
    bool keep = outcome.decision.keep;
    if (keep && params.reeval_interval > 0) {
        for (int steps = params.probe_steps + params.reeval_interval;
             steps <= params.total_steps && keep; steps += params.reeval_interval) {
            HeadAggregatedTrace wider =
                aggregate_heads(truncate_decode_steps(baseline.trace, steps), params.heads);
            SalienceField unmasked = compute_salience(wider);
            SalienceField remasked = compute_salience(apply_plan(wider, outcome.plan));
            DisentanglementDecision check = re_disentanglement(unmasked, remasked);
            outcome.reevaluations.push_back({steps, check.delta, check.keep});
            keep = check.keep;
        }
    }

    // Stage 5: restart with the plan installed, or keep the baseline.
    outcome.restarted = keep;
    if (keep) {
        ResolvedPlan resolved = resolve_plan(aggr, outcome.plan);
        DecodeResult final_run = greedy_decode(model, prompt, params.total_steps, &resolved);
        outcome.final_trace = final_run.trace;
        outcome.final_tokens = final_run.tokens;
    } else {
        outcome.final_trace = baseline.trace;
        outcome.final_tokens = baseline.tokens;
    }
    return outcome;
}

std::vector<int> planted_region(const PromptSpec& prompt) {
    int size = std::min(2, prompt.num_image);
    std::vector<int> region;
    for (int i = prompt.num_image - size; i < prompt.num_image; ++i) region.push_back(i);
    return region;
}

namespace {

// Solves a x = y in place by Gaussian elimination with partial pivoting;
// fixed operation order throughout.
Eigen::VectorXd gauss_solve(Eigen::MatrixXd a, Eigen::VectorXd y) {
    const Eigen::Index n = a.rows();
    for (Eigen::Index col = 0; col < n; ++col) {
        Eigen::Index pivot = col;
        for (Eigen::Index r = col + 1; r < n; ++r)
            if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
        if (a(pivot, col) == 0.0)
            throw error(errc::planting_failed, "embedding matrix is rank-deficient");
        if (pivot != col) {
            a.row(pivot).swap(a.row(col));
            std::swap(y[pivot], y[col]);
        }
        for (Eigen::Index r = col + 1; r < n; ++r) {
            double f = a(r, col) / a(col, col);
            for (Eigen::Index c = col; c < n; ++c) a(r, c) -= f * a(col, c);
            y[r] -= f * y[col];
        }
    }
    for (Eigen::Index col = n - 1; col >= 0; --col) {
        for (Eigen::Index c = col + 1; c < n; ++c) y[col] -= a(col, c) * y[c];
        y[col] /= a(col, col);
    }
    return y;
}

// Probe p with exact responses p . e_id = value on the constrained ids and
// least-squares-zero response over the rest of the vocabulary, so whatever
// ids a decode emits carry near-zero marker coefficients. Solved through the
// stationarity system of min ||E p||^2 subject to C p = d.
Eigen::VectorXd constrained_probe(const Eigen::MatrixXd& embeddings,
                                  const std::vector<std::pair<int, double>>& constraints) {
    const Eigen::Index d = embeddings.cols();
    const Eigen::Index k = static_cast<Eigen::Index>(constraints.size());
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(d + k, d + k);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(d + k);
    for (Eigen::Index r = 0; r < d; ++r)
        for (Eigen::Index c = 0; c < d; ++c) {
            double acc = 0.0;
            for (Eigen::Index j = 0; j < embeddings.rows(); ++j)
                acc += embeddings(j, r) * embeddings(j, c);
            kkt(r, c) = 2.0 * acc;
        }
    for (Eigen::Index i = 0; i < k; ++i) {
        const auto& [id, value] = constraints[i];
        for (Eigen::Index c = 0; c < d; ++c) {
            kkt(d + i, c) = embeddings(id, c);
            kkt(c, d + i) = embeddings(id, c);
        }
        rhs[d + i] = value;
    }
    Eigen::VectorXd solution = gauss_solve(std::move(kkt), std::move(rhs));
    return solution.head(d);
}

} // namespace

ToyModel plant_hijacker(const ToyConfig& config, const PromptSpec& prompt, int target,
                        int check_steps, int* quiet_out) {
    ToyModel base = build_model(config);
    if (target < prompt.num_image || target >= prompt.length())
        throw error(errc::invalid_config,
                    "plant target " + std::to_string(target) + " is not an instruction position");
    const int dk = config.head_dim();
    if (dk < 2)
        throw error(errc::planting_failed,
                    "marker channels need at least two coordinates per head");
    if (config.vocab_size < config.d_model)
        throw error(errc::planting_failed,
                    "vocabulary smaller than d_model, probe fit is rank-deficient");
    if (prompt.num_instruction < 2)
        throw error(errc::planting_failed, "planting needs a second instruction token");
    if (check_steps < 1)
        throw error(errc::invalid_config, "check_steps must be >= 1");

    const std::vector<int> region = planted_region(prompt);

    // Marker channels on disjoint coordinate halves of every head chunk.
    // Channel A steers the target's queries onto the region. Channel B pulls
    // every other query onto the target's key: the constant bias gives each
    // query a unit B coefficient, and the -B x p_veto term cancels it for the
    // target (so it never chases its own key) and for a designated quiet
    // instruction token (so its rows stay content-driven, giving the scenario
    // a provably unhijacked token to compare curves against). The kappa term
    // leaks a little of every B query onto the region keys, which makes the
    // hijacked tokens' residual image attention mirror the hijacker's own
    // pattern. B outweighs A so that stray target-direction components in
    // generated hidden states cannot outvote the pull.
    Eigen::VectorXd marker_a = Eigen::VectorXd::Zero(config.d_model);
    Eigen::VectorXd marker_b = Eigen::VectorXd::Zero(config.d_model);
    const int a_width = (dk + 1) / 2;
    for (int h = 0; h < config.num_heads; ++h) {
        for (int c = 0; c < a_width; ++c) marker_a[h * dk + c] = 1.0;
        for (int c = a_width; c < dk; ++c) marker_b[h * dk + c] = 2.0;
    }
    const double kappa = 0.5;

    // A quiet candidate fails when the decode happens to emit its id (the
    // echo's vetoed query cannot chase the target), so the designate is part
    // of the deterministic search.
    std::vector<int> quiet_candidates;
    if (target != prompt.num_image) quiet_candidates.push_back(prompt.num_image);
    for (int pos = prompt.num_image; pos < prompt.length(); ++pos)
        if (pos != target && pos != prompt.num_image) quiet_candidates.push_back(pos);

    for (int quiet : quiet_candidates) {
        // Probes respond with exact 0/1 indicators on every prompt embedding
        // and near-zero on the rest of the vocabulary; at the first layer the
        // hidden states are the embeddings, so the marker coefficients start
        // as exact indicators and only drift with depth.
        std::vector<std::pair<int, double>> want_target, want_veto, want_region;
        for (int pos = 0; pos < prompt.length(); ++pos) {
            int id = prompt.token_id(pos);
            want_target.emplace_back(id, pos == target ? 1.0 : 0.0);
            want_veto.emplace_back(id, pos == target || pos == quiet ? 1.0 : 0.0);
            bool in_region = std::find(region.begin(), region.end(), pos) != region.end();
            want_region.emplace_back(id, in_region ? 1.0 : 0.0);
        }
        Eigen::VectorXd probe_target = constrained_probe(base.embedding, want_target);
        Eigen::VectorXd probe_veto = constrained_probe(base.embedding, want_veto);
        Eigen::VectorXd probe_region = constrained_probe(base.embedding, want_region);

        Eigen::MatrixXd delta_q =
            marker_a * probe_target.transpose() - marker_b * probe_veto.transpose();
        Eigen::MatrixXd delta_k =
            marker_a * probe_region.transpose() +
            marker_b * (probe_target + kappa * probe_region).transpose();

        for (double gain = 1.0; gain <= kPlantGainCap; gain *= 2.0) {
            ToyModel candidate = base;
            for (auto& layer : candidate.layers) {
                layer.wq += gain * delta_q;
                layer.wk += gain * delta_k;
                layer.q_bias = gain * marker_b;
            }

            DecodeResult probe = greedy_decode(candidate, prompt, check_steps);
            HeadAggregatedTrace aggr = aggregate_heads(probe.trace, HeadPolicy::Mean);

            bool ok = true;
            for (int l = 0; l < aggr.num_layers && ok; ++l) {
                double mass = 0.0;
                for (int key : region) mass += aggr.prefill[l][target][key];
                ok = mass >= kPlantTargetRegionMass;
            }
            for (int s = 0; s < aggr.num_decode_steps() && ok; ++s)
                for (int l = 0; l < aggr.num_layers && ok; ++l)
                    ok = aggr.decode[s][l][target] >= kPlantGeneratedMass;
            if (ok) {
                if (quiet_out) *quiet_out = quiet;
                return candidate;
            }
        }
    }
    throw error(errc::planting_failed,
                "thresholds unreachable at gain cap 2^20 for seed " +
                    std::to_string(config.seed));
}

} // namespace aid
