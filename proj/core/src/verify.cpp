#include "evit/verify.hpp"

#include <algorithm>
#include <cmath>

namespace evit::verify {

Var RecordedEncoder::param(std::string_view name) const {
    for (const auto& [n, v] : params) {
        if (n == name) return v;
    }
    throw UsageError("no recorded parameter named '" + std::string(name) + "'");
}

namespace {

constexpr std::size_t kHeadParams = 4;   // patch_embed.weight/bias, cls_token, pos_embed
constexpr std::size_t kLayerParams = 12;

struct LayerVars {
    Var norm1_gamma, norm1_beta, qkv_w, qkv_b, proj_w, proj_b, norm2_gamma, norm2_beta, fc1_w, fc1_b, fc2_w, fc2_b;
};

LayerVars layer_vars(const RecordedEncoder& rec, std::size_t layer) {
    const std::size_t base = kHeadParams + layer * kLayerParams;
    auto p = [&](std::size_t i) { return rec.params[base + i].second; };
    return LayerVars{p(0), p(1), p(2), p(3), p(4), p(5), p(6), p(7), p(8), p(9), p(10), p(11)};
}

Var attentiveness_var(Tape& tape, const std::vector<Var>& maps, ScoreSource source) {
    const std::size_t n = maps.front().value().rows();
    Var sum{};
    bool first = true;
    for (const Var& m : maps) {
        Var part;
        if (source == ScoreSource::ClsToTokens) {
            part = slice_cols(slice_rows(m, 0, 1), 1, n);
        } else {
            const Var ones = tape.constant(Matrix(1, n, 1.0));
            part = slice_cols(divide(matmul(ones, m), static_cast<double>(n)), 1, n);
        }
        sum = first ? part : add(sum, part);
        first = false;
    }
    return divide(sum, static_cast<double>(maps.size()));
}

}  // namespace

RecordedEncoder record_encoder(Tape& tape, const TokenSequence& tokens, const WeightSet& w, const ReorgPlan& plan,
                               const RecordOptions& opts, Rng* rng) {
    const ModelConfig& c = w.config;
    c.validate();
    plan.validate(c.depth);
    tokens.validate();
    if (tokens.dim() != c.dim) throw ShapeError("token width does not match model dim");

    RecordedEncoder rec;
    rec.input = tape.leaf(tokens.tokens);
    for (const auto& [name, m] : w.tensors()) rec.params.emplace_back(name, tape.leaf(*m));

    const std::size_t d = c.dim;
    const std::size_t dh = c.head_dim();
    const double scale = std::sqrt(static_cast<double>(dh));

    Var seq = rec.input;
    std::vector<Origin> origins = tokens.origins;
    for (std::size_t l = 1; l <= c.depth; ++l) {
        const LayerVars lv = layer_vars(rec, l - 1);

        const Var xn = layernorm(seq, lv.norm1_gamma, lv.norm1_beta);
        const Var qkv = add_bias(matmul(xn, lv.qkv_w), lv.qkv_b);
        std::vector<Var> head_out, maps;
        for (std::size_t h = 0; h < c.heads; ++h) {
            const Var q = slice_cols(qkv, h * dh, (h + 1) * dh);
            const Var k = slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
            const Var v = slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
            const Var attn = softmax_rows(divide(matmul(q, transpose(k)), scale));
            head_out.push_back(matmul(attn, v));
            maps.push_back(attn);
        }
        seq = add(add_bias(matmul(concat_cols(head_out), lv.proj_w), lv.proj_b), seq);
        rec.post_attention.push_back(seq);

        const std::size_t n = seq.value().rows();
        if (const auto step = plan.step_at_layer(l)) {
            MaskEntry entry;
            entry.layer = l;
            entry.keep_rate = step->keep_rate;
            entry.fusion = step->fusion;
            if (n >= 2) {
                Var a = attentiveness_var(tape, maps, plan.score_source);
                AttentivenessVector scores{std::vector<double>(a.value().values().begin(), a.value().values().end()),
                                           plan.score_source};
                Selection sel = select_tokens(scores, step->keep_rate, step->strategy, rng);
                if (opts.frozen_scores) a = stop_gradient(a);

                std::vector<std::size_t> rows{0};
                for (std::size_t i : sel.topk_idx) rows.push_back(i + 1);
                std::vector<Origin> next;
                for (std::size_t r : rows) next.push_back(origins[r]);
                entry.scores = scores.scores;
                entry.topk_idx = sel.topk_idx;
                entry.kept.assign(next.begin() + 1, next.end());
                for (std::size_t i : sel.non_topk_idx) entry.fused.push_back(origins[i + 1]);

                std::vector<Var> parts{gather_rows(seq, rows)};
                if (step->fusion && !sel.non_topk_idx.empty()) {
                    std::vector<std::size_t> inattentive;
                    for (std::size_t i : sel.non_topk_idx) inattentive.push_back(i + 1);
                    parts.push_back(matmul(gather_cols(a, sel.non_topk_idx), gather_rows(seq, inattentive)));
                    next.push_back(Origin::fused(covered_cells(entry.fused)));
                }
                seq = parts.size() == 1 ? parts.front() : concat_rows(parts);
                origins = std::move(next);
                rec.selections.push_back(std::move(sel));
            }
            rec.masks.entries.push_back(std::move(entry));
        }

        const Var xn2 = layernorm(seq, lv.norm2_gamma, lv.norm2_beta);
        const Var hidden = gelu(add_bias(matmul(xn2, lv.fc1_w), lv.fc1_b));
        seq = add(add_bias(matmul(hidden, lv.fc2_w), lv.fc2_b), seq);
    }
    const std::size_t tail = kHeadParams + c.depth * kLayerParams;
    const Var cls = layernorm(slice_rows(seq, 0, 1), rec.params[tail].second, rec.params[tail + 1].second);
    rec.logits = add_bias(matmul(cls, rec.params[tail + 2].second), rec.params[tail + 3].second);
    return rec;
}

Var dot_loss(Var logits, const Matrix& weights) {
    if (weights.rows() != 1 || weights.cols() != logits.value().cols()) throw ShapeError("loss weights shape");
    return matmul(logits, logits.tape->constant(evit::transpose(weights)));
}

Matrix fd_jacobian(const std::function<std::vector<double>(std::span<const double>)>& f, std::span<const double> x,
                   double h) {
    return fd_jacobian(
        [&](std::span<const double> p) { return Probe{f(p), {}}; }, x, h);
}

Matrix fd_jacobian(const std::function<Probe(std::span<const double>)>& f, std::span<const double> x, double h) {
    if (!(h > 0.0)) throw UsageError("finite-difference step must be positive");
    std::vector<double> probe(x.begin(), x.end());
    Matrix jac;
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const Probe plus = f(probe);
        probe[i] = x[i] - h;
        const Probe minus = f(probe);
        probe[i] = x[i];
        if (plus.selection != minus.selection) {
            throw BoundaryError("selection changes across the probe of input " + std::to_string(i));
        }
        if (plus.values.size() != minus.values.size()) throw ShapeError("probed function changed output length");
        if (i == 0) jac = Matrix(plus.values.size(), x.size());
        if (plus.values.size() != jac.rows()) throw ShapeError("probed function changed output length");
        for (std::size_t r = 0; r < jac.rows(); ++r) jac(r, i) = (plus.values[r] - minus.values[r]) / (2.0 * h);
    }
    return jac;
}

Selection brute_force_selection(std::span<const double> scores, double keep_rate) {
    const std::size_t n = scores.size();
    if (!(keep_rate > 0.0 && keep_rate <= 1.0)) throw ConfigError("keep rate must lie in (0, 1]");
    const auto k = std::min(n, static_cast<std::size_t>(std::ceil(keep_rate * static_cast<double>(n))));
    std::vector<std::size_t> by_rank(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t beaten_by = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (scores[j] > scores[i] || (scores[j] == scores[i] && j < i)) ++beaten_by;
        }
        by_rank[beaten_by] = i;
    }
    Selection sel;
    sel.topk_idx.assign(by_rank.begin(), by_rank.begin() + static_cast<std::ptrdiff_t>(k));
    sel.non_topk_idx.assign(by_rank.begin() + static_cast<std::ptrdiff_t>(k), by_rank.end());
    return sel;
}

std::vector<std::string> selection_signature(const MaskTrace& masks) {
    std::vector<std::string> sig;
    for (const auto& e : masks.entries) {
        std::vector<std::string> kept;
        for (const auto& o : e.kept) {
            std::string s = o.is_fused() ? "F" : "P";
            for (const auto& cell : o.cells()) s += std::to_string(cell.row) + "," + std::to_string(cell.col) + ";";
            kept.push_back(std::move(s));
        }
        std::sort(kept.begin(), kept.end());
        std::string joined = std::to_string(e.layer) + ":";
        for (const auto& s : kept) joined += s + "|";
        sig.push_back(std::move(joined));
    }
    return sig;
}

namespace {

double dot(const Matrix& logits, const Matrix& weights) {
    double s = 0.0;
    for (std::size_t i = 0; i < logits.cols(); ++i) s += logits(0, i) * weights(0, i);
    return s;
}

bool on_token_path(const std::string& name) {
    return name != "patch_embed.weight" && name != "patch_embed.bias" && name != "cls_token" && name != "pos_embed";
}

}  // namespace

GradCheckReport gradient_check(const TokenSequence& tokens, const WeightSet& w, const ReorgPlan& plan,
                               const Matrix& loss_weights, const GradCheckOptions& opts) {
    Tape tape;
    const RecordedEncoder rec = record_encoder(tape, tokens, w, plan);
    const Gradients grads = tape.backward(dot_loss(rec.logits, loss_weights));
    const std::vector<std::string> base_sig = selection_signature(rec.masks);

    const ForwardOptions fwd_opts{.keep_head_maps = false};
    TokenSequence probe_tokens = tokens;
    WeightSet probe_weights = w;
    auto evaluate = [&](double& loss) {
        const ForwardResult r = encode(probe_tokens, probe_weights, plan, fwd_opts);
        loss = dot(r.logits, loss_weights);
        return selection_signature(r.masks) == base_sig;
    };

    GradCheckReport report;
    auto check_tensor = [&](const std::string& name, Matrix& target, const Matrix& analytic) {
        TensorCheck tc;
        tc.name = name;
        double diff2 = 0.0, a2 = 0.0, f2 = 0.0;
        auto values = target.values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double orig = values[i];
            double lp = 0.0, lm = 0.0;
            values[i] = orig + opts.h;
            const bool ok_p = evaluate(lp);
            values[i] = orig - opts.h;
            const bool ok_m = evaluate(lm);
            values[i] = orig;
            ++tc.probes;
            if (!ok_p || !ok_m) {
                ++tc.rejected;
                continue;
            }
            const double fd = (lp - lm) / (2.0 * opts.h);
            const double an = analytic.values()[i];
            diff2 += (an - fd) * (an - fd);
            a2 += an * an;
            f2 += fd * fd;
        }
        const double denom = std::sqrt(a2) + std::sqrt(f2);
        tc.rel_error = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
        report.max_rel_error = std::max(report.max_rel_error, tc.rel_error);
        report.probes += tc.probes;
        report.rejected += tc.rejected;
        report.tensors.push_back(std::move(tc));
    };

    check_tensor("input", probe_tokens.tokens, grads[rec.input]);
    if (opts.include_weights) {
        auto slots = probe_weights.tensors();
        for (std::size_t i = 0; i < slots.size(); ++i) {
            if (!on_token_path(slots[i].first)) continue;
            check_tensor(slots[i].first, *slots[i].second, grads[rec.params[i].second]);
        }
    }
    return report;
}

ToyInstance make_toy_instance(const ModelConfig& config, std::size_t n_tokens, std::uint64_t seed) {
    Rng rng(seed);
    ToyInstance inst;
    inst.weights = WeightSet::zeros(config);
    for (auto& [name, m] : inst.weights.tensors()) {
        const bool is_norm = name.find("norm") != std::string::npos;
        const bool is_bias = name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
        const double fan_in = static_cast<double>(std::max<std::size_t>(m->rows(), 1));
        for (double& v : m->values()) {
            if (is_norm && !is_bias) {
                v = 1.0 + 0.1 * rng.normal();
            } else if (is_bias) {
                v = 0.1 * rng.normal();
            } else {
                v = rng.normal() / std::sqrt(fan_in);
            }
        }
    }
    inst.tokens.tokens = Matrix(n_tokens, config.dim);
    for (double& v : inst.tokens.tokens.values()) v = rng.normal();
    inst.tokens.origins.push_back(Origin::cls());
    for (std::size_t i = 1; i < n_tokens; ++i) inst.tokens.origins.push_back(Origin::patch(0, i - 1));
    inst.loss_weights = Matrix(1, config.num_classes);
    for (double& v : inst.loss_weights.values()) v = rng.normal();
    return inst;
}

std::size_t SuiteReport::failures() const {
    return static_cast<std::size_t>(std::count_if(checks.begin(), checks.end(), [](const auto& c) { return !c.passed; }));
}

}  // namespace evit::verify
