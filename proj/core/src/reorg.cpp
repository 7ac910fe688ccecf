#include "evit/reorg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "evit/error.hpp"

namespace evit {

namespace {

constexpr double kStochasticTol = 1e-9;

void check_maps(std::span<const Matrix> head_maps) {
    if (head_maps.empty()) throw UsageError("attentiveness needs at least one head");
    const std::size_t n = head_maps.front().rows();
    for (const auto& m : head_maps) {
        if (m.rows() != n || m.cols() != n) throw ShapeError("attention maps must all be n x n");
        for (std::size_t r = 0; r < n; ++r) {
            double sum = 0.0;
            for (double v : m.row(r)) {
                if (!(v >= 0.0)) throw NumericError("attention map has a negative or non-finite entry");
                sum += v;
            }
            if (std::abs(sum - 1.0) > kStochasticTol) throw NumericError("attention map row is not stochastic");
        }
    }
}

}  // namespace

std::string_view to_string(SelectionStrategy s) {
    switch (s) {
        case SelectionStrategy::TopK:
            return "topk";
        case SelectionStrategy::Random:
            return "random";
        case SelectionStrategy::MinK:
            return "mink";
    }
    return "?";
}

std::string_view to_string(ScoreSource s) {
    return s == ScoreSource::ClsToTokens ? "cls" : "tokens";
}

SelectionStrategy parse_strategy(std::string_view name) {
    if (name == "topk") return SelectionStrategy::TopK;
    if (name == "random") return SelectionStrategy::Random;
    if (name == "mink") return SelectionStrategy::MinK;
    throw ConfigError("unknown selection strategy '" + std::string(name) + "'");
}

ScoreSource parse_score_source(std::string_view name) {
    if (name == "cls") return ScoreSource::ClsToTokens;
    if (name == "tokens") return ScoreSource::TokensToTokens;
    throw ConfigError("unknown score source '" + std::string(name) + "'");
}

ReorgPlan ReorgPlan::uniform(std::vector<std::size_t> locations, double keep_rate, bool fusion) {
    ReorgPlan plan;
    plan.keep_rates.assign(locations.size(), keep_rate);
    plan.locations = std::move(locations);
    plan.fusion = fusion;
    return plan;
}

void ReorgPlan::validate(std::size_t depth) const {
    if (locations.size() != keep_rates.size()) {
        throw ConfigError("reorg plan needs exactly one keep rate per location");
    }
    for (std::size_t i = 0; i < locations.size(); ++i) {
        if (locations[i] < 1 || locations[i] > depth) {
            throw ConfigError("reorg location " + std::to_string(locations[i]) + " outside [1, " +
                              std::to_string(depth) + "]");
        }
        if (i > 0 && locations[i] <= locations[i - 1]) {
            throw ConfigError("reorg locations must be strictly increasing");
        }
        if (!(keep_rates[i] > 0.0 && keep_rates[i] <= 1.0)) {
            throw ConfigError("keep rate must lie in (0, 1]");
        }
    }
}

std::optional<ReorgStep> ReorgPlan::step_at_layer(std::size_t layer) const {
    for (std::size_t i = 0; i < locations.size(); ++i) {
        if (locations[i] == layer) return ReorgStep{keep_rates[i], strategy, fusion};
    }
    return std::nullopt;
}

ReorgPlan ReorgPlan::at_training_step(std::size_t step) const {
    ReorgPlan out = *this;
    if (!warmup_steps) return out;
    for (double& k : out.keep_rates) k = keep_rate_at(WarmupSchedule{*warmup_steps, k}, step);
    return out;
}

const MaskEntry* MaskTrace::find(std::size_t layer) const {
    for (const auto& e : entries) {
        if (e.layer == layer) return &e;
    }
    return nullptr;
}

AttentivenessVector cls_attentiveness(std::span<const Matrix> head_maps) {
    check_maps(head_maps);
    const std::size_t n = head_maps.front().rows();
    AttentivenessVector out;
    out.source = ScoreSource::ClsToTokens;
    out.scores.assign(n - 1, 0.0);
    for (const auto& m : head_maps) {
        auto cls_row = m.row(0);
        for (std::size_t i = 1; i < n; ++i) out.scores[i - 1] += cls_row[i];
    }
    const double heads = static_cast<double>(head_maps.size());
    for (double& s : out.scores) s /= heads;
    return out;
}

AttentivenessVector tokens_to_tokens_attentiveness(std::span<const Matrix> head_maps) {
    check_maps(head_maps);
    const std::size_t n = head_maps.front().rows();
    AttentivenessVector out;
    out.source = ScoreSource::TokensToTokens;
    out.scores.assign(n - 1, 0.0);
    const double rows = static_cast<double>(n);
    for (const auto& m : head_maps) {
        std::vector<double> colsum(n, 0.0);
        for (std::size_t r = 0; r < n; ++r) {
            auto row = m.row(r);
            for (std::size_t c = 0; c < n; ++c) colsum[c] += row[c];
        }
        for (std::size_t i = 1; i < n; ++i) out.scores[i - 1] += colsum[i] / rows;
    }
    const double heads = static_cast<double>(head_maps.size());
    for (double& s : out.scores) s /= heads;
    return out;
}

AttentivenessVector attentiveness(std::span<const Matrix> head_maps, ScoreSource source) {
    return source == ScoreSource::ClsToTokens ? cls_attentiveness(head_maps)
                                              : tokens_to_tokens_attentiveness(head_maps);
}

std::size_t keep_count(double keep_rate, std::size_t image_tokens) {
    if (!(keep_rate > 0.0 && keep_rate <= 1.0)) throw ConfigError("keep rate must lie in (0, 1]");
    const auto k = static_cast<std::size_t>(std::ceil(keep_rate * static_cast<double>(image_tokens)));
    return std::min(k, image_tokens);
}

Selection select_tokens(const AttentivenessVector& a, double keep_rate, SelectionStrategy strategy, Rng* rng) {
    const std::size_t n = a.size();
    const std::size_t k = keep_count(keep_rate, n);
    Selection sel;
    std::vector<std::size_t> order;
    switch (strategy) {
        case SelectionStrategy::TopK:
            order = argsort_desc(a.scores);
            break;
        case SelectionStrategy::MinK:
            order.resize(n);
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t x, std::size_t y) { return a.scores[x] < a.scores[y]; });
            break;
        case SelectionStrategy::Random: {
            if (rng == nullptr) throw UsageError("random selection needs an Rng");
            order.resize(n);
            std::iota(order.begin(), order.end(), std::size_t{0});
            for (std::size_t i = 0; i < k; ++i) {
                const std::size_t j = i + static_cast<std::size_t>(rng->below(n - i));
                std::swap(order[i], order[j]);
            }
            std::sort(order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
            break;
        }
    }
    sel.topk_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    sel.non_topk_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
    return sel;
}

FusedToken fuse_inattentive(const TokenSequence& x, const AttentivenessVector& a,
                            std::span<const std::size_t> non_topk_idx) {
    if (non_topk_idx.empty()) throw UsageError("fuse_inattentive: empty inattentive set");
    if (a.size() != x.image_tokens()) throw ShapeError("attentiveness length does not match image tokens");
    std::vector<double> weights;
    std::vector<std::size_t> rows;
    std::vector<Origin> parts;
    weights.reserve(non_topk_idx.size());
    rows.reserve(non_topk_idx.size());
    for (std::size_t i : non_topk_idx) {
        if (i >= a.size()) throw UsageError("inattentive index out of range");
        weights.push_back(a.scores[i]);
        rows.push_back(i + 1);
        parts.push_back(x.origins[i + 1]);
    }
    // 1 x |N| times |N| x d, the same product the pseudocode writes as non_topk_attn @ tokens.
    Matrix fused = matmul(Matrix::row_vector(weights), gather_rows(x.tokens, rows));
    return FusedToken{std::move(fused), Origin::fused(covered_cells(parts))};
}

ReorgOutcome reorganize(const TokenSequence& x, const AttentivenessVector& a, const ReorgStep& step, Rng* rng) {
    if (x.size() < 2) throw UsageError("reorganize needs at least one image token");
    if (a.size() != x.image_tokens()) throw ShapeError("attentiveness length does not match image tokens");

    const Selection sel = select_tokens(a, step.keep_rate, step.strategy, rng);

    ReorgOutcome out;
    out.entry.keep_rate = step.keep_rate;
    out.entry.fusion = step.fusion;
    out.entry.scores = a.scores;
    out.entry.topk_idx = sel.topk_idx;

    std::vector<std::size_t> rows;
    rows.reserve(sel.topk_idx.size() + 1);
    rows.push_back(0);
    for (std::size_t i : sel.topk_idx) rows.push_back(i + 1);

    Matrix kept = gather_rows(x.tokens, rows);
    std::vector<Origin> origins;
    origins.reserve(rows.size() + 1);
    for (std::size_t r : rows) origins.push_back(x.origins[r]);
    out.entry.kept.assign(origins.begin() + 1, origins.end());
    for (std::size_t i : sel.non_topk_idx) out.entry.fused.push_back(x.origins[i + 1]);

    if (step.fusion && !sel.non_topk_idx.empty()) {
        FusedToken fused = fuse_inattentive(x, a, sel.non_topk_idx);
        const Matrix parts[] = {std::move(kept), std::move(fused.value)};
        out.tokens.tokens = concat_rows(parts);
        origins.push_back(std::move(fused.origin));
    } else {
        out.tokens.tokens = std::move(kept);
    }
    out.tokens.origins = std::move(origins);
    return out;
}

double keep_rate_at(const WarmupSchedule& schedule, std::size_t step) {
    if (schedule.total_steps == 0 || step >= schedule.total_steps) return schedule.target;
    if (step == 0) return 1.0;
    const double progress = static_cast<double>(step) / static_cast<double>(schedule.total_steps);
    const double k =
        schedule.target + (1.0 - schedule.target) * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
    return std::clamp(k, std::min(schedule.target, 1.0), 1.0);
}

std::vector<std::size_t> plan_locations(std::size_t depth, std::size_t count) {
    if (depth == 0) throw ConfigError("model depth must be at least 1");
    if (depth % (count + 1) != 0) {
        throw ConfigError(std::to_string(count + 1) + " does not divide depth " + std::to_string(depth) +
                          "; give explicit locations");
    }
    const std::size_t s = depth / (count + 1);
    std::vector<std::size_t> out;
    for (std::size_t i = 1; i <= count; ++i) out.push_back(i * s + 1);
    return out;
}

TokenSequence ablate_input_tokens(const TokenSequence& x, std::span<const std::size_t> drop) {
    std::set<std::size_t> dropped;
    for (std::size_t i : drop) {
        if (i == 0) throw UsageError("cannot drop the class token");
        if (i >= x.size()) throw UsageError("drop index " + std::to_string(i) + " out of range");
        dropped.insert(i);
    }
    std::vector<std::size_t> rows;
    TokenSequence out;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (dropped.count(i)) continue;
        rows.push_back(i);
        out.origins.push_back(x.origins[i]);
    }
    out.tokens = gather_rows(x.tokens, rows);
    return out;
}

}  // namespace evit
