#pragma once

// Attentive-token identification and inattentive-token fusion.
//
// At a reorganization layer the head-averaged attention from the class token to every image token
// ranks the image tokens. The K = ceil(keep_rate * (N - 1)) highest-ranked ones are kept in rank
// order; the rest are either dropped or collapsed into one token equal to their score-weighted sum.
// The new sequence is [CLS, kept..., fused?] and continues into the layer's FFN.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "evit/kernels.hpp"
#include "evit/rng.hpp"
#include "evit/tokens.hpp"

namespace evit {

enum class ScoreSource { ClsToTokens, TokensToTokens };
enum class SelectionStrategy { TopK, Random, MinK };

std::string_view to_string(SelectionStrategy s);
std::string_view to_string(ScoreSource s);
SelectionStrategy parse_strategy(std::string_view name);
ScoreSource parse_score_source(std::string_view name);

// One score per image token (the class token's own entry is never part of it).
struct AttentivenessVector {
    std::vector<double> scores;
    ScoreSource source = ScoreSource::ClsToTokens;

    std::size_t size() const { return scores.size(); }
};

struct WarmupSchedule {
    std::size_t total_steps = 0;
    double target = 1.0;
};

// How one reorganization layer behaves.
struct ReorgStep {
    double keep_rate = 1.0;
    SelectionStrategy strategy = SelectionStrategy::TopK;
    bool fusion = true;
};

struct ReorgPlan {
    std::vector<std::size_t> locations;  // 1-based layer indices, strictly increasing
    std::vector<double> keep_rates;      // one per location, each in (0, 1]
    SelectionStrategy strategy = SelectionStrategy::TopK;
    bool fusion = true;
    ScoreSource score_source = ScoreSource::ClsToTokens;
    std::optional<std::size_t> warmup_steps;

    // Same keep rate at every location.
    static ReorgPlan uniform(std::vector<std::size_t> locations, double keep_rate, bool fusion = true);

    bool empty() const { return locations.empty(); }
    // Throws ConfigError unless the plan fits a model with `depth` layers.
    void validate(std::size_t depth) const;
    std::optional<ReorgStep> step_at_layer(std::size_t layer) const;
    // Keep rates replaced by their warmup value at a training step (identity without warmup).
    ReorgPlan at_training_step(std::size_t step) const;
};

struct Selection {
    std::vector<std::size_t> topk_idx;      // kept image-token indices, emission order
    std::vector<std::size_t> non_topk_idx;  // remaining indices
};

// Record of one reorganization decision.
struct MaskEntry {
    std::size_t layer = 0;
    double keep_rate = 1.0;
    bool fusion = true;
    std::vector<double> scores;  // attentiveness at decision time, pre-reorg image-token order
    std::vector<std::size_t> topk_idx;
    std::vector<Origin> kept;   // origins of kept tokens, in output order
    std::vector<Origin> fused;  // origins of inattentive tokens (fused or removed)
};

struct MaskTrace {
    std::vector<MaskEntry> entries;

    const MaskEntry* find(std::size_t layer) const;
};

// ā_i = mean over heads of A_h[0, i + 1]. Each map must be square and row-stochastic.
AttentivenessVector cls_attentiveness(std::span<const Matrix> head_maps);
// Column means of each map, averaged over heads, class-token column dropped.
AttentivenessVector tokens_to_tokens_attentiveness(std::span<const Matrix> head_maps);
AttentivenessVector attentiveness(std::span<const Matrix> head_maps, ScoreSource source);

// ceil(keep_rate * image_tokens); throws ConfigError unless 0 < keep_rate <= 1.
std::size_t keep_count(double keep_rate, std::size_t image_tokens);

// Partition the image tokens into kept / not kept. Random needs an rng.
Selection select_tokens(const AttentivenessVector& a, double keep_rate, SelectionStrategy strategy,
                        Rng* rng = nullptr);

struct FusedToken {
    Matrix value;  // 1 x d
    Origin origin;
};

// Σ a_i · x_{i+1} over the inattentive indices; the raw scores are the weights (no renormalization).
FusedToken fuse_inattentive(const TokenSequence& x, const AttentivenessVector& a,
                            std::span<const std::size_t> non_topk_idx);

struct ReorgOutcome {
    TokenSequence tokens;
    MaskEntry entry;  // layer left at 0; the caller stamps it
};

// [CLS, kept tokens in selection order, fused token]. No fused token when fusion is off or the
// inattentive set is empty, so keep_rate = 1 returns the input tokens (reordered by rank).
ReorgOutcome reorganize(const TokenSequence& x, const AttentivenessVector& a, const ReorgStep& step,
                        Rng* rng = nullptr);

// Cosine warmup from 1 at step 0 to schedule.target at total_steps; constant afterwards.
double keep_rate_at(const WarmupSchedule& schedule, std::size_t step);

// Evenly spaced reorganization layers: s = L / (t + 1), layers s+1, 2s+1, ..., ts+1.
std::vector<std::size_t> plan_locations(std::size_t depth, std::size_t count);

// Delete image tokens (sequence indices, CLS excluded) before the encoder runs.
TokenSequence ablate_input_tokens(const TokenSequence& x, std::span<const std::size_t> drop);

}  // namespace evit
