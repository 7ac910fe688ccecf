#pragma once

// Analytic multiply-accumulate counts for a (reorganized) ViT forward pass. Only matrix products
// are counted; softmax, normalization, activations, residual adds and bias adds are free.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evit/model.hpp"
#include "evit/reorg.hpp"

namespace evit {

struct LayerMacs {
    std::uint64_t qkv = 0;          // 3 n d^2
    std::uint64_t attn_scores = 0;  // n^2 d
    std::uint64_t attn_apply = 0;   // n^2 d
    std::uint64_t attn_proj = 0;    // n d^2
    std::uint64_t ffn = 0;          // 2 n d hidden
    std::uint64_t fusion = 0;       // |inattentive| d at reorganization layers

    std::uint64_t total() const { return qkv + attn_scores + attn_apply + attn_proj + ffn + fusion; }
};

struct StageTokens {
    std::size_t layer = 0;
    std::size_t attention_tokens = 0;
    std::size_t ffn_tokens = 0;
};

struct CostReport {
    std::uint64_t total_macs = 0;
    std::uint64_t patch_embed_macs = 0;
    std::uint64_t head_macs = 0;
    std::vector<LayerMacs> per_layer;
    std::vector<StageTokens> token_counts;

    std::uint64_t sum_of_parts() const;
    double gmacs() const { return static_cast<double>(total_macs) * 1e-9; }
};

LayerMacs layer_macs(std::uint64_t n, std::uint64_t d, std::uint64_t heads, double mlp_ratio);

// Token count leaving a reorganization layer that received `tokens` (CLS included).
std::size_t tokens_after_reorg(std::size_t tokens, double keep_rate, bool fusion);

CostReport model_macs(const ModelConfig& config, const ReorgPlan& plan);

struct SweepRow {
    std::string config;
    std::size_t resolution = 0;
    double keep_rate = 1.0;
    std::vector<std::size_t> locations;
    CostReport report;
    double reduction_pct = 0.0;  // vs keep rate 1 at the same resolution
};

// Cross product of keep rates and resolutions. Rows ordered resolution-major. `threads` > 1
// evaluates rows concurrently; the result does not depend on it.
std::vector<SweepRow> sweep(const std::string& name, const ModelConfig& config, std::span<const double> keep_rates,
                            std::span<const std::size_t> resolutions, const std::vector<std::size_t>& locations,
                            bool fusion = true, std::size_t threads = 1);

}  // namespace evit
