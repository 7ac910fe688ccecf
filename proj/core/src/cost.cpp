#include "evit/cost.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "evit/error.hpp"

namespace evit {

std::uint64_t CostReport::sum_of_parts() const {
    std::uint64_t s = patch_embed_macs + head_macs;
    for (const auto& l : per_layer) s += l.total();
    return s;
}

LayerMacs layer_macs(std::uint64_t n, std::uint64_t d, std::uint64_t heads, double mlp_ratio) {
    if (n == 0 || d == 0 || heads == 0) throw ConfigError("layer_macs: n, d and heads must be positive");
    const auto hidden = static_cast<std::uint64_t>(std::llround(mlp_ratio * static_cast<double>(d)));
    LayerMacs m;
    m.qkv = 3 * n * d * d;
    m.attn_scores = n * n * d;
    m.attn_apply = n * n * d;
    m.attn_proj = n * d * d;
    m.ffn = 2 * n * d * hidden;
    return m;
}

std::size_t tokens_after_reorg(std::size_t tokens, double keep_rate, bool fusion) {
    if (tokens < 2) return tokens;
    const std::size_t image = tokens - 1;
    const std::size_t k = keep_count(keep_rate, image);
    return 1 + k + ((fusion && k < image) ? 1 : 0);
}

CostReport model_macs(const ModelConfig& config, const ReorgPlan& plan) {
    config.validate();
    plan.validate(config.depth);
    const std::uint64_t d = config.dim;

    CostReport r;
    r.patch_embed_macs = static_cast<std::uint64_t>(config.num_patches()) * config.patch_features() * d;
    r.head_macs = d * config.num_classes;

    std::size_t n = config.num_tokens();
    for (std::size_t l = 1; l <= config.depth; ++l) {
        LayerMacs attn = layer_macs(n, d, config.heads, config.mlp_ratio);
        StageTokens stage{l, n, n};
        if (const auto step = plan.step_at_layer(l); step && n >= 2) {
            const std::size_t image = n - 1;
            const std::size_t k = keep_count(step->keep_rate, image);
            if (step->fusion && k < image) attn.fusion = static_cast<std::uint64_t>(image - k) * d;
            n = tokens_after_reorg(n, step->keep_rate, step->fusion);
            stage.ffn_tokens = n;
        }
        attn.ffn = layer_macs(n, d, config.heads, config.mlp_ratio).ffn;
        r.per_layer.push_back(attn);
        r.token_counts.push_back(stage);
    }
    r.total_macs = r.sum_of_parts();
    return r;
}

std::vector<SweepRow> sweep(const std::string& name, const ModelConfig& config, std::span<const double> keep_rates,
                            std::span<const std::size_t> resolutions, const std::vector<std::size_t>& locations,
                            bool fusion, std::size_t threads) {
    std::vector<SweepRow> rows;
    for (std::size_t res : resolutions) {
        for (double k : keep_rates) {
            SweepRow row;
            row.config = name;
            row.resolution = res;
            row.keep_rate = k;
            row.locations = locations;
            rows.push_back(std::move(row));
        }
    }
    // Validate up front so worker threads never throw.
    for (std::size_t res : resolutions) config.with_resolution(res);
    for (double k : keep_rates) ReorgPlan::uniform(locations, k, fusion).validate(config.depth);

    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < rows.size(); i += stride) {
            SweepRow& row = rows[i];
            const ModelConfig c = config.with_resolution(row.resolution);
            row.report = model_macs(c, ReorgPlan::uniform(row.locations, row.keep_rate, fusion));
            const CostReport base = model_macs(c, ReorgPlan{});
            row.reduction_pct = 100.0 * (1.0 - static_cast<double>(row.report.total_macs) /
                                                   static_cast<double>(base.total_macs));
        }
    };
    threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(rows.size(), 1));
    if (threads == 1) {
        work(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    }
    return rows;
}

}  // namespace evit
