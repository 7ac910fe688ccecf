#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "evit/kernels.hpp"
#include "evit/reorg.hpp"
#include "evit/rng.hpp"
#include "evit/tokens.hpp"

namespace evit {

struct ModelConfig {
    std::size_t depth = 12;
    std::size_t dim = 384;
    std::size_t heads = 6;
    double mlp_ratio = 4.0;
    std::size_t patch = 16;
    std::size_t resolution = 224;
    std::size_t num_classes = 1000;

    std::size_t grid() const { return resolution / patch; }
    std::size_t num_patches() const { return grid() * grid(); }
    std::size_t num_tokens() const { return num_patches() + 1; }
    std::size_t head_dim() const { return dim / heads; }
    std::size_t hidden() const;
    std::size_t patch_features() const { return 3 * patch * patch; }

    // Throws ConfigError on any broken invariant.
    void validate() const;
    ModelConfig with_resolution(std::size_t res) const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Named presets: "deit-s", "deit-b", "deit-t", "toy".
std::optional<ModelConfig> model_preset(std::string_view name);
std::vector<std::string> model_preset_names();

// Linear layers store weights as in x out so y = x W + b.
struct LayerWeights {
    Matrix norm1_gamma, norm1_beta;  // 1 x d
    Matrix qkv_w, qkv_b;             // d x 3d, columns [Q | K | V], head h owns cols h*dh..(h+1)*dh of each
    Matrix proj_w, proj_b;           // d x d
    Matrix norm2_gamma, norm2_beta;
    Matrix fc1_w, fc1_b;  // d x hidden
    Matrix fc2_w, fc2_b;  // hidden x d

    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct WeightSet {
    ModelConfig config;
    Matrix patch_w, patch_b;  // (3 p^2) x d; patch pixels flattened (row, col, channel)
    Matrix cls_token;         // 1 x d
    Matrix pos_embed;         // (n_patches + 1) x d, row 0 belongs to CLS
    std::vector<LayerWeights> layers;
    Matrix norm_gamma, norm_beta;
    Matrix head_w, head_b;  // d x classes

    // Every tensor with its canonical name, in a fixed order.
    std::vector<std::pair<std::string, Matrix*>> tensors();
    std::vector<std::pair<std::string, const Matrix*>> tensors() const;
    // Expected (rows, cols) of every named tensor for a config.
    static std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> layout(const ModelConfig& c);
    static WeightSet zeros(const ModelConfig& c);

    // Throws ShapeError if any tensor disagrees with the config.
    void validate() const;

    friend bool operator==(const WeightSet&, const WeightSet&) = default;
};

// Per-layer attention record.
struct LayerAttention {
    std::size_t layer = 0;          // 1-based
    std::vector<Matrix> head_maps;  // H maps of n x n (dropped when ForwardOptions::keep_head_maps is false)
    std::vector<double> cls_row;    // head-averaged CLS row, length n, self-attention at index 0
    std::vector<Origin> origins;    // token origins at this layer's attention input
};

struct AttentionTrace {
    std::vector<LayerAttention> layers;
};

struct ForwardOptions {
    bool keep_head_maps = true;
};

struct ForwardResult {
    Matrix logits;  // 1 x num_classes
    AttentionTrace trace;
    MaskTrace masks;
};

// Image side must equal config.resolution. Tokens are [CLS, patches in row-major order] + pos embed.
TokenSequence patch_embed(const Raster& image, const WeightSet& w);

// x + proj(concat_h softmax(Q_h K_h^T / sqrt(dh)) V_h) with pre-norm. Fills `record` with the maps.
TokenSequence mhsa(const TokenSequence& x, const LayerWeights& lw, std::size_t heads, LayerAttention& record);
// x + fc2(gelu(fc1(norm(x)))).
TokenSequence ffn(const TokenSequence& x, const LayerWeights& lw);

// Encoder + head from already-embedded tokens. Reorganization runs between MHSA and FFN of every
// planned layer. `rng` is required only for the Random strategy.
ForwardResult encode(const TokenSequence& tokens, const WeightSet& w, const ReorgPlan& plan,
                     const ForwardOptions& opts = {}, Rng* rng = nullptr);
ForwardResult forward(const Raster& image, const WeightSet& w, const ReorgPlan& plan,
                      const ForwardOptions& opts = {}, Rng* rng = nullptr);

// Bicubic resample of the positional-embedding grid to a new input resolution. CLS row unchanged.
WeightSet interpolate_pos_embed(const WeightSet& w, std::size_t new_resolution);

// Truncated-normal(0, 0.02) weights, zero biases, unit LayerNorm scales.
WeightSet init_random(const ModelConfig& config, Rng& rng);

}  // namespace evit
