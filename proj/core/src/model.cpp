#include "evit/model.hpp"

#include <cmath>
#include <string>

#include "evit/error.hpp"

namespace evit {

std::size_t ModelConfig::hidden() const {
    return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(dim)));
}

void ModelConfig::validate() const {
    if (depth < 1) throw ConfigError("depth must be at least 1");
    if (dim == 0 || heads == 0) throw ConfigError("dim and heads must be positive");
    if (dim % heads != 0) throw ConfigError("dim " + std::to_string(dim) + " not divisible by heads");
    if (patch == 0 || resolution == 0) throw ConfigError("patch and resolution must be positive");
    if (resolution % patch != 0) {
        throw ConfigError("resolution " + std::to_string(resolution) + " not divisible by patch " +
                          std::to_string(patch));
    }
    if (!(mlp_ratio > 0.0) || hidden() == 0) throw ConfigError("mlp_ratio must be positive");
    if (num_classes == 0) throw ConfigError("num_classes must be positive");
}

ModelConfig ModelConfig::with_resolution(std::size_t res) const {
    ModelConfig c = *this;
    c.resolution = res;
    c.validate();
    return c;
}

std::optional<ModelConfig> model_preset(std::string_view name) {
    if (name == "deit-s") return ModelConfig{12, 384, 6, 4.0, 16, 224, 1000};
    if (name == "deit-b") return ModelConfig{12, 768, 12, 4.0, 16, 224, 1000};
    if (name == "deit-t") return ModelConfig{12, 192, 3, 4.0, 16, 224, 1000};
    if (name == "toy") return ModelConfig{4, 32, 4, 4.0, 8, 32, 10};
    return std::nullopt;
}

std::vector<std::string> model_preset_names() { return {"deit-s", "deit-b", "deit-t", "toy"}; }

namespace {

template <typename Self, typename Ptr>
std::vector<std::pair<std::string, Ptr>> collect(Self& w) {
    std::vector<std::pair<std::string, Ptr>> out;
    out.emplace_back("patch_embed.weight", &w.patch_w);
    out.emplace_back("patch_embed.bias", &w.patch_b);
    out.emplace_back("cls_token", &w.cls_token);
    out.emplace_back("pos_embed", &w.pos_embed);
    for (std::size_t i = 0; i < w.layers.size(); ++i) {
        auto& l = w.layers[i];
        const std::string p = "blocks." + std::to_string(i) + ".";
        out.emplace_back(p + "norm1.weight", &l.norm1_gamma);
        out.emplace_back(p + "norm1.bias", &l.norm1_beta);
        out.emplace_back(p + "attn.qkv.weight", &l.qkv_w);
        out.emplace_back(p + "attn.qkv.bias", &l.qkv_b);
        out.emplace_back(p + "attn.proj.weight", &l.proj_w);
        out.emplace_back(p + "attn.proj.bias", &l.proj_b);
        out.emplace_back(p + "norm2.weight", &l.norm2_gamma);
        out.emplace_back(p + "norm2.bias", &l.norm2_beta);
        out.emplace_back(p + "mlp.fc1.weight", &l.fc1_w);
        out.emplace_back(p + "mlp.fc1.bias", &l.fc1_b);
        out.emplace_back(p + "mlp.fc2.weight", &l.fc2_w);
        out.emplace_back(p + "mlp.fc2.bias", &l.fc2_b);
    }
    out.emplace_back("norm.weight", &w.norm_gamma);
    out.emplace_back("norm.bias", &w.norm_beta);
    out.emplace_back("head.weight", &w.head_w);
    out.emplace_back("head.bias", &w.head_b);
    return out;
}

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

void check_dims(const Matrix& m, std::size_t rows, std::size_t cols, const char* what) {
    if (m.rows() != rows || m.cols() != cols) {
        throw ShapeError(std::string(what) + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                         ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    }
}

}  // namespace

std::vector<std::pair<std::string, Matrix*>> WeightSet::tensors() { return collect<WeightSet, Matrix*>(*this); }

std::vector<std::pair<std::string, const Matrix*>> WeightSet::tensors() const {
    return collect<const WeightSet, const Matrix*>(*this);
}

std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> WeightSet::layout(const ModelConfig& c) {
    const std::size_t d = c.dim;
    const std::size_t h = c.hidden();
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> out;
    out.push_back({"patch_embed.weight", {c.patch_features(), d}});
    out.push_back({"patch_embed.bias", {1, d}});
    out.push_back({"cls_token", {1, d}});
    out.push_back({"pos_embed", {c.num_tokens(), d}});
    for (std::size_t i = 0; i < c.depth; ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        out.push_back({p + "norm1.weight", {1, d}});
        out.push_back({p + "norm1.bias", {1, d}});
        out.push_back({p + "attn.qkv.weight", {d, 3 * d}});
        out.push_back({p + "attn.qkv.bias", {1, 3 * d}});
        out.push_back({p + "attn.proj.weight", {d, d}});
        out.push_back({p + "attn.proj.bias", {1, d}});
        out.push_back({p + "norm2.weight", {1, d}});
        out.push_back({p + "norm2.bias", {1, d}});
        out.push_back({p + "mlp.fc1.weight", {d, h}});
        out.push_back({p + "mlp.fc1.bias", {1, h}});
        out.push_back({p + "mlp.fc2.weight", {h, d}});
        out.push_back({p + "mlp.fc2.bias", {1, d}});
    }
    out.push_back({"norm.weight", {1, d}});
    out.push_back({"norm.bias", {1, d}});
    out.push_back({"head.weight", {d, c.num_classes}});
    out.push_back({"head.bias", {1, c.num_classes}});
    return out;
}

WeightSet WeightSet::zeros(const ModelConfig& c) {
    c.validate();
    WeightSet w;
    w.config = c;
    w.layers.resize(c.depth);
    const auto shapes = layout(c);
    auto slots = w.tensors();
    for (std::size_t i = 0; i < slots.size(); ++i) {
        *slots[i].second = Matrix(shapes[i].second.first, shapes[i].second.second);
    }
    return w;
}

void WeightSet::validate() const {
    config.validate();
    if (layers.size() != config.depth) throw ShapeError("weight set layer count does not match depth");
    const auto shapes = layout(config);
    const auto slots = tensors();
    for (std::size_t i = 0; i < slots.size(); ++i) {
        check_dims(*slots[i].second, shapes[i].second.first, shapes[i].second.second, slots[i].first.c_str());
    }
}

TokenSequence patch_embed(const Raster& image, const WeightSet& w) {
    const ModelConfig& c = w.config;
    if (image.height != c.resolution || image.width != c.resolution || image.channels != 3) {
        throw ShapeError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) + "x" +
                         std::to_string(image.channels) + ", model expects " + std::to_string(c.resolution) +
                         "x" + std::to_string(c.resolution) + "x3");
    }
    const std::size_t g = c.grid();
    const std::size_t p = c.patch;
    Matrix patches(c.num_patches(), c.patch_features());
    TokenSequence seq;
    seq.origins.reserve(c.num_tokens());
    seq.origins.push_back(Origin::cls());
    for (std::size_t gr = 0; gr < g; ++gr) {
        for (std::size_t gc = 0; gc < g; ++gc) {
            auto dst = patches.row(gr * g + gc);
            std::size_t k = 0;
            for (std::size_t y = 0; y < p; ++y)
                for (std::size_t x = 0; x < p; ++x)
                    for (std::size_t ch = 0; ch < 3; ++ch) dst[k++] = image.at(gr * p + y, gc * p + x, ch);
            seq.origins.push_back(Origin::patch(gr, gc));
        }
    }
    Matrix projected = matmul(patches, w.patch_w);
    add_row_broadcast(projected, w.patch_b.values());
    const Matrix parts[] = {w.cls_token, std::move(projected)};
    seq.tokens = concat_rows(parts);
    add_inplace(seq.tokens, w.pos_embed);
    return seq;
}

TokenSequence mhsa(const TokenSequence& x, const LayerWeights& lw, std::size_t heads, LayerAttention& record) {
    const std::size_t d = x.dim();
    if (lw.qkv_w.rows() != d || d % heads != 0) throw ShapeError("mhsa: token width does not match weights");
    const std::size_t dh = d / heads;
    const double scale = std::sqrt(static_cast<double>(dh));

    const Matrix xn = layernorm(x.tokens, lw.norm1_gamma.values(), lw.norm1_beta.values());
    Matrix qkv = matmul(xn, lw.qkv_w);
    add_row_broadcast(qkv, lw.qkv_b.values());

    std::vector<Matrix> head_out;
    head_out.reserve(heads);
    record.head_maps.clear();
    record.cls_row.assign(x.size(), 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        const Matrix q = slice_cols(qkv, h * dh, (h + 1) * dh);
        const Matrix k = slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
        const Matrix v = slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
        Matrix scores = matmul(q, transpose(k));
        for (double& s : scores.values()) s /= scale;
        Matrix attn = softmax_rows(scores);
        head_out.push_back(matmul(attn, v));
        for (std::size_t i = 0; i < x.size(); ++i) record.cls_row[i] += attn(0, i);
        record.head_maps.push_back(std::move(attn));
    }
    for (double& v : record.cls_row) v /= static_cast<double>(heads);
    record.origins = x.origins;

    Matrix out = matmul(concat_cols(head_out), lw.proj_w);
    add_row_broadcast(out, lw.proj_b.values());
    add_inplace(out, x.tokens);
    return TokenSequence{std::move(out), x.origins};
}

TokenSequence ffn(const TokenSequence& x, const LayerWeights& lw) {
    if (lw.fc1_w.rows() != x.dim()) throw ShapeError("ffn: token width does not match weights");
    const Matrix xn = layernorm(x.tokens, lw.norm2_gamma.values(), lw.norm2_beta.values());
    Matrix hidden = matmul(xn, lw.fc1_w);
    add_row_broadcast(hidden, lw.fc1_b.values());
    Matrix out = matmul(gelu(hidden), lw.fc2_w);
    add_row_broadcast(out, lw.fc2_b.values());
    add_inplace(out, x.tokens);
    return TokenSequence{std::move(out), x.origins};
}

ForwardResult encode(const TokenSequence& tokens, const WeightSet& w, const ReorgPlan& plan,
                     const ForwardOptions& opts, Rng* rng) {
    const ModelConfig& c = w.config;
    c.validate();
    plan.validate(c.depth);
    tokens.validate();
    if (tokens.dim() != c.dim) throw ShapeError("token width does not match model dim");

    ForwardResult result;
    TokenSequence seq = tokens;
    for (std::size_t l = 1; l <= c.depth; ++l) {
        const LayerWeights& lw = w.layers[l - 1];
        LayerAttention rec;
        rec.layer = l;
        seq = mhsa(seq, lw, c.heads, rec);
        if (const auto step = plan.step_at_layer(l)) {
            if (seq.size() >= 2) {
                const AttentivenessVector a = attentiveness(rec.head_maps, plan.score_source);
                ReorgOutcome outcome = reorganize(seq, a, *step, rng);
                outcome.entry.layer = l;
                result.masks.entries.push_back(std::move(outcome.entry));
                seq = std::move(outcome.tokens);
            } else {
                MaskEntry empty;
                empty.layer = l;
                empty.keep_rate = step->keep_rate;
                empty.fusion = step->fusion;
                result.masks.entries.push_back(std::move(empty));
            }
        }
        if (!opts.keep_head_maps) rec.head_maps.clear();
        result.trace.layers.push_back(std::move(rec));
        seq = ffn(seq, lw);
    }
    const Matrix cls = layernorm(slice_rows(seq.tokens, 0, 1), w.norm_gamma.values(), w.norm_beta.values());
    result.logits = matmul(cls, w.head_w);
    add_row_broadcast(result.logits, w.head_b.values());
    return result;
}

ForwardResult forward(const Raster& image, const WeightSet& w, const ReorgPlan& plan, const ForwardOptions& opts,
                      Rng* rng) {
    plan.validate(w.config.depth);
    return encode(patch_embed(image, w), w, plan, opts, rng);
}

WeightSet interpolate_pos_embed(const WeightSet& w, std::size_t new_resolution) {
    const ModelConfig& c = w.config;
    if (new_resolution == 0 || new_resolution % c.patch != 0) {
        throw ConfigError("resolution " + std::to_string(new_resolution) + " not divisible by patch " +
                          std::to_string(c.patch));
    }
    WeightSet out = w;
    out.config.resolution = new_resolution;
    if (new_resolution == c.resolution) return out;

    const std::size_t g = c.grid();
    const std::size_t g2 = new_resolution / c.patch;
    const std::size_t d = c.dim;
    Raster grid(g, g, d);
    for (std::size_t i = 0; i < g * g; ++i) {
        auto src = w.pos_embed.row(i + 1);
        std::copy(src.begin(), src.end(), grid.data.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    const Raster resized = bicubic_resize(grid, g2, g2);
    out.pos_embed = Matrix(g2 * g2 + 1, d);
    std::copy(w.pos_embed.row(0).begin(), w.pos_embed.row(0).end(), out.pos_embed.row(0).begin());
    for (std::size_t i = 0; i < g2 * g2; ++i) {
        std::copy(resized.data.begin() + static_cast<std::ptrdiff_t>(i * d),
                  resized.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d), out.pos_embed.row(i + 1).begin());
    }
    return out;
}

WeightSet init_random(const ModelConfig& config, Rng& rng) {
    WeightSet w = WeightSet::zeros(config);
    for (auto& [name, m] : w.tensors()) {
        if (ends_with(name, ".bias")) continue;
        if (name.find("norm") != std::string::npos) {
            for (double& v : m->values()) v = 1.0;
            continue;
        }
        for (double& v : m->values()) v = rng.truncated_normal(0.0, 0.02);
    }
    return w;
}

}  // namespace evit
