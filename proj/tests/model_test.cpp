#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "evit/error.hpp"
#include "evit/model.hpp"
#include "evit/verify.hpp"
#include "test_util.hpp"

using namespace evit;
using evit::testing::random_matrix;
using evit::testing::random_raster;

namespace {

TokenSequence sequence_of(Matrix tokens) {
    TokenSequence s;
    s.origins.push_back(Origin::cls());
    for (std::size_t i = 1; i < tokens.rows(); ++i) s.origins.push_back(Origin::patch(0, i - 1));
    s.tokens = std::move(tokens);
    return s;
}

double rel_diff(const Matrix& a, const Matrix& b) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::abs(a.values()[i] - b.values()[i]));
        den = std::max(den, std::abs(a.values()[i]));
    }
    return den == 0 ? num : num / den;
}

ModelConfig small_config() { return ModelConfig{4, 16, 2, 2.0, 4, 16, 7}; }

LayerWeights zero_layer(std::size_t d, std::size_t hidden) {
    LayerWeights lw;
    lw.norm1_gamma = Matrix(1, d, 1.0);
    lw.norm1_beta = Matrix(1, d);
    lw.qkv_w = Matrix(d, 3 * d);
    lw.qkv_b = Matrix(1, 3 * d);
    lw.proj_w = Matrix(d, d);
    lw.proj_b = Matrix(1, d);
    lw.norm2_gamma = Matrix(1, d, 1.0);
    lw.norm2_beta = Matrix(1, d);
    lw.fc1_w = Matrix(d, hidden);
    lw.fc1_b = Matrix(1, hidden);
    lw.fc2_w = Matrix(hidden, d);
    lw.fc2_b = Matrix(1, d);
    return lw;
}

std::vector<double> normalize_row(std::span<const double> x, std::span<const double> g, std::span<const double> b) {
    double mean = 0;
    for (double v : x) mean += v;
    mean /= x.size();
    double var = 0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= x.size();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / std::sqrt(var + 1e-6) * g[i] + b[i];
    return out;
}

}  // namespace

TEST(Config, PresetsAndInvariants) {
    const auto s = *model_preset("deit-s");
    EXPECT_EQ(s.num_tokens(), 197u);
    EXPECT_EQ(s.head_dim(), 64u);
    EXPECT_EQ(s.hidden(), 1536u);
    EXPECT_EQ(model_preset("deit-b")->dim, 768u);
    EXPECT_FALSE(model_preset("resnet").has_value());
    ModelConfig bad = s;
    bad.heads = 5;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = s;
    bad.resolution = 225;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = s;
    bad.depth = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(PatchEmbed, TokenCountAt224) {
    ModelConfig c{1, 8, 2, 1.0, 16, 224, 3};
    const WeightSet w = WeightSet::zeros(c);
    EXPECT_EQ(patch_embed(Raster(224, 224), w).size(), 197u);
}

TEST(PatchEmbed, ZeroEverythingLeavesOnlyClsWeight) {
    ModelConfig c{1, 4, 2, 1.0, 8, 16, 3};
    WeightSet w = WeightSet::zeros(c);
    w.cls_token = Matrix::from_rows({{0.5, -1.0, 2.0, 0.25}});
    const TokenSequence t = patch_embed(Raster(16, 16), w);
    ASSERT_EQ(t.size(), 5u);
    EXPECT_EQ(slice_rows(t.tokens, 0, 1), w.cls_token);
    for (std::size_t r = 1; r < 5; ++r)
        for (double v : t.tokens.row(r)) EXPECT_EQ(v, 0.0);
    EXPECT_TRUE(t.origins[0].is_cls());
    EXPECT_EQ(t.origins[2], Origin::patch(0, 1));
    EXPECT_EQ(t.origins[3], Origin::patch(1, 0));
}

TEST(PatchEmbed, MatchesPerPatchProjectionOracle) {
    ModelConfig c{1, 6, 2, 1.0, 16, 32, 3};
    Rng rng(21);
    WeightSet w = init_random(c, rng);
    w.patch_b = random_matrix(rng, 1, 6);
    w.pos_embed = random_matrix(rng, 5, 6);
    const Raster img = random_raster(rng, 32, 32);
    const TokenSequence t = patch_embed(img, w);
    ASSERT_EQ(t.size(), 5u);
    for (std::size_t pr = 0; pr < 2; ++pr)
        for (std::size_t pc = 0; pc < 2; ++pc) {
            Matrix flat(1, c.patch_features());
            std::size_t k = 0;
            for (std::size_t y = 0; y < 16; ++y)
                for (std::size_t x = 0; x < 16; ++x)
                    for (std::size_t ch = 0; ch < 3; ++ch) flat(0, k++) = img.at(pr * 16 + y, pc * 16 + x, ch);
            const Matrix proj = matmul(flat, w.patch_w);
            const std::size_t tok = 1 + pr * 2 + pc;
            for (std::size_t j = 0; j < 6; ++j) {
                EXPECT_NEAR(t.tokens(tok, j), proj(0, j) + w.patch_b(0, j) + w.pos_embed(tok, j), 1e-12);
            }
        }
}

TEST(PatchEmbed, ResolutionMismatchThrows) {
    const WeightSet w = WeightSet::zeros(ModelConfig{1, 4, 2, 1.0, 8, 16, 3});
    EXPECT_THROW(patch_embed(Raster(24, 24), w), ShapeError);
}

TEST(Mhsa, ZeroProjectionIsResidualIdentity) {
    Rng rng(22);
    const TokenSequence x = sequence_of(random_matrix(rng, 4, 6));
    LayerAttention rec;
    EXPECT_EQ(mhsa(x, zero_layer(6, 6), 1, rec).tokens, x.tokens);
}

TEST(Mhsa, TwoTokenTwoDimMatchesDirectFormula) {
    const Matrix x = Matrix::from_rows({{0.3, -1.2}, {2.0, 0.7}});
    LayerWeights lw = zero_layer(2, 2);
    lw.norm1_gamma = Matrix::from_rows({{1.1, 0.9}});
    lw.norm1_beta = Matrix::from_rows({{0.05, -0.1}});
    lw.qkv_w = Matrix::from_rows({{0.4, -0.3, 0.8, 0.1, -0.6, 0.2}, {0.5, 0.9, -0.2, 0.7, 0.3, -0.4}});
    lw.qkv_b = Matrix::from_rows({{0.01, 0.02, -0.03, 0.04, 0.05, -0.06}});
    lw.proj_w = Matrix::from_rows({{0.6, -0.5}, {0.25, 0.75}});
    lw.proj_b = Matrix::from_rows({{0.1, -0.2}});

    LayerAttention rec;
    const TokenSequence out = mhsa(sequence_of(x), lw, 1, rec);

    // Scalar evaluation of x + (softmax(q k^T / sqrt(2)) v) W_o + b_o after pre-norm.
    double q[2][2], k[2][2], v[2][2];
    for (int i = 0; i < 2; ++i) {
        const auto y = normalize_row(x.row(i), lw.norm1_gamma.values(), lw.norm1_beta.values());
        for (int j = 0; j < 2; ++j) {
            q[i][j] = y[0] * lw.qkv_w(0, j) + y[1] * lw.qkv_w(1, j) + lw.qkv_b(0, j);
            k[i][j] = y[0] * lw.qkv_w(0, 2 + j) + y[1] * lw.qkv_w(1, 2 + j) + lw.qkv_b(0, 2 + j);
            v[i][j] = y[0] * lw.qkv_w(0, 4 + j) + y[1] * lw.qkv_w(1, 4 + j) + lw.qkv_b(0, 4 + j);
        }
    }
    for (int i = 0; i < 2; ++i) {
        double s[2];
        for (int j = 0; j < 2; ++j) s[j] = (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / std::sqrt(2.0);
        const double e0 = std::exp(s[0]), e1 = std::exp(s[1]);
        const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
        EXPECT_NEAR(rec.head_maps[0](i, 0), a0, 1e-12);
        const double o[2] = {a0 * v[0][0] + a1 * v[1][0], a0 * v[0][1] + a1 * v[1][1]};
        for (int j = 0; j < 2; ++j) {
            const double expect = x(i, j) + o[0] * lw.proj_w(0, j) + o[1] * lw.proj_w(1, j) + lw.proj_b(0, j);
            EXPECT_NEAR(out.tokens(i, j), expect, 1e-12);
        }
    }
}

TEST(Mhsa, RecordedClsRowIsStochastic) {
    const ModelConfig c = small_config();
    const auto inst = verify::make_toy_instance(c, 9, 23);
    LayerAttention rec;
    mhsa(inst.tokens, inst.weights.layers[0], c.heads, rec);
    ASSERT_EQ(rec.head_maps.size(), c.heads);
    ASSERT_EQ(rec.cls_row.size(), 9u);
    double self = 0;
    for (const auto& m : rec.head_maps) self += m(0, 0) / c.heads;
    double rest = 0;
    for (std::size_t i = 1; i < 9; ++i) {
        EXPECT_GE(rec.cls_row[i], 0.0);
        rest += rec.cls_row[i];
    }
    EXPECT_NEAR(rest, 1.0 - self, 1e-12);
    for (const auto& m : rec.head_maps)
        for (std::size_t r = 0; r < m.rows(); ++r) {
            EXPECT_NEAR(std::accumulate(m.row(r).begin(), m.row(r).end(), 0.0), 1.0, 1e-9);
        }
}

TEST(Ffn, ZeroWeightsAreIdentity) {
    Rng rng(24);
    const TokenSequence x = sequence_of(random_matrix(rng, 3, 5));
    const TokenSequence y = ffn(x, zero_layer(5, 10));
    EXPECT_EQ(y.tokens, x.tokens);
    EXPECT_EQ(y.size(), x.size());
}

TEST(Ffn, OneTokenHandEvaluation) {
    LayerWeights lw = zero_layer(2, 2);
    lw.norm2_gamma = Matrix::from_rows({{2.0, 0.5}});
    lw.norm2_beta = Matrix::from_rows({{0.1, 0.0}});
    lw.fc1_w = Matrix::from_rows({{1.0, -0.5}, {0.25, 2.0}});
    lw.fc1_b = Matrix::from_rows({{0.0, 0.3}});
    lw.fc2_w = Matrix::from_rows({{0.7, -1.0}, {0.2, 0.4}});
    lw.fc2_b = Matrix::from_rows({{-0.05, 0.05}});
    const Matrix x = Matrix::from_rows({{1.0, -2.0}});

    // mean -0.5, variance 2.25: normalized entries are +-1.5 / sqrt(2.25 + 1e-6).
    const double s = 1.5 / std::sqrt(2.25 + 1e-6);
    const double n0 = 2.0 * s + 0.1, n1 = -0.5 * s;
    const double h0 = n0 * 1.0 + n1 * 0.25, h1 = n0 * -0.5 + n1 * 2.0 + 0.3;
    auto phi = [](double t) { return 0.5 * t * std::erfc(-t / std::sqrt(2.0)); };
    const double g0 = phi(h0), g1 = phi(h1);
    const double y0 = 1.0 + g0 * 0.7 + g1 * 0.2 - 0.05;
    const double y1 = -2.0 + g0 * -1.0 + g1 * 0.4 + 0.05;

    const TokenSequence out = ffn(sequence_of(x), lw);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_NEAR(out.tokens(0, 0), y0, 1e-12);
    EXPECT_NEAR(out.tokens(0, 1), y1, 1e-12);
}

TEST(Forward, KeepRateOneMatchesVanilla) {
    const ModelConfig c = small_config();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        const WeightSet w = init_random(c, rng);
        const Raster img = random_raster(rng, c.resolution, c.resolution);
        const auto vanilla = forward(img, w, {});
        const auto planned = forward(img, w, ReorgPlan::uniform({1, 2, 4}, 1.0));
        EXPECT_LT(rel_diff(planned.logits, vanilla.logits), 1e-9);
        for (const auto& e : planned.masks.entries) EXPECT_TRUE(e.fused.empty());
    }
}

TEST(Forward, DeitSmallStageTokenCounts) {
    // DeiT-S geometry (12 layers, 224 px, patch 16) at a narrow width; counts do not depend on width.
    ModelConfig c{12, 16, 2, 1.0, 16, 224, 5};
    Rng rng(25);
    const WeightSet w = init_random(c, rng);
    const auto r = forward(random_raster(rng, 224, 224), w, ReorgPlan::uniform({4, 7, 10}, 0.7));
    const std::vector<std::size_t> attention{197, 197, 197, 197, 140, 140, 140, 100, 100, 100, 72, 72};
    ASSERT_EQ(r.trace.layers.size(), 12u);
    for (std::size_t l = 0; l < 12; ++l) EXPECT_EQ(r.trace.layers[l].origins.size(), attention[l]) << l + 1;
    ASSERT_EQ(r.masks.entries.size(), 3u);
    EXPECT_EQ(r.masks.entries[0].kept.size(), 138u);
    EXPECT_EQ(r.masks.entries[1].kept.size(), 98u);
    EXPECT_EQ(r.masks.entries[2].kept.size(), 70u);
}

TEST(Forward, ImageTokenPermutationLeavesLogitsUnchanged) {
    const ModelConfig c = small_config();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto inst = verify::make_toy_instance(c, c.num_tokens(), 100 + seed);
        Rng rng(seed);
        std::vector<std::size_t> perm(c.num_patches());
        std::iota(perm.begin(), perm.end(), std::size_t{1});
        for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
        perm.insert(perm.begin(), 0);
        TokenSequence shuffled;
        shuffled.tokens = gather_rows(inst.tokens.tokens, perm);
        for (std::size_t i : perm) shuffled.origins.push_back(inst.tokens.origins[i]);
        for (const ReorgPlan& plan : {ReorgPlan{}, ReorgPlan::uniform({2, 3}, 0.5), ReorgPlan::uniform({1}, 0.7, false)}) {
            const auto a = encode(inst.tokens, inst.weights, plan);
            const auto b = encode(shuffled, inst.weights, plan);
            EXPECT_LT(rel_diff(a.logits, b.logits), 1e-9);
        }
    }
}

TEST(Forward, BrightnessIsInvisibleWithZeroWeights) {
    const ModelConfig c = small_config();
    const WeightSet w = WeightSet::zeros(c);
    Rng rng(26);
    Raster img = random_raster(rng, c.resolution, c.resolution);
    const auto a = forward(img, w, {});
    for (double& v : img.data) v *= 2;
    EXPECT_EQ(forward(img, w, {}).logits, a.logits);
}

TEST(Forward, TraceRowsAreStochastic) {
    const ModelConfig c = small_config();
    Rng rng(27);
    const WeightSet w = init_random(c, rng);
    const auto r = forward(random_raster(rng, c.resolution, c.resolution), w, ReorgPlan::uniform({2}, 0.5));
    for (const auto& layer : r.trace.layers) {
        for (const auto& m : layer.head_maps)
            for (std::size_t i = 0; i < m.rows(); ++i)
                EXPECT_NEAR(std::accumulate(m.row(i).begin(), m.row(i).end(), 0.0), 1.0, 1e-9);
        EXPECT_NEAR(std::accumulate(layer.cls_row.begin(), layer.cls_row.end(), 0.0), 1.0, 1e-9);
    }
}

TEST(Forward, PlanOutsideDepthIsConfigError) {
    const ModelConfig c = small_config();
    const WeightSet w = WeightSet::zeros(c);
    EXPECT_THROW(forward(Raster(16, 16), w, ReorgPlan::uniform({5}, 0.5)), ConfigError);
    EXPECT_THROW(forward(Raster(16, 16), w, ReorgPlan::uniform({2, 2}, 0.5)), ConfigError);
    EXPECT_THROW(forward(Raster(16, 16), w, ReorgPlan::uniform({2}, 1.5)), ConfigError);
}

TEST(PosEmbed, SameResolutionIsIdentical) {
    Rng rng(28);
    const WeightSet w = init_random(small_config(), rng);
    EXPECT_EQ(interpolate_pos_embed(w, 16), w);
}

TEST(PosEmbed, ConstantStaysConstant) {
    ModelConfig c = small_config();
    WeightSet w = WeightSet::zeros(c);
    for (std::size_t r = 0; r < w.pos_embed.rows(); ++r)
        for (std::size_t j = 0; j < c.dim; ++j) w.pos_embed(r, j) = 0.5 + j;
    const WeightSet out = interpolate_pos_embed(w, 28);
    ASSERT_EQ(out.pos_embed.rows(), 50u);
    for (std::size_t r = 0; r < 50; ++r)
        for (std::size_t j = 0; j < c.dim; ++j) EXPECT_EQ(out.pos_embed(r, j), 0.5 + j);
}

TEST(PosEmbed, FourteenToNineteenMatchesKernelOracle) {
    ModelConfig c{1, 3, 1, 1.0, 16, 224, 2};
    WeightSet w = WeightSet::zeros(c);
    w.pos_embed(0, 0) = 9.0;
    for (std::size_t i = 0; i < 196; ++i) {
        const double y = static_cast<double>(i / 14), x = static_cast<double>(i % 14);
        w.pos_embed(i + 1, 0) = 0.1 * x + 0.2 * y;
        w.pos_embed(i + 1, 1) = x * y * 0.01;
        w.pos_embed(i + 1, 2) = std::sin(x) * std::cos(y);
    }
    const WeightSet out = interpolate_pos_embed(w, 304);
    ASSERT_EQ(out.config.resolution, 304u);
    ASSERT_EQ(out.pos_embed.rows(), 362u);
    EXPECT_EQ(out.pos_embed(0, 0), 9.0);

    const double scale = 14.0 / 19.0;
    for (std::size_t oy = 0; oy < 19; ++oy)
        for (std::size_t ox = 0; ox < 19; ++ox)
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const double sy = (oy + 0.5) * scale - 0.5, sx = (ox + 0.5) * scale - 0.5;
                const long by = static_cast<long>(std::floor(sy)), bx = static_cast<long>(std::floor(sx));
                double acc = 0;
                for (long i = -1; i <= 2; ++i)
                    for (long j = -1; j <= 2; ++j) {
                        const long yy = std::clamp(by + i, 0L, 13L), xx = std::clamp(bx + j, 0L, 13L);
                        acc += cubic_weight(sy - (by + i)) * cubic_weight(sx - (bx + j)) *
                               w.pos_embed(1 + yy * 14 + xx, ch);
                    }
                EXPECT_NEAR(out.pos_embed(1 + oy * 19 + ox, ch), acc, 1e-9);
            }
}

TEST(PosEmbed, IndivisibleResolutionThrows) {
    const WeightSet w = WeightSet::zeros(small_config());
    EXPECT_THROW(interpolate_pos_embed(w, 18), ConfigError);
}

TEST(Init, DeterministicAndShaped) {
    const ModelConfig c = small_config();
    Rng a(29), b(29), other(30);
    const WeightSet wa = init_random(c, a);
    EXPECT_EQ(wa, init_random(c, b));
    EXPECT_NE(wa, init_random(c, other));
    EXPECT_NO_THROW(wa.validate());
    for (const auto& [name, shape] : WeightSet::layout(c)) {
        const auto tensors = wa.tensors();
        const auto it = std::find_if(tensors.begin(), tensors.end(), [&](const auto& t) { return t.first == name; });
        ASSERT_NE(it, tensors.end()) << name;
        EXPECT_EQ(it->second->rows(), shape.first) << name;
        EXPECT_EQ(it->second->cols(), shape.second) << name;
    }
    for (double v : wa.layers[0].qkv_b.values()) EXPECT_EQ(v, 0.0);
    for (double v : wa.norm_gamma.values()) EXPECT_EQ(v, 1.0);
}

TEST(Init, SampleMeanWithinThreeSigma) {
    const ModelConfig c{4, 64, 4, 4.0, 8, 16, 10};
    Rng rng(31);
    const WeightSet w = init_random(c, rng);
    std::vector<double> sample;
    for (const auto& lw : w.layers)
        for (const Matrix* m : {&lw.qkv_w, &lw.proj_w, &lw.fc1_w, &lw.fc2_w})
            sample.insert(sample.end(), m->values().begin(), m->values().end());
    ASSERT_GE(sample.size(), 100000u);
    sample.resize(100000);
    const double mean = std::accumulate(sample.begin(), sample.end(), 0.0) / sample.size();
    // Standard deviation of N(0, 0.02) truncated at +-2 sd.
    const double z = 2.0, pdf = std::exp(-z * z / 2) / std::sqrt(2 * M_PI), mass = std::erf(z / std::sqrt(2.0));
    const double sd = 0.02 * std::sqrt(1 - 2 * z * pdf / mass);
    EXPECT_LT(std::abs(mean), 3 * sd / std::sqrt(100000.0));
    for (double v : sample) ASSERT_LE(std::abs(v), 0.04);
}
