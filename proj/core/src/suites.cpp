#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "evit/cost.hpp"
#include "evit/verify.hpp"

namespace evit::verify {

namespace {

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c);
    return buf;
}

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    Matrix m(r, c);
    for (double& v : m.values()) v = scale * rng.normal();
    return m;
}

void kernels_suite(SuiteReport& rep, Rng& rng, std::size_t trials) {
    bool mm_ok = true, sm_ok = true, ln_ok = true, perm_ok = true;
    double sm_worst = 0.0, ln_worst = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        const Matrix a = random_matrix(rng, 4, 5), b = random_matrix(rng, 5, 3);
        const Matrix c = matmul(a, b);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 3; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < 5; ++k) s += a(i, k) * b(k, j);
                mm_ok = mm_ok && s == c(i, j);
            }

        const Matrix logits = random_matrix(rng, 5, 7, 300.0);
        const Matrix sm = softmax_rows(logits);
        for (std::size_t r = 0; r < sm.rows(); ++r) {
            const double s = std::accumulate(sm.row(r).begin(), sm.row(r).end(), 0.0);
            sm_worst = std::max(sm_worst, std::abs(s - 1.0));
        }

        const Matrix x = random_matrix(rng, 3, 16);
        const Matrix ones(1, 16, 1.0), zeros(1, 16, 0.0);
        const Matrix y = layernorm(x, ones.values(), zeros.values());
        for (std::size_t r = 0; r < 3; ++r) {
            long double mean = 0, var = 0;
            for (double v : x.row(r)) mean += v;
            mean /= 16;
            for (double v : x.row(r)) var += (v - mean) * (v - mean);
            var /= 16;
            for (std::size_t cidx = 0; cidx < 16; ++cidx) {
                const long double ref = (x(r, cidx) - mean) / std::sqrt(var + 1e-6L);
                ln_worst = std::max(ln_worst, static_cast<double>(std::fabs(ref - y(r, cidx))));
            }
        }

        std::vector<double> v(50);
        for (double& e : v) e = static_cast<double>(rng.below(5));
        const auto idx = argsort_desc(v);
        std::set<std::size_t> seen(idx.begin(), idx.end());
        perm_ok = perm_ok && seen.size() == v.size();
        for (std::size_t i = 1; i < idx.size(); ++i) {
            perm_ok = perm_ok && (v[idx[i - 1]] > v[idx[i]] || (v[idx[i - 1]] == v[idx[i]] && idx[i - 1] < idx[i]));
        }
    }
    sm_ok = sm_worst <= 1e-12;
    ln_ok = ln_worst < 1e-12;
    rep.checks.push_back({"matmul matches naive triple loop bitwise", mm_ok, ""});
    rep.checks.push_back({"softmax rows sum to 1", sm_ok, fmt("max |sum-1| = %.3g", sm_worst)});
    rep.checks.push_back({"layernorm matches two-pass oracle", ln_ok, fmt("max diff = %.3g", ln_worst)});
    rep.checks.push_back({"argsort_desc is a stable permutation", perm_ok, ""});

    Raster img(5, 7, 3, 0.37);
    const Raster up = bicubic_resize(img, 11, 4);
    const bool const_ok = std::all_of(up.data.begin(), up.data.end(), [](double v) { return v == 0.37; });
    rep.checks.push_back({"bicubic preserves constants exactly", const_ok, ""});

    Rng r1(rng.seed() + 17), r2(rng.seed() + 17);
    bool same = true;
    for (int i = 0; i < 10000; ++i) same = same && r1.next_u64() == r2.next_u64();
    rep.checks.push_back({"rng streams reproducible for equal seeds", same, ""});
}

void reorg_suite(SuiteReport& rep, Rng& rng, std::size_t trials) {
    const std::size_t vectors = std::max<std::size_t>(trials, 1) * 100;
    std::size_t mismatches = 0, partition_bad = 0;
    for (std::size_t t = 0; t < vectors; ++t) {
        const std::size_t n = 1 + rng.below(60);
        AttentivenessVector a;
        const bool ties = t % 5 == 0;
        for (std::size_t i = 0; i < n; ++i) a.scores.push_back(ties ? static_cast<double>(rng.below(4)) : rng.uniform());
        const double kappa = 0.05 + 0.95 * rng.uniform();
        const Selection s = select_tokens(a, kappa, SelectionStrategy::TopK);
        const Selection o = brute_force_selection(a.scores, kappa);
        if (s.topk_idx != o.topk_idx || s.non_topk_idx != o.non_topk_idx) ++mismatches;
        for (auto strat : {SelectionStrategy::TopK, SelectionStrategy::MinK, SelectionStrategy::Random}) {
            const Selection p = select_tokens(a, kappa, strat, &rng);
            std::vector<std::size_t> all = p.topk_idx;
            all.insert(all.end(), p.non_topk_idx.begin(), p.non_topk_idx.end());
            std::sort(all.begin(), all.end());
            std::vector<std::size_t> expect(n);
            std::iota(expect.begin(), expect.end(), std::size_t{0});
            if (all != expect) ++partition_bad;
        }
    }
    rep.checks.push_back({"TopK selection equals brute-force oracle", mismatches == 0,
                          std::to_string(mismatches) + " mismatches over " + std::to_string(vectors) + " vectors"});
    rep.checks.push_back({"selection partitions image tokens", partition_bad == 0, ""});

    bool sched_ok = true;
    for (double target : {0.5, 0.7, 0.9}) {
        const WarmupSchedule s{1000, target};
        sched_ok = sched_ok && keep_rate_at(s, 0) == 1.0 && keep_rate_at(s, 1000) == target;
        double prev = 1.0;
        for (std::size_t step = 0; step <= 1000; ++step) {
            const double k = keep_rate_at(s, step);
            sched_ok = sched_ok && k <= prev;
            prev = k;
        }
    }
    rep.checks.push_back({"warmup endpoints exact and monotone", sched_ok, ""});

    const bool loc_ok = plan_locations(12, 3) == std::vector<std::size_t>{4, 7, 10} &&
                        plan_locations(16, 3) == std::vector<std::size_t>{5, 9, 13};
    rep.checks.push_back({"placement formula", loc_ok, ""});

    const ModelConfig toy{2, 8, 2, 2.0, 2, 4, 4};
    double worst = 0.0;
    for (std::size_t t = 0; t < std::max<std::size_t>(trials, 1); ++t) {
        const ToyInstance inst = make_toy_instance(toy, 6, rng.next_u64());
        const auto plain = encode(inst.tokens, inst.weights, ReorgPlan{});
        const auto ident = encode(inst.tokens, inst.weights, ReorgPlan::uniform({1, 2}, 1.0));
        for (std::size_t i = 0; i < plain.logits.cols(); ++i) {
            const double denom = std::max(std::abs(plain.logits(0, i)), 1e-300);
            worst = std::max(worst, std::abs(plain.logits(0, i) - ident.logits(0, i)) / denom);
        }
    }
    rep.checks.push_back({"keep rate 1 plan equals vanilla forward", worst < 1e-9, fmt("max rel diff = %.3g", worst)});
}

void grads_suite(SuiteReport& rep, Rng& rng, std::size_t trials) {
    const ModelConfig toy{2, 8, 2, 4.0, 2, 4, 4};
    const ReorgPlan plan = ReorgPlan::uniform({1}, 0.5);
    double worst = 0.0;
    std::size_t probes = 0, rejected = 0, failed = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        const ToyInstance inst = make_toy_instance(toy, 6, rng.next_u64());
        const GradCheckReport r = gradient_check(inst.tokens, inst.weights, plan, inst.loss_weights);
        worst = std::max(worst, r.max_rel_error);
        probes += r.probes;
        rejected += r.rejected;
        if (r.max_rel_error >= 1e-5) ++failed;
    }
    rep.checks.push_back({"reverse-mode gradients match central differences", failed == 0,
                          fmt("max rel err %.3g; ", worst) + std::to_string(probes) + " probes, " +
                              std::to_string(rejected) + " rejected at selection boundaries, " +
                              std::to_string(failed) + " failing instances"});

    const ToyInstance inst = make_toy_instance(toy, 6, rng.next_u64());
    Tape tape;
    const RecordedEncoder rec = record_encoder(tape, inst.tokens, inst.weights, plan);
    const Var loss = dot_loss(rec.logits, inst.loss_weights);
    const Gradients g1 = tape.backward(loss);
    const Gradients g2 = tape.backward(loss);
    bool same = g1[rec.input] == g2[rec.input];
    for (const auto& [name, v] : rec.params) same = same && g1[v] == g2[v];
    rep.checks.push_back({"tape backward deterministic", same, ""});
    rep.checks.push_back({"tape replay reproduces recorded values", tape.replay_matches(), ""});
}

struct Reference {
    const char* arch;
    std::size_t resolution;
    double keep_rate;
    double lo, hi;  // published GMACs (band)
    double tol;     // relative
    double reduction;  // published percentage, < 0 when not given
};

void cost_suite(SuiteReport& rep) {
    const Reference refs[] = {
        {"deit-s", 224, 1.0, 4.6, 4.6, 0.02, -1},  {"deit-s", 224, 0.9, 4.0, 4.0, 0.05, 13},
        {"deit-s", 224, 0.8, 3.5, 3.5, 0.05, 24},  {"deit-s", 224, 0.7, 3.0, 3.0, 0.05, 35},
        {"deit-s", 224, 0.6, 2.6, 2.6, 0.05, 43},  {"deit-s", 224, 0.5, 2.3, 2.3, 0.05, 50},
        {"deit-b", 224, 1.0, 17.6, 17.6, 0.02, -1}, {"deit-b", 224, 0.7, 11.5, 11.6, 0.05, -1},
        {"deit-s", 304, 0.5, 4.4, 4.4, 0.05, -1},
    };
    for (const auto& r : refs) {
        const ModelConfig c = model_preset(r.arch)->with_resolution(r.resolution);
        const CostReport rep_k = model_macs(c, ReorgPlan::uniform({4, 7, 10}, r.keep_rate));
        const double g = rep_k.gmacs();
        bool ok = g >= r.lo * (1 - r.tol) && g <= r.hi * (1 + r.tol);
        std::string detail = fmt("%.3f G vs %.1f G", g, r.lo);
        if (r.reduction >= 0) {
            const double base = model_macs(c, ReorgPlan{}).gmacs();
            const double red = 100.0 * (1.0 - g / base);
            ok = ok && std::abs(red - r.reduction) <= 2.0;
            detail += fmt(", reduction %.1f%% vs %.0f%%", red, r.reduction);
        }
        char name[96];
        std::snprintf(name, sizeof name, "MACs %s@%zu keep %.1f", r.arch, r.resolution, r.keep_rate);
        rep.checks.push_back({name, ok, detail});
    }

    const std::pair<ModelConfig, ReorgPlan> toys[] = {
        {ModelConfig{4, 32, 4, 4.0, 8, 32, 10}, ReorgPlan::uniform({2, 3}, 0.7)},
        {ModelConfig{4, 32, 4, 4.0, 8, 32, 10}, ReorgPlan::uniform({2}, 0.5, false)},
        {ModelConfig{3, 24, 3, 2.0, 4, 24, 7}, ReorgPlan::uniform({1, 2, 3}, 0.6)},
        {ModelConfig{2, 16, 2, 4.0, 4, 16, 5}, ReorgPlan{}},
        {ModelConfig{6, 48, 6, 3.0, 8, 48, 12}, ReorgPlan::uniform({2, 4, 6}, 0.8)},
    };
    for (std::size_t i = 0; i < std::size(toys); ++i) {
        const auto& [c, plan] = toys[i];
        Rng init(7 + i);
        const WeightSet w = init_random(c, init);
        Raster img(c.resolution, c.resolution, 3);
        for (double& v : img.data) v = init.uniform();
        std::uint64_t counted = 0;
        {
            MacCounter counter;
            (void)forward(img, w, plan, ForwardOptions{.keep_head_maps = false});
            counted = counter.count();
        }
        const std::uint64_t analytic = model_macs(c, plan).total_macs;
        const double rel = std::abs(static_cast<double>(counted) - static_cast<double>(analytic)) /
                           static_cast<double>(analytic);
        rep.checks.push_back({"analytic MACs match instrumented forward (toy " + std::to_string(i) + ")", rel <= 0.01,
                              std::to_string(analytic) + " vs " + std::to_string(counted)});
    }
}

}  // namespace

std::vector<std::string> suite_names() { return {"kernels", "reorg", "grads", "cost", "all"}; }

SuiteReport run_suite(std::string_view suite, std::uint64_t seed, std::size_t trials) {
    SuiteReport rep;
    Rng rng(seed);
    const bool all = suite == "all";
    if (!all && suite != "kernels" && suite != "reorg" && suite != "grads" && suite != "cost") {
        throw UsageError("unknown suite '" + std::string(suite) + "'");
    }
    if (all || suite == "kernels") kernels_suite(rep, rng, trials);
    if (all || suite == "reorg") reorg_suite(rep, rng, trials);
    if (all || suite == "grads") grads_suite(rep, rng, trials);
    if (all || suite == "cost") cost_suite(rep);
    return rep;
}

}  // namespace evit::verify
