#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "evit/cost.hpp"
#include "evit/io.hpp"
#include "evit/model.hpp"
#include "evit/reorg.hpp"
#include "evit/rng.hpp"
#include "evit/run_config.hpp"
#include "evit/verify.hpp"

using namespace evit;

namespace {

// Bad flag combinations or values detected after parsing.
class UsageFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Mixed into the seed for random pixels and random drops.
constexpr std::uint64_t kInputStream = 0x9e3779b97f4a7c15ULL;

struct ModelFlags {
    std::string config_path;
    std::string arch;
    std::size_t resolution = 0;
    std::string weights_path;
    std::uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
};

struct InputFlags {
    std::string image_path;
    bool random_input = false;
};

struct PlanFlags {
    double keep_rate = 1.0;
    CLI::Option* keep_rate_opt = nullptr;
    std::vector<std::size_t> locations;
    std::string strategy;
    bool no_fusion = false;
};

void add_model_flags(CLI::App* cmd, ModelFlags& f, const std::string& default_arch, bool with_weights) {
    f.arch = default_arch;
    auto* cfg = cmd->add_option("--config", f.config_path, "run config JSON")->check(CLI::ExistingFile);
    cmd->add_option("--arch", f.arch, "model preset")->excludes(cfg)->capture_default_str();
    cmd->add_option("--resolution", f.resolution, "input side in pixels (overrides the config)");
    f.seed_opt = cmd->add_option("--seed", f.seed, "seed for random weights and inputs");
    if (with_weights) {
        cmd->add_option("--weights", f.weights_path, "EVWT weight file")->check(CLI::ExistingFile)->excludes(f.seed_opt);
    }
}

void add_input_flags(CLI::App* cmd, InputFlags& f, bool required) {
    auto* img = cmd->add_option("--image", f.image_path, "binary PPM input")->check(CLI::ExistingFile);
    auto* rnd = cmd->add_flag("--random-input", f.random_input, "uniform random pixels");
    img->excludes(rnd);
    if (required) {
        auto* group = cmd->add_option_group("input");
        group->add_option(img);
        group->add_option(rnd);
        group->require_option(1);
    }
}

void add_plan_flags(CLI::App* cmd, PlanFlags& f) {
    f.keep_rate_opt = cmd->add_option("--keep-rate", f.keep_rate, "fraction of image tokens kept at each location")
                          ->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--locations", f.locations, "1-based reorganization layers")->delimiter(',');
    cmd->add_option("--strategy", f.strategy, "topk, mink or random")
        ->check(CLI::IsMember({"topk", "mink", "random"}));
    cmd->add_flag("--no-fusion", f.no_fusion, "drop inattentive tokens instead of fusing them");
}

io::RunConfig resolve_run(const ModelFlags& f) {
    io::RunConfig rc;
    if (!f.config_path.empty()) {
        rc = io::load_run_config(f.config_path);
    } else {
        const auto preset = model_preset(f.arch);
        if (!preset) throw UsageFailure("unknown arch '" + f.arch + "'");
        rc.model_name = f.arch;
        rc.model = *preset;
    }
    if (f.resolution) rc.model = rc.model.with_resolution(f.resolution);
    if (f.seed_opt && f.seed_opt->count()) rc.seed = f.seed;
    return rc;
}

// `fallback_rate` applies when neither the flags nor the config give a plan.
ReorgPlan resolve_plan(const PlanFlags& f, const io::RunConfig& rc, std::optional<double> fallback_rate = {}) {
    ReorgPlan plan = rc.plan;
    bool rate_given = f.keep_rate_opt->count() > 0;
    double rate = f.keep_rate;
    if (rate_given && rate <= 0.0) throw UsageFailure("--keep-rate must be in (0, 1]");
    if (!rate_given && plan.empty() && fallback_rate) {
        rate_given = true;
        rate = *fallback_rate;
    }
    if (!f.locations.empty()) {
        if (!rate_given) {
            if (plan.keep_rates.empty() ||
                std::adjacent_find(plan.keep_rates.begin(), plan.keep_rates.end(), std::not_equal_to<>()) !=
                    plan.keep_rates.end()) {
                throw UsageFailure("--locations needs --keep-rate");
            }
            rate = plan.keep_rates.front();
        }
        plan.locations = f.locations;
        plan.keep_rates.assign(f.locations.size(), rate);
    } else if (rate_given) {
        if (plan.locations.empty()) plan.locations = plan_locations(rc.model.depth, 3);
        plan.keep_rates.assign(plan.locations.size(), rate);
    }
    if (!f.strategy.empty()) plan.strategy = parse_strategy(f.strategy);
    if (f.no_fusion) plan.fusion = false;
    plan.validate(rc.model.depth);
    return plan;
}

WeightSet resolve_weights(const ModelFlags& f, const io::RunConfig& rc) {
    if (!f.weights_path.empty()) return io::load_weights(f.weights_path, rc.model);
    Rng rng(rc.seed);
    return init_random(rc.model, rng);
}

Raster random_image(std::size_t side, std::uint64_t seed) {
    Rng rng(seed ^ kInputStream);
    Raster img(side, side);
    for (double& v : img.data) v = rng.uniform();
    return img;
}

Raster resolve_image(const InputFlags& f, const io::RunConfig& rc) {
    const std::size_t side = rc.model.resolution;
    if (f.image_path.empty()) return random_image(side, rc.seed);
    Raster img = io::read_ppm(f.image_path);
    if (img.height != side || img.width != side) img = bicubic_resize(img, side, side);
    return img;
}

std::size_t resolve_threads(std::size_t flag) { return std::max<std::size_t>(flag, 1); }

void print_top5(const Matrix& logits) {
    std::vector<std::size_t> order(logits.cols());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t k = std::min<std::size_t>(5, order.size());
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](std::size_t a, std::size_t b) {
        return logits(0, a) > logits(0, b) || (logits(0, a) == logits(0, b) && a < b);
    });
    for (std::size_t r = 0; r < k; ++r) std::printf("%zu  class %zu  logit %.6f\n", r + 1, order[r], logits(0, order[r]));
}

std::string join(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::string reduction_text(double base, double total) {
    const double pct = 100.0 * (1.0 - total / base);
    char buf[32];
    if (std::abs(pct) < 0.5) return "";
    std::snprintf(buf, sizeof buf, " (%+.0f%%)", -pct);
    return buf;
}

// ---------------------------------------------------------------------------------------------

struct ForwardCmd {
    ModelFlags model;
    InputFlags input;
    PlanFlags plan;
    std::string trace_path;

    int run() const {
        const io::RunConfig rc = resolve_run(model);
        const ReorgPlan p = resolve_plan(plan, rc);
        const WeightSet w = resolve_weights(model, rc);
        const Raster img = resolve_image(input, rc);
        Rng rng(rc.seed);
        const ForwardResult out = forward(img, w, p, ForwardOptions{!trace_path.empty()}, &rng);
        print_top5(out.logits);
        if (!trace_path.empty()) io::emit_trace_json(out.trace, out.masks, trace_path);
        return 0;
    }
};

struct MacsCmd {
    std::string arch = "deit-s";
    std::size_t resolution = 224;
    double keep_rate = 1.0;
    std::vector<std::size_t> locations;
    bool no_fusion = false;
    std::string csv_path;

    int run() const {
        const auto preset = model_preset(arch);
        if (!preset) throw UsageFailure("unknown arch '" + arch + "'");
        if (keep_rate <= 0.0) throw UsageFailure("--keep-rate must be in (0, 1]");
        const ModelConfig c = preset->with_resolution(resolution);
        const auto locs = locations.empty() ? plan_locations(c.depth, 3) : locations;
        const double rates[] = {keep_rate};
        const std::size_t sides[] = {resolution};
        const auto rows = sweep(arch, c, rates, sides, locs, !no_fusion);
        const CostReport base = model_macs(c, {});
        const double g = rows[0].report.gmacs();
        std::printf("%.1f G%s\n", g, reduction_text(base.gmacs(), g).c_str());
        if (!csv_path.empty()) io::emit_csv(rows, csv_path);
        return 0;
    }
};

struct SweepCmd {
    std::string arch = "deit-s";
    std::vector<std::size_t> resolutions{224};
    std::vector<double> keep_rates{0.5, 0.6, 0.7, 0.8, 0.9};
    std::vector<std::size_t> locations;
    bool no_fusion = false;
    std::string csv_path;
    std::size_t threads = 1;

    int run() const {
        const auto preset = model_preset(arch);
        if (!preset) throw UsageFailure("unknown arch '" + arch + "'");
        for (double k : keep_rates)
            if (k <= 0.0 || k > 1.0) throw UsageFailure("keep rates must be in (0, 1]");
        const auto locs = locations.empty() ? plan_locations(preset->depth, 3) : locations;
        const auto rows = sweep(arch, *preset, keep_rates, resolutions, locs, !no_fusion, resolve_threads(threads));
        if (csv_path.empty()) {
            std::fputs(io::sweep_csv(rows).c_str(), stdout);
        } else {
            io::emit_csv(rows, csv_path);
        }
        return 0;
    }
};

struct BenchCmd {
    ModelFlags model;
    PlanFlags plan;
    std::size_t repeats = 10;
    std::size_t warmup = 1;
    std::size_t threads = 1;
    std::string json_path;

    int run() const {
        if (repeats < 3) throw UsageFailure("--repeats must be at least 3");
        const io::RunConfig rc = resolve_run(model);
        const ReorgPlan target = resolve_plan(plan, rc, 0.7);
        const WeightSet w = resolve_weights(model, rc);
        const Raster img = random_image(rc.model.resolution, rc.seed);

        const auto time_once = [&](const ReorgPlan& p) {
            const auto t0 = std::chrono::steady_clock::now();
            const ForwardResult r = forward(img, w, p, ForwardOptions{false});
            const auto t1 = std::chrono::steady_clock::now();
            if (!std::isfinite(r.logits(0, 0))) throw NumericError("non-finite logits");
            return std::chrono::duration<double, std::milli>(t1 - t0).count();
        };
        for (std::size_t i = 0; i < warmup; ++i) {
            time_once({});
            time_once(target);
        }
        std::vector<double> base(repeats), reorg(repeats);
        const std::size_t n_threads = std::min(resolve_threads(threads), repeats);
        {
            std::vector<std::jthread> pool;
            for (std::size_t t = 0; t < n_threads; ++t) {
                pool.emplace_back([&, t] {
                    for (std::size_t i = t; i < repeats; i += n_threads) {
                        if (i % 2 == 0) {
                            base[i] = time_once({});
                            reorg[i] = time_once(target);
                        } else {
                            reorg[i] = time_once(target);
                            base[i] = time_once({});
                        }
                    }
                });
            }
        }

        const auto summary = [](const std::vector<double>& s) {
            const double mean = std::accumulate(s.begin(), s.end(), 0.0) / s.size();
            double var = 0;
            for (double v : s) var += (v - mean) * (v - mean);
            nlohmann::ordered_json j;
            j["samples_ms"] = s;
            j["mean_ms"] = mean;
            j["stddev_ms"] = std::sqrt(var / (s.size() - 1));
            j["images_per_s"] = 1000.0 / mean;
            return j;
        };
        nlohmann::ordered_json doc;
        doc["model"] = rc.model_name;
        doc["resolution"] = rc.model.resolution;
        doc["keep_rate"] = target.keep_rates.empty() ? 1.0 : target.keep_rates.front();
        doc["locations"] = target.locations;
        doc["fusion"] = target.fusion;
        doc["repeats"] = repeats;
        doc["warmup_iters"] = warmup;
        doc["threads"] = n_threads;
        doc["baseline"] = summary(base);
        doc["reorganized"] = summary(reorg);
        doc["speedup"] = doc["baseline"]["mean_ms"].get<double>() / doc["reorganized"]["mean_ms"].get<double>();
        const std::string text = doc.dump(2) + "\n";
        if (json_path.empty()) {
            std::fputs(text.c_str(), stdout);
        } else {
            io::write_text(json_path, text);
            std::printf("speedup %.3fx over keep rate 1\n", doc["speedup"].get<double>());
        }
        return 0;
    }
};

struct MaskCmd {
    ModelFlags model;
    InputFlags input;
    PlanFlags plan;
    std::size_t layer = 0;
    std::string out_path;

    int run() const {
        const io::RunConfig rc = resolve_run(model);
        const ReorgPlan p = resolve_plan(plan, rc, 0.7);
        if (std::find(p.locations.begin(), p.locations.end(), layer) == p.locations.end()) {
            throw UsageFailure("layer " + std::to_string(layer) + " is not a reorganization location (" +
                               join(p.locations) + ")");
        }
        const WeightSet w = resolve_weights(model, rc);
        const Raster img = resolve_image(input, rc);
        Rng rng(rc.seed);
        const ForwardResult out = forward(img, w, p, ForwardOptions{false}, &rng);
        io::emit_mask_overlay(img, out.masks, layer, rc.model.patch, out_path);
        const MaskEntry* e = out.masks.find(layer);
        std::printf("layer %zu: kept %zu of %zu tokens\n", layer, e->kept.size(), e->scores.size());
        return 0;
    }
};

struct PlanCmd {
    std::string arch;
    std::size_t depth = 0;
    std::size_t count = 3;

    int run() const {
        std::size_t d = depth;
        if (!arch.empty()) {
            const auto preset = model_preset(arch);
            if (!preset) throw UsageFailure("unknown arch '" + arch + "'");
            d = preset->depth;
        }
        if (d == 0) throw UsageFailure("give --arch or --depth");
        std::printf("%s\n", join(plan_locations(d, count)).c_str());
        return 0;
    }
};

struct AblateCmd {
    ModelFlags model;
    InputFlags input;
    std::vector<std::size_t> drop_indices;
    double drop_rate = 0.0;
    CLI::Option* drop_rate_opt = nullptr;
    std::string by = "attentiveness";

    int run() const {
        const io::RunConfig rc = resolve_run(model);
        const WeightSet w = resolve_weights(model, rc);
        const Raster img = resolve_image(input, rc);
        const TokenSequence tokens = patch_embed(img, w);
        const std::size_t n = tokens.image_tokens();

        std::vector<std::size_t> drop = drop_indices;
        ReorgPlan p;
        if (drop_rate_opt->count()) {
            if (by == "random") {
                std::vector<std::size_t> idx(n);
                std::iota(idx.begin(), idx.end(), 1);
                Rng rng(rc.seed ^ kInputStream);
                for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
                idx.resize(static_cast<std::size_t>(std::llround(drop_rate * static_cast<double>(n))));
                std::sort(idx.begin(), idx.end());
                drop = idx;
            } else if (drop_rate > 0.0) {
                if (drop_rate >= 1.0) throw UsageFailure("attentiveness dropping needs --drop-rate below 1");
                p = ReorgPlan::uniform(plan_locations(rc.model.depth, 3), 1.0 - drop_rate, false);
            }
        }
        const TokenSequence kept = ablate_input_tokens(tokens, drop);
        Rng rng(rc.seed);
        const ForwardResult out = encode(kept, w, p, ForwardOptions{false}, &rng);
        if (p.empty()) {
            std::printf("dropped %zu of %zu image tokens before the encoder\n", drop.size(), n);
        } else {
            std::printf("dropped inattentive tokens at layers %s, keep rate %.3f\n", join(p.locations).c_str(),
                        p.keep_rates.front());
        }
        print_top5(out.logits);
        return 0;
    }
};

struct VerifyCmd {
    std::string suite = "all";
    std::uint64_t seed = 0;
    std::size_t trials = 10;

    int run() const {
        const verify::SuiteReport rep = verify::run_suite(suite, seed, trials);
        for (const auto& c : rep.checks) {
            std::printf("%s %s: %s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.detail.c_str());
        }
        std::printf("%zu checks, %zu failures\n", rep.checks.size(), rep.failures());
        return rep.failures() == 0 ? 0 : 1;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Token reorganization for vision transformers: inference, cost model and checks"};
    app.require_subcommand(1);

    ForwardCmd fwd;
    auto* c_fwd = app.add_subcommand("forward", "run one image through the model and print the top-5 classes");
    add_model_flags(c_fwd, fwd.model, "toy", true);
    add_input_flags(c_fwd, fwd.input, true);
    add_plan_flags(c_fwd, fwd.plan);
    c_fwd->add_option("--emit-trace", fwd.trace_path, "write attention maps and masks as JSON");

    MacsCmd macs;
    auto* c_macs = app.add_subcommand("macs", "analytic multiply-accumulate count of one configuration");
    c_macs->add_option("--arch", macs.arch, "model preset")->capture_default_str();
    c_macs->add_option("--resolution", macs.resolution)->capture_default_str();
    c_macs->add_option("--keep-rate", macs.keep_rate)->check(CLI::Range(0.0, 1.0))->capture_default_str();
    c_macs->add_option("--locations", macs.locations, "1-based reorganization layers")->delimiter(',');
    c_macs->add_flag("--no-fusion", macs.no_fusion);
    c_macs->add_option("--csv", macs.csv_path, "also write the row as CSV");

    SweepCmd sw;
    auto* c_sweep = app.add_subcommand("sweep", "cost model over keep rates and resolutions, as CSV");
    c_sweep->add_option("--arch", sw.arch, "model preset")->capture_default_str();
    c_sweep->add_option("--resolutions,--resolution", sw.resolutions)->delimiter(',')->capture_default_str();
    c_sweep->add_option("--keep-rates,--keep-rate", sw.keep_rates)->delimiter(',')->capture_default_str();
    c_sweep->add_option("--locations", sw.locations, "1-based reorganization layers")->delimiter(',');
    c_sweep->add_flag("--no-fusion", sw.no_fusion);
    c_sweep->add_option("--csv", sw.csv_path, "output file (default stdout)");
    c_sweep->add_option("--threads", sw.threads)->envname("EVIT_THREADS")->check(CLI::PositiveNumber);

    BenchCmd bench;
    auto* c_bench = app.add_subcommand("bench", "wall-clock forward time with and without reorganization");
    add_model_flags(c_bench, bench.model, "toy", true);
    add_plan_flags(c_bench, bench.plan);
    c_bench->add_option("--repeats", bench.repeats)->capture_default_str();
    c_bench->add_option("--warmup-iters", bench.warmup)->capture_default_str();
    c_bench->add_option("--threads", bench.threads)->envname("EVIT_THREADS")->check(CLI::PositiveNumber);
    c_bench->add_option("--json", bench.json_path, "output file (default stdout)");

    MaskCmd mask;
    auto* c_mask = app.add_subcommand("mask", "write the image with inattentive patches darkened");
    add_model_flags(c_mask, mask.model, "toy", true);
    add_input_flags(c_mask, mask.input, true);
    add_plan_flags(c_mask, mask.plan);
    c_mask->add_option("--layer", mask.layer, "reorganization layer to show")->required();
    c_mask->add_option("--out", mask.out_path, "output PPM")->required();

    PlanCmd plan;
    auto* c_plan = app.add_subcommand("plan", "evenly spaced reorganization layers");
    auto* p_arch = c_plan->add_option("--arch", plan.arch, "model preset");
    c_plan->add_option("--depth", plan.depth)->excludes(p_arch);
    c_plan->add_option("--count", plan.count)->capture_default_str();

    AblateCmd ablate;
    auto* c_ablate = app.add_subcommand("ablate", "prediction with input tokens removed");
    add_model_flags(c_ablate, ablate.model, "toy", true);
    add_input_flags(c_ablate, ablate.input, true);
    auto* a_idx = c_ablate->add_option("--drop-indices", ablate.drop_indices, "token rows to drop (1..N, 0 is CLS)")
                      ->delimiter(',');
    ablate.drop_rate_opt =
        c_ablate->add_option("--drop-rate", ablate.drop_rate)->check(CLI::Range(0.0, 1.0))->excludes(a_idx);
    c_ablate->add_option("--by", ablate.by)->check(CLI::IsMember({"attentiveness", "random"}))->needs(ablate.drop_rate_opt);
    auto* a_group = c_ablate->add_option_group("drop");
    a_group->add_option(a_idx);
    a_group->add_option(ablate.drop_rate_opt);
    a_group->require_option(1);

    VerifyCmd ver;
    auto* c_verify = app.add_subcommand("verify", "run oracle and invariant suites");
    c_verify->add_option("--suite", ver.suite, "kernels, reorg, grads, cost or all")->capture_default_str();
    c_verify->add_option("--seed", ver.seed)->capture_default_str();
    c_verify->add_option("--trials", ver.trials)->check(CLI::PositiveNumber)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (c_fwd->parsed()) return fwd.run();
        if (c_macs->parsed()) return macs.run();
        if (c_sweep->parsed()) return sw.run();
        if (c_bench->parsed()) return bench.run();
        if (c_mask->parsed()) return mask.run();
        if (c_plan->parsed()) return plan.run();
        if (c_ablate->parsed()) return ablate.run();
        if (c_verify->parsed()) return ver.run();
    } catch (const UsageFailure& e) {
        std::cerr << "evit: " << e.what() << "\n";
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "evit: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "evit: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
