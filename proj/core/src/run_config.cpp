#include "evit/run_config.hpp"

#include "evit/io.hpp"
#include "json.hpp"

namespace evit::io {

namespace {

using json = nlohmann::json;

template <typename T>
void read_opt(const json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

ModelConfig parse_model(const json& j, std::string& name) {
    if (j.is_string()) {
        name = j.get<std::string>();
        const auto preset = model_preset(name);
        if (!preset) throw ConfigError("unknown model preset '" + name + "'");
        return *preset;
    }
    if (!j.is_object()) throw ConfigError("\"model\" must be a preset name or an object");
    ModelConfig c;
    name = "custom";
    if (j.contains("preset")) {
        name = j.at("preset").get<std::string>();
        const auto preset = model_preset(name);
        if (!preset) throw ConfigError("unknown model preset '" + name + "'");
        c = *preset;
    }
    read_opt(j, "depth", c.depth);
    read_opt(j, "dim", c.dim);
    read_opt(j, "heads", c.heads);
    read_opt(j, "mlp_ratio", c.mlp_ratio);
    read_opt(j, "patch", c.patch);
    read_opt(j, "resolution", c.resolution);
    read_opt(j, "num_classes", c.num_classes);
    return c;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    RunConfig rc;
    try {
        const json doc = json::parse(text);
        if (!doc.is_object()) throw ConfigError("run config must be a JSON object");
        if (!doc.contains("model")) throw ConfigError("run config needs a \"model\" entry");
        rc.model = parse_model(doc.at("model"), rc.model_name);
        read_opt(doc, "resolution", rc.model.resolution);
        read_opt(doc, "seed", rc.seed);
        if (doc.contains("reorg")) {
            const json& r = doc.at("reorg");
            read_opt(r, "locations", rc.plan.locations);
            if (r.contains("keep_rates")) {
                rc.plan.keep_rates = r.at("keep_rates").get<std::vector<double>>();
            } else if (r.contains("keep_rate")) {
                rc.plan.keep_rates.assign(rc.plan.locations.size(), r.at("keep_rate").get<double>());
            } else {
                rc.plan.keep_rates.assign(rc.plan.locations.size(), 1.0);
            }
            if (r.contains("strategy")) rc.plan.strategy = parse_strategy(r.at("strategy").get<std::string>());
            read_opt(r, "fusion", rc.plan.fusion);
            if (r.contains("score_source")) {
                rc.plan.score_source = parse_score_source(r.at("score_source").get<std::string>());
            }
            if (r.contains("warmup_steps")) rc.plan.warmup_steps = r.at("warmup_steps").get<std::size_t>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed run config: ") + e.what());
    }
    rc.model.validate();
    rc.plan.validate(rc.model.depth);
    return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    return parse_run_config(std::string(bytes.begin(), bytes.end()));
}

}  // namespace evit::io
