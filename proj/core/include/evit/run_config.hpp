#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "evit/model.hpp"
#include "evit/reorg.hpp"

namespace evit::io {

// A complete run description. JSON layout:
//
//   {
//     "model": "deit-s"  |  {"preset": "deit-s", ...overrides}  |  {"depth": 12, "dim": 384, ...},
//     "resolution": 224,
//     "reorg": {"locations": [4, 7, 10], "keep_rate": 0.7 | "keep_rates": [...],
//               "strategy": "topk", "fusion": true, "score_source": "cls", "warmup_steps": 0},
//     "seed": 0
//   }
//
// Every key except "model" is optional.
struct RunConfig {
    std::string model_name;  // preset name, or "custom"
    ModelConfig model;
    ReorgPlan plan;
    std::uint64_t seed = 0;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace evit::io
