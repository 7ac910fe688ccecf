#pragma once

// External formats. See docs/formats.md for the byte-level layouts.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "evit/cost.hpp"
#include "evit/error.hpp"
#include "evit/kernels.hpp"
#include "evit/model.hpp"
#include "evit/reorg.hpp"

namespace evit::io {

class IoError : public Error {
public:
    using Error::Error;
};
class FormatError : public IoError {
public:
    using IoError::IoError;
};
class MagicError : public FormatError {
public:
    using FormatError::FormatError;
};
class TruncatedError : public FormatError {
public:
    using FormatError::FormatError;
};
// Tensor byte ranges overlap or fall outside the payload.
class LayoutError : public FormatError {
public:
    using FormatError::FormatError;
};
// Container is well formed but does not fit the requested model.
class WeightShapeError : public IoError {
public:
    using IoError::IoError;
};

inline constexpr char kWeightMagic[4] = {'E', 'V', 'W', 'T'};
inline constexpr std::uint32_t kWeightFormatVersion = 1;

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
};
using TensorMap = std::map<std::string, Tensor>;

// Raw container access.
std::vector<std::uint8_t> encode_container(const TensorMap& tensors);
TensorMap decode_container(std::span<const std::uint8_t> bytes);

void save_weights(const WeightSet& w, const std::filesystem::path& path);
// Every tensor the config requires must be present with the exact shape; extras are ignored.
WeightSet load_weights(const std::filesystem::path& path, const ModelConfig& config);
WeightSet weights_from_tensors(const TensorMap& tensors, const ModelConfig& config);
TensorMap tensors_from_weights(const WeightSet& w);

// Binary P6, maxval 255. Pixels become v / 255.
Raster read_ppm(const std::filesystem::path& path);
Raster decode_ppm(std::span<const std::uint8_t> bytes);
void write_ppm(const Raster& img, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_ppm(const Raster& img);

inline constexpr double kOverlayDarken = 0.25;

// Darkens every patch not represented by a kept patch token after the reorganization at `layer`.
Raster render_mask_overlay(const Raster& image, const MaskTrace& masks, std::size_t layer, std::size_t patch);
void emit_mask_overlay(const Raster& image, const MaskTrace& masks, std::size_t layer, std::size_t patch,
                       const std::filesystem::path& path);

// Columns: config,resolution,kappa,locations,total_gmacs,reduction_pct. Locations are ';'-joined.
std::string sweep_csv(std::span<const SweepRow> rows);
void emit_csv(std::span<const SweepRow> rows, const std::filesystem::path& path);

struct CsvRecord {
    std::string config;
    std::size_t resolution = 0;
    double kappa = 0.0;
    std::vector<std::size_t> locations;
    double total_gmacs = 0.0;
    double reduction_pct = 0.0;
};
std::vector<CsvRecord> parse_sweep_csv(const std::string& text);

// Trace documents (schema in docs/formats.md).
std::string trace_json(const AttentionTrace& attention, const MaskTrace& masks);
void emit_trace_json(const AttentionTrace& attention, const MaskTrace& masks, const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

}  // namespace evit::io
