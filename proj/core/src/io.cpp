#include "evit/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace evit::io {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> in, std::size_t pos, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
    return v;
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double parse_double(std::string_view s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw FormatError("bad number '" + std::string(s) + "'");
    }
    return v;
}

std::size_t parse_size(std::string_view s) {
    std::size_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw FormatError("bad integer '" + std::string(s) + "'");
    }
    return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

ordered_json origin_json(const Origin& o) {
    ordered_json j;
    switch (o.kind()) {
        case Origin::Kind::Cls:
            j["kind"] = "cls";
            break;
        case Origin::Kind::Patch:
            j["kind"] = "patch";
            j["row"] = o.cell().row;
            j["col"] = o.cell().col;
            break;
        case Origin::Kind::Fused: {
            j["kind"] = "fused";
            ordered_json cells = ordered_json::array();
            for (const auto& c : o.cells()) cells.push_back({c.row, c.col});
            j["cells"] = cells;
            break;
        }
    }
    return j;
}

}  // namespace

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

namespace {

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + path.string() + "' failed");
}

}  // namespace

void write_text(const std::filesystem::path& path, const std::string& text) {
    write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> encode_container(const TensorMap& tensors) {
    json header = json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        std::size_t count = 1;
        for (std::size_t s : t.shape) count *= s;
        if (count != t.data.size()) throw ShapeError("tensor '" + name + "' data does not match its shape");
        const std::uint64_t nbytes = 8 * t.data.size();
        header[name] = {{"dtype", "f64"}, {"shape", t.shape}, {"offset", offset}, {"nbytes", nbytes}};
        offset += nbytes;
    }
    const std::string text = header.dump();

    std::vector<std::uint8_t> out(std::begin(kWeightMagic), std::end(kWeightMagic));
    put_le(out, kWeightFormatVersion, 4);
    put_le(out, text.size(), 8);
    out.insert(out.end(), text.begin(), text.end());
    out.reserve(out.size() + offset);
    for (const auto& [name, t] : tensors) {
        for (double v : t.data) put_le(out, std::bit_cast<std::uint64_t>(v), 8);
    }
    return out;
}

TensorMap decode_container(std::span<const std::uint8_t> bytes) {
    constexpr std::size_t kPrefix = 16;
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kWeightMagic, 4) != 0) {
        throw MagicError("not an EVWT weight container (bad magic)");
    }
    if (bytes.size() < kPrefix) throw TruncatedError("weight container shorter than its fixed prefix");
    const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
    if (version != kWeightFormatVersion) {
        throw FormatError("unsupported weight container version " + std::to_string(version));
    }
    const std::uint64_t header_len = get_le(bytes, 8, 8);
    if (header_len > bytes.size() - kPrefix) throw TruncatedError("weight container header is truncated");
    const auto payload = bytes.subspan(kPrefix + header_len);

    json header;
    try {
        header = json::parse(bytes.begin() + kPrefix, bytes.begin() + static_cast<std::ptrdiff_t>(kPrefix + header_len));
    } catch (const json::exception& e) {
        throw FormatError(std::string("weight container header is not valid JSON: ") + e.what());
    }
    if (!header.is_object()) throw FormatError("weight container header must be a JSON object");

    struct Range {
        std::uint64_t begin, end;
        std::string name;
    };
    std::vector<Range> ranges;
    TensorMap out;
    for (const auto& [name, entry] : header.items()) {
        Tensor t;
        std::uint64_t offset = 0, nbytes = 0;
        try {
            if (entry.at("dtype").get<std::string>() != "f64") {
                throw FormatError("tensor '" + name + "' has unsupported dtype");
            }
            t.shape = entry.at("shape").get<std::vector<std::size_t>>();
            offset = entry.at("offset").get<std::uint64_t>();
            nbytes = entry.at("nbytes").get<std::uint64_t>();
        } catch (const json::exception& e) {
            throw FormatError("tensor '" + name + "' has a malformed header entry: " + e.what());
        }
        std::uint64_t count = 1;
        for (std::size_t s : t.shape) count *= s;
        if (nbytes != 8 * count) throw FormatError("tensor '" + name + "' nbytes does not match its shape");
        if (offset > payload.size() || nbytes > payload.size() - offset) {
            throw TruncatedError("tensor '" + name + "' extends past the end of the payload");
        }
        t.data.resize(count);
        for (std::uint64_t i = 0; i < count; ++i) {
            t.data[i] = std::bit_cast<double>(get_le(payload, offset + 8 * i, 8));
        }
        ranges.push_back({offset, offset + nbytes, name});
        out.emplace(name, std::move(t));
    }
    std::sort(ranges.begin(), ranges.end(), [](const Range& a, const Range& b) { return a.begin < b.begin; });
    std::size_t widest = 0;
    for (std::size_t i = 1; i < ranges.size(); ++i) {
        if (ranges[i - 1].end > ranges[widest].end) widest = i - 1;
        if (ranges[i].begin < ranges[widest].end && ranges[i].end > ranges[i].begin) {
            throw LayoutError("tensors '" + ranges[widest].name + "' and '" + ranges[i].name + "' overlap");
        }
    }
    return out;
}

TensorMap tensors_from_weights(const WeightSet& w) {
    TensorMap out;
    for (const auto& [name, m] : w.tensors()) {
        out.emplace(name, Tensor{{m->rows(), m->cols()}, std::vector<double>(m->values().begin(), m->values().end())});
    }
    return out;
}

WeightSet weights_from_tensors(const TensorMap& tensors, const ModelConfig& config) {
    WeightSet w = WeightSet::zeros(config);
    for (auto& [name, slot] : w.tensors()) {
        const auto it = tensors.find(name);
        if (it == tensors.end()) throw WeightShapeError("weight container lacks tensor '" + name + "'");
        const Tensor& t = it->second;
        const bool matrix_ok = t.shape.size() == 2 && t.shape[0] == slot->rows() && t.shape[1] == slot->cols();
        const bool vector_ok = t.shape.size() == 1 && slot->rows() == 1 && t.shape[0] == slot->cols();
        if (!matrix_ok && !vector_ok) {
            throw WeightShapeError("tensor '" + name + "' shape does not match the model config");
        }
        *slot = Matrix(slot->rows(), slot->cols(), t.data);
    }
    return w;
}

void save_weights(const WeightSet& w, const std::filesystem::path& path) {
    w.validate();
    write_bytes(path, encode_container(tensors_from_weights(w)));
}

WeightSet load_weights(const std::filesystem::path& path, const ModelConfig& config) {
    return weights_from_tensors(decode_container(read_bytes(path)), config);
}

Raster decode_ppm(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto token = [&] {
        skip_space();
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') t += static_cast<char>(bytes[pos++]);
        if (t.empty()) throw FormatError("PPM header is truncated");
        return t;
    };
    if (token() != "P6") throw FormatError("only binary P6 PPM is supported");
    const std::size_t w = parse_size(token());
    const std::size_t h = parse_size(token());
    const std::size_t maxval = parse_size(token());
    if (maxval != 255) throw FormatError("PPM maxval must be 255");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("PPM header must end in whitespace");
    ++pos;
    const std::size_t need = w * h * 3;
    if (bytes.size() - pos < need) throw FormatError("PPM pixel data is truncated");
    Raster img(h, w, 3);
    for (std::size_t i = 0; i < need; ++i) img.data[i] = static_cast<double>(bytes[pos + i]) / 255.0;
    return img;
}

Raster read_ppm(const std::filesystem::path& path) { return decode_ppm(read_bytes(path)); }

std::vector<std::uint8_t> encode_ppm(const Raster& img) {
    if (img.channels != 3) throw ShapeError("PPM output needs a 3-channel raster");
    const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + img.data.size());
    for (double v : img.data) {
        const double q = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
        out.push_back(static_cast<std::uint8_t>(q));
    }
    return out;
}

void write_ppm(const Raster& img, const std::filesystem::path& path) { write_bytes(path, encode_ppm(img)); }

Raster render_mask_overlay(const Raster& image, const MaskTrace& masks, std::size_t layer, std::size_t patch) {
    const MaskEntry* entry = masks.find(layer);
    if (entry == nullptr) throw UsageError("layer " + std::to_string(layer) + " is not a reorganization layer");
    if (patch == 0 || image.height % patch != 0 || image.width % patch != 0) {
        throw ShapeError("image size is not a multiple of the patch size");
    }
    std::set<GridCell> kept;
    for (const auto& o : entry->kept) {
        if (o.is_patch()) kept.insert(o.cell());
    }
    Raster out = image;
    for (std::size_t gr = 0; gr < image.height / patch; ++gr) {
        for (std::size_t gc = 0; gc < image.width / patch; ++gc) {
            if (kept.count(GridCell{gr, gc})) continue;
            for (std::size_t y = gr * patch; y < (gr + 1) * patch; ++y)
                for (std::size_t x = gc * patch; x < (gc + 1) * patch; ++x)
                    for (std::size_t c = 0; c < image.channels; ++c) out.at(y, x, c) *= kOverlayDarken;
        }
    }
    return out;
}

void emit_mask_overlay(const Raster& image, const MaskTrace& masks, std::size_t layer, std::size_t patch,
                       const std::filesystem::path& path) {
    write_ppm(render_mask_overlay(image, masks, layer, patch), path);
}

std::string sweep_csv(std::span<const SweepRow> rows) {
    std::string out = "config,resolution,kappa,locations,total_gmacs,reduction_pct\n";
    for (const auto& r : rows) {
        std::string locs;
        for (std::size_t i = 0; i < r.locations.size(); ++i) {
            if (i) locs += ';';
            locs += std::to_string(r.locations[i]);
        }
        out += r.config + "," + std::to_string(r.resolution) + "," + format_double(r.keep_rate) + "," + locs + "," +
               format_double(r.report.gmacs()) + "," + format_double(r.reduction_pct) + "\n";
    }
    return out;
}

void emit_csv(std::span<const SweepRow> rows, const std::filesystem::path& path) { write_text(path, sweep_csv(rows)); }

std::vector<CsvRecord> parse_sweep_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "config,resolution,kappa,locations,total_gmacs,reduction_pct") {
        throw FormatError("unexpected sweep CSV header");
    }
    std::vector<CsvRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 6) throw FormatError("sweep CSV row needs 6 fields");
        CsvRecord r;
        r.config = f[0];
        r.resolution = parse_size(f[1]);
        r.kappa = parse_double(f[2]);
        if (!f[3].empty()) {
            for (const auto& l : split(f[3], ';')) r.locations.push_back(parse_size(l));
        }
        r.total_gmacs = parse_double(f[4]);
        r.reduction_pct = parse_double(f[5]);
        out.push_back(std::move(r));
    }
    return out;
}

std::string trace_json(const AttentionTrace& attention, const MaskTrace& masks) {
    ordered_json doc;
    doc["format"] = "evit-trace";
    doc["version"] = 1;
    ordered_json layers = ordered_json::array();
    for (const auto& l : attention.layers) {
        ordered_json j;
        j["layer"] = l.layer;
        j["tokens"] = l.cls_row.size();
        j["cls_attention"] = l.cls_row;
        ordered_json origins = ordered_json::array();
        for (const auto& o : l.origins) origins.push_back(origin_json(o));
        j["origins"] = origins;
        layers.push_back(std::move(j));
    }
    doc["attention"] = std::move(layers);
    ordered_json entries = ordered_json::array();
    for (const auto& e : masks.entries) {
        ordered_json j;
        j["layer"] = e.layer;
        j["keep_rate"] = e.keep_rate;
        j["fusion"] = e.fusion;
        j["scores"] = e.scores;
        j["topk_idx"] = e.topk_idx;
        ordered_json kept = ordered_json::array(), fused = ordered_json::array();
        for (const auto& o : e.kept) kept.push_back(origin_json(o));
        for (const auto& o : e.fused) fused.push_back(origin_json(o));
        j["kept"] = std::move(kept);
        j["fused"] = std::move(fused);
        entries.push_back(std::move(j));
    }
    doc["masks"] = std::move(entries);
    return doc.dump(1) + "\n";
}

void emit_trace_json(const AttentionTrace& attention, const MaskTrace& masks, const std::filesystem::path& path) {
    write_text(path, trace_json(attention, masks));
}

}  // namespace evit::io
