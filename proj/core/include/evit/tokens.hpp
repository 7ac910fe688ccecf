#pragma once

#include <compare>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "evit/kernels.hpp"

namespace evit {

struct GridCell {
    std::size_t row = 0;
    std::size_t col = 0;

    friend auto operator<=>(const GridCell&, const GridCell&) = default;
};

// Where a token came from: the class token, one patch-grid cell, or a fusion of several cells.
class Origin {
public:
    enum class Kind { Cls, Patch, Fused };

    static Origin cls() { return Origin(Kind::Cls, {}); }
    static Origin patch(std::size_t row, std::size_t col) { return Origin(Kind::Patch, {GridCell{row, col}}); }
    // Constituents are flattened to grid cells, sorted and de-duplicated. Must be non-empty.
    static Origin fused(std::vector<GridCell> cells);

    Kind kind() const { return kind_; }
    bool is_cls() const { return kind_ == Kind::Cls; }
    bool is_patch() const { return kind_ == Kind::Patch; }
    bool is_fused() const { return kind_ == Kind::Fused; }

    // Patch origin: its single cell. Fused: every constituent cell. CLS: none.
    const std::vector<GridCell>& cells() const { return cells_; }
    const GridCell& cell() const;

    std::string to_string() const;

    friend bool operator==(const Origin&, const Origin&) = default;

private:
    Origin(Kind kind, std::vector<GridCell> cells) : kind_(kind), cells_(std::move(cells)) {}

    Kind kind_;
    std::vector<GridCell> cells_;
};

// The live token set flowing through the encoder. Row 0 is always the class token.
struct TokenSequence {
    Matrix tokens;
    std::vector<Origin> origins;

    std::size_t size() const { return tokens.rows(); }
    std::size_t dim() const { return tokens.cols(); }
    std::size_t image_tokens() const { return size() == 0 ? 0 : size() - 1; }

    // Throws ShapeError / UsageError when the invariants above are broken.
    void validate() const;
};

// Cells covered by a list of origins (patches and fused constituents), sorted, unique.
std::vector<GridCell> covered_cells(std::span<const Origin> origins);

}  // namespace evit
