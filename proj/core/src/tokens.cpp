#include "evit/tokens.hpp"

#include <algorithm>

#include "evit/error.hpp"

namespace evit {

Origin Origin::fused(std::vector<GridCell> cells) {
    if (cells.empty()) throw UsageError("fused origin needs at least one constituent");
    std::sort(cells.begin(), cells.end());
    cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
    return Origin(Kind::Fused, std::move(cells));
}

const GridCell& Origin::cell() const {
    if (kind_ != Kind::Patch) throw UsageError("Origin::cell() on a non-patch origin");
    return cells_.front();
}

std::string Origin::to_string() const {
    switch (kind_) {
        case Kind::Cls:
            return "cls";
        case Kind::Patch:
            return "p(" + std::to_string(cells_[0].row) + "," + std::to_string(cells_[0].col) + ")";
        case Kind::Fused:
            return "fused[" + std::to_string(cells_.size()) + "]";
    }
    return {};
}

void TokenSequence::validate() const {
    if (origins.size() != tokens.rows()) {
        throw ShapeError("token sequence has " + std::to_string(tokens.rows()) + " rows but " +
                         std::to_string(origins.size()) + " origins");
    }
    if (origins.empty() || !origins.front().is_cls()) throw UsageError("token 0 must be the class token");
    for (std::size_t i = 1; i < origins.size(); ++i) {
        if (origins[i].is_cls()) throw UsageError("class token may only appear at index 0");
    }
}

std::vector<GridCell> covered_cells(std::span<const Origin> origins) {
    std::vector<GridCell> cells;
    for (const auto& o : origins) cells.insert(cells.end(), o.cells().begin(), o.cells().end());
    std::sort(cells.begin(), cells.end());
    cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
    return cells;
}

}  // namespace evit
