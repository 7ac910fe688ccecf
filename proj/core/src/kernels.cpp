#include "evit/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "evit/error.hpp"

namespace evit {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

thread_local MacCounter* active_counter = nullptr;

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged initializer for Matrix");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

Matrix Matrix::row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

MacCounter::MacCounter() : parent_(active_counter) { active_counter = this; }

MacCounter::~MacCounter() { active_counter = parent_; }

void record_macs(std::uint64_t macs) {
    for (MacCounter* c = active_counter; c != nullptr; c = c->parent_) c->count_ += macs;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_str(a) + " x " + shape_str(b));
    }
    const std::size_t n = a.rows();
    const std::size_t inner = a.cols();
    const std::size_t m = b.cols();
    Matrix c(n, m);
    // i-k-j order: every c(i, j) accumulates its k terms in ascending k, same as the textbook loop.
    for (std::size_t i = 0; i < n; ++i) {
        double* crow = c.row(i).data();
        const double* arow = a.row(i).data();
        for (std::size_t k = 0; k < inner; ++k) {
            const double aik = arow[k];
            const double* brow = b.row(k).data();
            for (std::size_t j = 0; j < m; ++j) crow[j] += aik * brow[j];
        }
    }
    record_macs(static_cast<std::uint64_t>(n) * inner * m);
    return c;
}

Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
    return t;
}

Matrix softmax_rows(const Matrix& m) {
    if (!m.all_finite()) throw NumericError("softmax_rows: non-finite input");
    Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto in = m.row(r);
        auto dst = out.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double sum = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            dst[c] = std::exp(in[c] - mx);
            sum += dst[c];
        }
        for (double& v : dst) v /= sum;
    }
    return out;
}

Matrix layernorm(const Matrix& x, std::span<const double> gamma, std::span<const double> beta, double eps) {
    if (gamma.size() != x.cols() || beta.size() != x.cols()) {
        throw ShapeError("layernorm: affine length does not match " + shape_str(x));
    }
    const double width = static_cast<double>(x.cols());
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto dst = out.row(r);
        double mean = 0.0;
        for (double v : in) mean += v;
        mean /= width;
        double var = 0.0;
        for (double v : in) var += (v - mean) * (v - mean);
        var /= width;
        const double rstd = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < in.size(); ++c) dst[c] = (in[c] - mean) * rstd * gamma[c] + beta[c];
    }
    return out;
}

double gelu(double x) { return 0.5 * x * std::erfc(-x / std::sqrt(2.0)); }

Matrix gelu(const Matrix& x) {
    if (!x.all_finite()) throw NumericError("gelu: non-finite input");
    Matrix out = x;
    for (double& v : out.values()) v = gelu(v);
    return out;
}

std::vector<std::size_t> argsort_desc(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    return idx;
}

void add_inplace(Matrix& dst, const Matrix& src) {
    if (dst.rows() != src.rows() || dst.cols() != src.cols()) {
        throw ShapeError("add: " + shape_str(dst) + " vs " + shape_str(src));
    }
    auto d = dst.values();
    auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void add_row_broadcast(Matrix& dst, std::span<const double> bias) {
    if (bias.size() != dst.cols()) throw ShapeError("bias length does not match " + shape_str(dst));
    for (std::size_t r = 0; r < dst.rows(); ++r) {
        auto row = dst.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
    }
}

Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t end) {
    if (begin > end || end > m.rows()) throw ShapeError("slice_rows out of range for " + shape_str(m));
    Matrix out(end - begin, m.cols());
    std::copy(m.values().begin() + static_cast<std::ptrdiff_t>(begin * m.cols()),
              m.values().begin() + static_cast<std::ptrdiff_t>(end * m.cols()), out.values().begin());
    return out;
}

Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t end) {
    if (begin > end || end > m.cols()) throw ShapeError("slice_cols out of range for " + shape_str(m));
    Matrix out(m.rows(), end - begin);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto src = m.row(r).subspan(begin, end - begin);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
    Matrix out(idx.size(), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= m.rows()) throw ShapeError("gather_rows index out of range for " + shape_str(m));
        auto src = m.row(idx[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

Matrix concat_rows(std::span<const Matrix> parts) {
    if (parts.empty()) return {};
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
        rows += p.rows();
    }
    Matrix out(rows, cols);
    auto dst = out.values().begin();
    for (const auto& p : parts) dst = std::copy(p.values().begin(), p.values().end(), dst);
    return out;
}

Matrix concat_cols(std::span<const Matrix> parts) {
    if (parts.empty()) return {};
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        auto dst = out.row(r).begin();
        for (const auto& p : parts) dst = std::copy(p.row(r).begin(), p.row(r).end(), dst);
    }
    return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("max_abs_diff shape mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
    return worst;
}

double cubic_weight(double t) {
    constexpr double a = -0.5;
    t = std::abs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
    return 0.0;
}

namespace {

struct Taps {
    std::size_t index[4];
    double weight[4];
};

// Source taps for one output coordinate along an axis of length in_len.
Taps taps_for(std::size_t dst, std::size_t in_len, std::size_t out_len) {
    const double scale = static_cast<double>(in_len) / static_cast<double>(out_len);
    const double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
    const double base = std::floor(src);
    const double frac = src - base;
    Taps t{};
    const auto last = static_cast<long long>(in_len) - 1;
    for (int k = 0; k < 4; ++k) {
        const long long raw = static_cast<long long>(base) + k - 1;
        t.index[k] = static_cast<std::size_t>(std::clamp(raw, 0LL, last));
        t.weight[k] = cubic_weight(frac - (k - 1));
    }
    return t;
}

// Weighted sum written relative to the tap at floor(src), so constant inputs come back exactly.
double apply_taps(const Taps& t, auto&& sample) {
    const double anchor = sample(t.index[1]);
    double acc = 0.0;
    for (int k = 0; k < 4; ++k) acc += t.weight[k] * (sample(t.index[k]) - anchor);
    return anchor + acc;
}

}  // namespace

Raster bicubic_resize(const Raster& img, std::size_t out_h, std::size_t out_w) {
    if (out_h == 0 || out_w == 0) throw ShapeError("bicubic_resize: zero output size");
    if (img.height < 2 || img.width < 2) throw ShapeError("bicubic_resize: input must be at least 2x2");
    if (img.data.size() != img.height * img.width * img.channels) throw ShapeError("bicubic_resize: bad raster");

    const std::size_t ch = img.channels;
    Raster horiz(img.height, out_w, ch);
    for (std::size_t x = 0; x < out_w; ++x) {
        const Taps t = taps_for(x, img.width, out_w);
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t c = 0; c < ch; ++c)
                horiz.at(y, x, c) = apply_taps(t, [&](std::size_t sx) { return img.at(y, sx, c); });
    }
    Raster out(out_h, out_w, ch);
    for (std::size_t y = 0; y < out_h; ++y) {
        const Taps t = taps_for(y, img.height, out_h);
        for (std::size_t x = 0; x < out_w; ++x)
            for (std::size_t c = 0; c < ch; ++c)
                out.at(y, x, c) = apply_taps(t, [&](std::size_t sy) { return horiz.at(sy, x, c); });
    }
    return out;
}

}  // namespace evit
