#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace evit {

inline constexpr double kLayerNormEps = 1e-6;

// Dense row-major matrix of doubles. Vectors are 1 x n matrices.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix row_vector(std::span<const double> values);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    bool all_finite() const;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Plain C = A * B. The k-loop order is fixed so results are bit-reproducible.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix softmax_rows(const Matrix& m);
Matrix layernorm(const Matrix& x, std::span<const double> gamma, std::span<const double> beta,
                 double eps = kLayerNormEps);
double gelu(double x);
Matrix gelu(const Matrix& x);

// Indices that sort v in descending order. Ties keep the lower index first.
std::vector<std::size_t> argsort_desc(std::span<const double> v);

// Elementwise helpers used by the encoder.
void add_inplace(Matrix& dst, const Matrix& src);
void add_row_broadcast(Matrix& dst, std::span<const double> bias);
Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t end);
Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t end);
Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx);
Matrix concat_rows(std::span<const Matrix> parts);
Matrix concat_cols(std::span<const Matrix> parts);
double max_abs_diff(const Matrix& a, const Matrix& b);

// Counts multiply-accumulates issued by matmul() on the current thread while alive.
// Scopes nest; every live counter on the thread sees each product.
class MacCounter {
public:
    MacCounter();
    ~MacCounter();
    MacCounter(const MacCounter&) = delete;
    MacCounter& operator=(const MacCounter&) = delete;

    std::uint64_t count() const { return count_; }

private:
    friend void record_macs(std::uint64_t);
    std::uint64_t count_ = 0;
    MacCounter* parent_ = nullptr;
};

void record_macs(std::uint64_t macs);

// H x W raster with interleaved channels, values nominally in [0, 1].
struct Raster {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<double> data;

    Raster() = default;
    Raster(std::size_t h, std::size_t w, std::size_t c = 3, double fill = 0.0)
        : height(h), width(w), channels(c), data(h * w * c, fill) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * channels + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * channels + c]; }

    friend bool operator==(const Raster&, const Raster&) = default;
};

// Catmull-Rom cubic kernel weight (a = -0.5).
double cubic_weight(double t);

// Separable bicubic resize, half-pixel centers, edge-clamped taps. Works for any channel count.
Raster bicubic_resize(const Raster& img, std::size_t out_h, std::size_t out_w);

}  // namespace evit
