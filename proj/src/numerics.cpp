#include "kvprune/numerics.hpp"

#include "kvprune/errors.hpp"

#include "eigen_view.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace kvprune {

namespace {

using detail::view;

[[noreturn]] void shape_mismatch(const char * op, const Matrix & a, const Matrix & b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape_str() + " and " + b.shape_str());
}

} // namespace

Matrix::Matrix(size_t rows, size_t cols, std::vector<double> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw DimensionError("matrix " + shape_str() + " given " + std::to_string(data_.size()) + " values");
    }
}

Matrix Matrix::identity(size_t n) {
    Matrix m(n, n);
    for (size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>> & rows) {
    const size_t r = rows.size();
    const size_t c = r ? rows[0].size() : 0;
    Matrix m(r, c);
    for (size_t i = 0; i < r; ++i) {
        if (rows[i].size() != c) {
            throw DimensionError("ragged row " + std::to_string(i));
        }
        std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    }
    return m;
}

std::string Matrix::shape_str() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Matrix & Matrix::operator+=(const Matrix & other) {
    if (rows_ != other.rows_ || cols_ != other.cols_) {
        shape_mismatch("add", *this, other);
    }
    for (size_t i = 0; i < data_.size(); ++i) {
        data_[i] += other.data_[i];
    }
    return *this;
}

Matrix & Matrix::operator*=(double s) {
    for (double & v : data_) {
        v *= s;
    }
    return *this;
}

Matrix matmul(const Matrix & a, const Matrix & b) {
    if (a.cols() != b.rows()) {
        shape_mismatch("matmul", a, b);
    }
    Matrix out(a.rows(), b.cols());
    if (a.cols() == 0) {
        return out;
    }
    view(out).noalias() = view(a) * view(b);
    return out;
}

Matrix matmul_nt(const Matrix & a, const Matrix & b) {
    if (a.cols() != b.cols()) {
        shape_mismatch("matmul_nt", a, b);
    }
    Matrix out(a.rows(), b.rows());
    if (a.cols() == 0) {
        return out;
    }
    view(out).noalias() = view(a) * view(b).transpose();
    return out;
}

Matrix matmul_tn(const Matrix & a, const Matrix & b) {
    Matrix out(a.cols(), b.cols());
    matmul_tn_acc(a, b, out);
    return out;
}

void matmul_tn_acc(const Matrix & a, const Matrix & b, Matrix & out) {
    if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
        shape_mismatch("matmul_tn", a, b);
    }
    if (a.rows() == 0 || out.empty()) {
        return;
    }
    view(out).noalias() += view(a).transpose() * view(b);
}

Matrix transpose(const Matrix & m) {
    Matrix out(m.cols(), m.rows());
    for (size_t r = 0; r < m.rows(); ++r) {
        for (size_t c = 0; c < m.cols(); ++c) {
            out(c, r) = m(r, c);
        }
    }
    return out;
}

void softmax_inplace(std::span<double> row) {
    if (row.empty()) {
        return;
    }
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double & v : row) {
        v = std::exp(v - mx);
        sum += v;
    }
    const double inv = 1.0 / sum;
    for (double & v : row) {
        v *= inv;
    }
}

Matrix softmax_rows(const Matrix & m) {
    Matrix out = m;
    for (size_t r = 0; r < out.rows(); ++r) {
        softmax_inplace(out.row(r));
    }
    return out;
}

double cross_entropy(const Matrix & logits, std::span<const int> targets) {
    if (logits.rows() != targets.size()) {
        throw DimensionError("cross_entropy: " + std::to_string(logits.rows()) + " logit rows vs " +
                             std::to_string(targets.size()) + " targets");
    }
    if (targets.empty()) {
        throw DimensionError("cross_entropy: no positions");
    }
    double total = 0.0;
    for (size_t r = 0; r < logits.rows(); ++r) {
        const int t = targets[r];
        if (t < 0 || (size_t) t >= logits.cols()) {
            throw IndexError("target " + std::to_string(t) + " outside vocab of " + std::to_string(logits.cols()));
        }
        auto row = logits.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (double v : row) {
            sum += std::exp(v - mx);
        }
        total += std::log(sum) + mx - row[t];
    }
    return total / (double) logits.rows();
}

double max_abs_diff(const Matrix & a, const Matrix & b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        shape_mismatch("max_abs_diff", a, b);
    }
    double d = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        d = std::max(d, std::abs(a.values()[i] - b.values()[i]));
    }
    return d;
}

uint64_t splitmix64_mix(uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Rng::Rng(uint64_t seed, uint64_t stream)
    : seed_(seed), stream_(stream), state_(splitmix64_mix(seed) ^ splitmix64_mix(stream + 0x632be59bd9b4e019ULL)) {}

uint64_t Rng::next_u64() noexcept {
    state_ += 0x9e3779b97f4a7c15ULL;
    return splitmix64_mix(state_);
}

double Rng::uniform() noexcept { return (double) (next_u64() >> 11) * 0x1.0p-53; }

uint64_t Rng::below(uint64_t n) noexcept {
    return (uint64_t) (((unsigned __int128) next_u64() * n) >> 64);
}

double Rng::normal() noexcept {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= std::numeric_limits<double>::min()) {
        u1 = uniform();
    }
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

void configure_process_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

} // namespace kvprune
