#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace kvprune {

// Dense row-major matrix of 64-bit floats.
class Matrix {
public:
    Matrix() = default;
    Matrix(size_t rows, size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(size_t rows, size_t cols, std::vector<double> data);

    static Matrix identity(size_t n);
    static Matrix from_rows(const std::vector<std::vector<double>> & rows);

    size_t rows() const noexcept { return rows_; }
    size_t cols() const noexcept { return cols_; }
    size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double & operator()(size_t r, size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(size_t r, size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::vector<double> & values() noexcept { return data_; }
    const std::vector<double> & values() const noexcept { return data_; }
    double * data() noexcept { return data_.data(); }
    const double * data() const noexcept { return data_.data(); }

    std::string shape_str() const;
    bool all_finite() const noexcept;

    void fill(double v);
    Matrix & operator+=(const Matrix & other);
    Matrix & operator*=(double s);

    friend bool operator==(const Matrix & a, const Matrix & b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    size_t rows_ = 0;
    size_t cols_ = 0;
    std::vector<double> data_;
};

// a · b
Matrix matmul(const Matrix & a, const Matrix & b);
// a · bᵀ
Matrix matmul_nt(const Matrix & a, const Matrix & b);
// aᵀ · b
Matrix matmul_tn(const Matrix & a, const Matrix & b);
// out += aᵀ · b
void matmul_tn_acc(const Matrix & a, const Matrix & b, Matrix & out);

Matrix transpose(const Matrix & m);

// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix & m);
void softmax_inplace(std::span<double> row);

// Mean over rows of -ln softmax(logits_row)[target], in nats.
double cross_entropy(const Matrix & logits, std::span<const int> targets);

double max_abs_diff(const Matrix & a, const Matrix & b);

// SplitMix64 stream: state advances by the golden gamma and each output is the
// finalizer of the state. A (seed, stream) pair selects an independent stream.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0);

    uint64_t next_u64() noexcept;
    // Uniform in [0, 1) with 53 bits.
    double uniform() noexcept;
    // Uniform integer in [0, n). n must be > 0.
    uint64_t below(uint64_t n) noexcept;
    // Standard normal via Box-Muller; the spare value is cached.
    double normal() noexcept;

    uint64_t seed() const noexcept { return seed_; }
    uint64_t stream() const noexcept { return stream_; }

private:
    uint64_t seed_;
    uint64_t stream_;
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

uint64_t splitmix64_mix(uint64_t z) noexcept;

// Keeps large matrix buffers in the heap instead of a fresh mmap per allocation
// (glibc only; no-op elsewhere). Call once from main.
void configure_process_allocator();

} // namespace kvprune
