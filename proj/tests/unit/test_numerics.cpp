#include "helpers.hpp"

#include "kvprune/errors.hpp"

#include <doctest.h>

#include <cmath>

using namespace kvprune;
using kvtest::random_matrix;

namespace {

Matrix naive_matmul(const Matrix & a, const Matrix & b) {
    Matrix out(a.rows(), b.cols());
    for (size_t i = 0; i < a.rows(); ++i) {
        for (size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (size_t k = 0; k < a.cols(); ++k) {
                s += a(i, k) * b(k, j);
            }
            out(i, j) = s;
        }
    }
    return out;
}

} // namespace

TEST_CASE("matmul identity and hand examples") {
    Rng rng(3);
    const Matrix m = random_matrix(2, 3, rng);
    CHECK(matmul(Matrix::identity(2), m) == m);
    const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    const Matrix b = Matrix::from_rows({{1}, {1}});
    CHECK(matmul(a, b) == Matrix::from_rows({{3}, {7}}));
}

TEST_CASE("matmul matches naive loops") {
    Rng rng(11);
    const Matrix a = random_matrix(7, 5, rng), b = random_matrix(5, 3, rng);
    CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) <= 1e-12);
    CHECK(max_abs_diff(matmul_nt(a, transpose(b)), naive_matmul(a, b)) <= 1e-12);
    CHECK(max_abs_diff(matmul_tn(transpose(a), b), naive_matmul(a, b)) <= 1e-12);
}

TEST_CASE("matmul associativity on random shapes") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const size_t m = 1 + rng.below(6), n = 1 + rng.below(6), p = 1 + rng.below(6), q = 1 + rng.below(6);
        const Matrix a = random_matrix(m, n, rng), b = random_matrix(n, p, rng), c = random_matrix(p, q, rng);
        const Matrix left = matmul(matmul(a, b), c);
        const Matrix right = naive_matmul(a, naive_matmul(b, c));
        for (size_t i = 0; i < left.size(); ++i) {
            CHECK(kvtest::rel_err(left.values()[i], right.values()[i], 1.0) <= 1e-10);
        }
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    try {
        matmul(Matrix(2, 3), Matrix(2, 3));
        FAIL("expected DimensionError");
    } catch (const DimensionError & e) {
        const std::string msg = e.what();
        CHECK(msg.find("(2x3)") != std::string::npos);
        CHECK(e.exit_code() == 4);
    }
}

TEST_CASE("matmul with empty inner dimension is zero") {
    CHECK(matmul(Matrix(2, 0), Matrix(0, 3)) == Matrix(2, 3));
}

TEST_CASE("softmax examples") {
    Matrix m = Matrix::from_rows({{0, 0, 0}, {1000, 0, 0}, {std::log(1.0), std::log(3.0), -1e300}});
    const Matrix s = softmax_rows(m);
    for (size_t j = 0; j < 3; ++j) {
        CHECK(s(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }
    CHECK(s(1, 0) == doctest::Approx(1.0));
    CHECK(s(1, 1) >= 0.0);
    CHECK(s.all_finite());
    CHECK(s(2, 0) == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(s(2, 1) == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one on 1000 random rows") {
    Rng rng(17);
    Matrix m = random_matrix(1000, 9, rng, 1e3);
    const Matrix s = softmax_rows(m);
    for (size_t r = 0; r < s.rows(); ++r) {
        double sum = 0.0;
        for (double v : s.row(r)) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("cross entropy examples") {
    CHECK(cross_entropy(Matrix(1, 4, 0.7), std::vector<int>{2}) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
    // -ln sigma(20) = ln(1 + e^-20)
    const double ce = cross_entropy(Matrix::from_rows({{10, -10}}), std::vector<int>{0});
    CHECK(ce == doctest::Approx(2.061153620314381e-09).epsilon(1e-6));
    const Matrix two = Matrix::from_rows({{std::log(0.5), std::log(0.5)},
                                          {std::log(0.125), std::log(0.875)}});
    CHECK(cross_entropy(two, std::vector<int>{0, 0}) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("cross entropy errors") {
    CHECK_THROWS_AS(cross_entropy(Matrix(1, 4), std::vector<int>{4}), IndexError);
    CHECK_THROWS_AS(cross_entropy(Matrix(1, 4), std::vector<int>{-1}), IndexError);
    CHECK_THROWS_AS(cross_entropy(Matrix(2, 4), std::vector<int>{1}), DimensionError);
}

TEST_CASE("rng golden sequence") {
    // SplitMix64 finalizer over a gamma-stepped state; stream keys the initial state.
    Rng a(0, 0);
    CHECK(a.next_u64() == 0xf5dd724ff3b8a536ULL);
    CHECK(a.next_u64() == 0x7c6ede0099d1dac1ULL);
    CHECK(a.next_u64() == 0x09f2c7599678a38eULL);
    CHECK(a.next_u64() == 0x7f0826b1a0a9165dULL);
    Rng b(42, 7);
    CHECK(b.next_u64() == 0x247de8ddd1a6431fULL);
    CHECK(b.next_u64() == 0x4fac09bf6c2d6a0cULL);
    CHECK(b.next_u64() == 0x6353b16764e573b5ULL);
    CHECK(b.next_u64() == 0x9b73df68d600f736ULL);
    // the finalizer itself is the reference SplitMix64 mix
    CHECK(splitmix64_mix(0x9e3779b97f4a7c15ULL) == 0xe220a8397b1dcdafULL);
}

TEST_CASE("rng streams and ranges") {
    Rng a(9, 1), b(9, 1), c(9, 2);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const uint64_t x = a.next_u64();
        CHECK(x == b.next_u64());
        differs |= x != c.next_u64();
    }
    CHECK(differs);
    Rng r(1);
    double mean = 0.0, sq = 0.0;
    for (int i = 0; i < 20000; ++i) {
        const double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(r.below(7) < 7);
        const double z = r.normal();
        mean += z;
        sq += z * z;
    }
    CHECK(std::abs(mean / 20000) < 0.05);
    CHECK(std::abs(sq / 20000 - 1.0) < 0.05);
}
