#include "patchkit/errors.hpp"
#include "patchkit/kernels.hpp"
#include "patchkit/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdlib>

using namespace patchkit;

namespace {

Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    Matrix m(static_cast<int>(rows.size()), static_cast<int>(rows.begin()->size()));
    int r = 0;
    for (const auto& row : rows) {
        int c = 0;
        for (const float v : row) m.at(r, c++) = v;
        ++r;
    }
    return m;
}

Matrix random_matrix(int rows, int cols, Rng& rng, double scale = 1.0) {
    Matrix m(rows, cols);
    for (float& v : m.data) v = static_cast<float>((rng.next_double() * 2.0 - 1.0) * scale);
    return m;
}

// Reference route: naive triple loop with the same f64 k-order.
Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k)
                acc += static_cast<double>(a.at(i, k)) * b.at(k, j);
            out.at(i, j) = static_cast<float>(acc);
        }
    return out;
}

Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0f;
    return m;
}

} // namespace

TEST_SUITE("kernels") {

TEST_CASE("matmul hand-checked products") {
    const Matrix a = from_rows({{1, 0}, {0, 1}});
    const Matrix b = from_rows({{3, 4}, {5, 6}});
    const Matrix ab = matmul(a, b);
    CHECK(ab.data == b.data);

    const Matrix r = matmul(from_rows({{1, 2}}), from_rows({{3}, {4}}));
    CHECK(r.rows == 1);
    CHECK(r.cols == 1);
    CHECK(r.at(0, 0) == 11.0f);
}

TEST_CASE("matmul identity is exact both sides") {
    Rng rng(11);
    const Matrix a = random_matrix(6, 6, rng, 3.0);
    CHECK(matmul(identity(6), a).data == a.data);
    CHECK(matmul(a, identity(6)).data == a.data);
}

TEST_CASE("matmul matches the naive triple-loop reference") {
    Rng rng(7);
    const Matrix a = random_matrix(7, 5, rng);
    const Matrix b = random_matrix(5, 3, rng);
    const Matrix got = matmul(a, b);
    const Matrix want = naive_matmul(a, b);
    for (size_t i = 0; i < got.data.size(); ++i) CHECK(got.data[i] == want.data[i]);
}

TEST_CASE("matmul_nt equals matmul against the explicit transpose") {
    Rng rng(8);
    const Matrix a = random_matrix(4, 6, rng);
    const Matrix b = random_matrix(9, 6, rng);
    Matrix bt(6, 9);
    for (int r = 0; r < b.rows; ++r)
        for (int c = 0; c < b.cols; ++c) bt.at(c, r) = b.at(r, c);
    const Matrix got = matmul_nt(a, b);
    const Matrix want = matmul(a, bt);
    for (size_t i = 0; i < got.data.size(); ++i)
        CHECK(got.data[i] == doctest::Approx(want.data[i]).epsilon(1e-6));
}

TEST_CASE("matmul dimension mismatch names both shapes") {
    const Matrix a(2, 3);
    const Matrix b(4, 2);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("2x3"), ShapeError);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("4x2"), ShapeError);
}

TEST_CASE("matmul is invariant to the thread count") {
    Rng rng(21);
    const Matrix a = random_matrix(33, 17, rng);
    const Matrix b = random_matrix(17, 29, rng);

    setenv("PATCHKIT_THREADS", "1", 1);
    const Matrix serial = matmul(a, b);
    setenv("PATCHKIT_THREADS", "4", 1);
    const Matrix parallel = matmul(a, b);
    unsetenv("PATCHKIT_THREADS");
    CHECK(serial.data == parallel.data);
}

TEST_CASE("softmax rows: symmetry, stability, causal mask") {
    const Matrix sym = softmax_rows(from_rows({{0, 0}}));
    CHECK(sym.at(0, 0) == doctest::Approx(0.5));
    CHECK(sym.at(0, 1) == doctest::Approx(0.5));

    const Matrix big = softmax_rows(from_rows({{1000, 0}}));
    CHECK(big.at(0, 0) == doctest::Approx(1.0));
    CHECK(big.at(0, 1) == doctest::Approx(0.0));

    const Matrix masked = softmax_rows(Matrix(3, 3), /*causal_mask=*/true);
    CHECK(masked.at(0, 0) == 1.0f);
    CHECK(masked.at(0, 1) == 0.0f);
    CHECK(masked.at(0, 2) == 0.0f);
    CHECK(masked.at(1, 0) == doctest::Approx(0.5));
    CHECK(masked.at(1, 1) == doctest::Approx(0.5));
    CHECK(masked.at(1, 2) == 0.0f);
    CHECK(masked.at(2, 0) == doctest::Approx(1.0 / 3));
    CHECK(masked.at(2, 2) == doctest::Approx(1.0 / 3));
}

TEST_CASE("softmax rows sum to one for magnitudes up to 1e4") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix m = random_matrix(4, 37, rng, 1e4);
        const Matrix s = softmax_rows(m, trial % 2 == 0);
        for (int r = 0; r < s.rows; ++r) {
            double sum = 0.0;
            for (int c = 0; c < s.cols; ++c) {
                sum += s.at(r, c);
                CHECK(std::isfinite(s.at(r, c)));
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
}

TEST_CASE("layernorm collapses constants to beta") {
    const std::vector<float> x = {1, 1, 1};
    const std::vector<float> gamma = {1, 1, 1};
    const std::vector<float> beta = {0.5f, -0.5f, 0.0f};
    std::vector<float> out(3);
    layernorm_row(x, gamma, beta, 1e-5f, out);
    CHECK(out[0] == doctest::Approx(0.5));
    CHECK(out[1] == doctest::Approx(-0.5));
    CHECK(out[2] == doctest::Approx(0.0));
}

TEST_CASE("layernorm leaves a standardized vector alone at eps=0") {
    const std::vector<float> x = {1, -1};
    const std::vector<float> ones = {1, 1};
    const std::vector<float> zeros = {0, 0};
    std::vector<float> out(2);
    layernorm_row(x, ones, zeros, 0.0f, out);
    CHECK(out[0] == doctest::Approx(1.0));
    CHECK(out[1] == doctest::Approx(-1.0));
}

TEST_CASE("layernorm matches the direct formula on random input") {
    Rng rng(5);
    const int n = 24;
    std::vector<float> x(n), gamma(n), beta(n), out(n);
    for (int i = 0; i < n; ++i) {
        x[i] = static_cast<float>(rng.next_double() * 4 - 2);
        gamma[i] = static_cast<float>(rng.next_double() + 0.5);
        beta[i] = static_cast<float>(rng.next_double() - 0.5);
    }
    const float eps = 1e-5f;
    layernorm_row(x, gamma, beta, eps, out);

    double mean = 0;
    for (const float v : x) mean += v;
    mean /= n;
    double var = 0;
    for (const float v : x) var += (v - mean) * (v - mean);
    var /= n;
    for (int i = 0; i < n; ++i) {
        const double want = gamma[i] * (x[i] - mean) / std::sqrt(var + eps) + beta[i];
        CHECK(out[i] == doctest::Approx(want).epsilon(1e-6));
    }
}

TEST_CASE("layernorm output has mean 0 and unit variance for gamma=1") {
    Rng rng(6);
    const int n = 64;
    std::vector<float> x(n), ones(n, 1.0f), zeros(n, 0.0f), out(n);
    for (int i = 0; i < n; ++i) x[i] = static_cast<float>(rng.next_double() * 10 - 5);
    layernorm_row(x, ones, zeros, 1e-12f, out);
    double mean = 0, var = 0;
    for (const float v : out) mean += v;
    mean /= n;
    for (const float v : out) var += (v - mean) * (v - mean);
    var /= n;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("gelu fixed points and asymptotes") {
    CHECK(gelu(0.0f) == 0.0f);
    CHECK(gelu(20.0f) == doctest::Approx(20.0f));
    CHECK(gelu(-20.0f) == doctest::Approx(0.0f));

    // Direct formula evaluation as the reference.
    const double x = 1.0;
    const double want =
        0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
    CHECK(gelu(1.0f) == doctest::Approx(want).epsilon(1e-6));
}

TEST_CASE("add_bias_rows validates the bias length") {
    Matrix m(2, 3);
    const std::vector<float> bias = {1, 2};
    CHECK_THROWS_AS(add_bias_rows(m, bias), ShapeError);
}

} // TEST_SUITE
