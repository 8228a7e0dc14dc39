#pragma once

#include <functional>
#include <span>
#include <vector>

namespace patchkit {

// Dense row-major float32 matrix. The whole forward pass runs on this type;
// dot products accumulate in float64 so that patched-vs-clean comparisons are
// free of summation-order noise.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {}

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    std::span<float> row(int r) { return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }
    std::span<const float> row(int r) const {
        return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
    }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// out = a * b. Requires a.cols == b.rows; throws ShapeError naming both
// shapes otherwise. Accumulation is float64, k-sequential per output element;
// results are identical for any thread count.
Matrix matmul(const Matrix& a, const Matrix& b);
void matmul_into(const Matrix& a, const Matrix& b, Matrix& out);

// out = a * b^T (b stored row-major as [n x k]). Used for unembedding against
// the embedding table without materialising a transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
void matmul_nt_into(const Matrix& a, const Matrix& b, Matrix& out);

// Row-wise softmax with max-subtraction. With `causal_mask`, entries at
// column > row are exactly 0 and each row normalises over its prefix.
Matrix softmax_rows(const Matrix& m, bool causal_mask = false);
void softmax_row(std::span<const float> in, std::span<float> out);

// out = gamma * (x - mean) / sqrt(var + eps) + beta, population variance.
void layernorm_row(std::span<const float> x, std::span<const float> gamma,
                   std::span<const float> beta, float eps, std::span<float> out);
Matrix layernorm(const Matrix& x, std::span<const float> gamma, std::span<const float> beta,
                 float eps);

// tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
float gelu(float x);
void gelu_inplace(std::span<float> x);

// Adds `bias` to every row of `m` (bias.size() == m.cols).
void add_bias_rows(Matrix& m, std::span<const float> bias);

// Worker count for row-parallel kernels: PATCHKIT_THREADS if set, else
// hardware concurrency. Parallelism never changes results.
int thread_count();

// Runs fn(i) for i in [0, n) on the worker pool. Exceptions from workers are
// rethrown on the calling thread.
void parallel_for(int n, const std::function<void(int)>& fn);

} // namespace patchkit
