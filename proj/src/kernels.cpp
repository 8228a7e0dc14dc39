#include "patchkit/kernels.hpp"

#include "patchkit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>

namespace patchkit {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

} // namespace

int thread_count() {
    if (const char* env = std::getenv("PATCHKIT_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

namespace {
thread_local bool g_in_worker = false;
}

void parallel_for(int n, const std::function<void(int)>& fn) {
    const int workers = g_in_worker ? 1 : std::min(n, thread_count());
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            g_in_worker = true; // nested parallel_for calls stay serial
            try {
                for (int i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

void matmul_into(const Matrix& a, const Matrix& b, Matrix& out) {
    if (a.cols != b.rows)
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a) + " * " + shape_str(b));
    out.rows = a.rows;
    out.cols = b.cols;
    out.data.assign(static_cast<size_t>(a.rows) * b.cols, 0.0f);

    const int k_dim = a.cols;
    const int n_dim = b.cols;
    parallel_for(a.rows, [&](int m) {
        // One f64 accumulator row; k advances sequentially so the reduction
        // order is fixed for every output element.
        std::vector<double> acc(static_cast<size_t>(n_dim), 0.0);
        const float* a_row = a.data.data() + static_cast<size_t>(m) * k_dim;
        for (int k = 0; k < k_dim; ++k) {
            const double av = a_row[k];
            const float* b_row = b.data.data() + static_cast<size_t>(k) * n_dim;
            for (int n = 0; n < n_dim; ++n) acc[n] += av * b_row[n];
        }
        float* o_row = out.data.data() + static_cast<size_t>(m) * n_dim;
        for (int n = 0; n < n_dim; ++n) o_row[n] = static_cast<float>(acc[n]);
    });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix out;
    matmul_into(a, b, out);
    return out;
}

void matmul_nt_into(const Matrix& a, const Matrix& b, Matrix& out) {
    if (a.cols != b.cols)
        throw ShapeError("matmul_nt: inner dimensions differ, " + shape_str(a) + " * " +
                         shape_str(b) + "^T");
    out.rows = a.rows;
    out.cols = b.rows;
    out.data.assign(static_cast<size_t>(a.rows) * b.rows, 0.0f);

    const int k_dim = a.cols;
    parallel_for(a.rows, [&](int m) {
        const float* a_row = a.data.data() + static_cast<size_t>(m) * k_dim;
        float* o_row = out.data.data() + static_cast<size_t>(m) * b.rows;
        for (int n = 0; n < b.rows; ++n) {
            const float* b_row = b.data.data() + static_cast<size_t>(n) * k_dim;
            double acc = 0.0;
            for (int k = 0; k < k_dim; ++k) acc += static_cast<double>(a_row[k]) * b_row[k];
            o_row[n] = static_cast<float>(acc);
        }
    });
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    Matrix out;
    matmul_nt_into(a, b, out);
    return out;
}

void softmax_row(std::span<const float> in, std::span<float> out) {
    float maxv = in[0];
    for (const float v : in) maxv = std::max(maxv, v);
    double sum = 0.0;
    for (size_t i = 0; i < in.size(); ++i) {
        const double e = std::exp(static_cast<double>(in[i]) - maxv);
        out[i] = static_cast<float>(e);
        sum += e;
    }
    const double inv = 1.0 / sum;
    for (size_t i = 0; i < in.size(); ++i) out[i] = static_cast<float>(out[i] * inv);
}

Matrix softmax_rows(const Matrix& m, bool causal_mask) {
    Matrix out(m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r) {
        const int limit = causal_mask ? std::min(r + 1, m.cols) : m.cols;
        softmax_row(m.row(r).subspan(0, limit), out.row(r).subspan(0, limit));
        // Masked entries stay exactly zero from construction.
    }
    return out;
}

void layernorm_row(std::span<const float> x, std::span<const float> gamma,
                   std::span<const float> beta, float eps, std::span<float> out) {
    const size_t n = x.size();
    double mean = 0.0;
    for (const float v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (const float v : x) {
        const double d = v - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv_std = 1.0 / std::sqrt(var + static_cast<double>(eps));
    for (size_t i = 0; i < n; ++i)
        out[i] = static_cast<float>(gamma[i] * ((x[i] - mean) * inv_std) + beta[i]);
}

Matrix layernorm(const Matrix& x, std::span<const float> gamma, std::span<const float> beta,
                 float eps) {
    Matrix out(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r) layernorm_row(x.row(r), gamma, beta, eps, out.row(r));
    return out;
}

float gelu(float x) {
    constexpr double sqrt_2_over_pi = 0.7978845608028653558798921198687;
    const double xd = x;
    const double inner = sqrt_2_over_pi * (xd + 0.044715 * xd * xd * xd);
    return static_cast<float>(0.5 * xd * (1.0 + std::tanh(inner)));
}

void gelu_inplace(std::span<float> x) {
    for (float& v : x) v = gelu(v);
}

void add_bias_rows(Matrix& m, std::span<const float> bias) {
    if (bias.size() != static_cast<size_t>(m.cols))
        throw ShapeError("add_bias_rows: bias length " + std::to_string(bias.size()) +
                         " vs cols " + std::to_string(m.cols));
    for (int r = 0; r < m.rows; ++r) {
        float* row = m.data.data() + static_cast<size_t>(r) * m.cols;
        for (int c = 0; c < m.cols; ++c) row[c] += bias[c];
    }
}

} // namespace patchkit
