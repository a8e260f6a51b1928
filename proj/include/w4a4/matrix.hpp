// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "w4a4/errors.hpp"

namespace w4a4 {

/// Dense row-major matrix of doubles. The universal carrier for activations,
/// weights, low-rank factors and residuals. Entries must be finite.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                             " != rows*cols " + std::to_string(rows_ * cols_));
        }
        for (double v : data_) {
            if (!std::isfinite(v)) {
                throw DomainError("Matrix: non-finite entry on construction");
            }
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    const std::vector<double>& values() const { return data_; }

    bool operator==(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// result[i][j] = sum_k a[i][k] * b[k][j]
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) +
                         " vs " + std::to_string(b.rows()));
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    // i-k-j order keeps the b row hot in cache.
    for (std::size_t i = 0; i < n; ++i) {
        double* out_row = out.data() + i * m;
        const double* a_row = a.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double aik = a_row[p];
            if (aik == 0.0) continue;
            const double* b_row = b.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) {
                out_row[j] += aik * b_row[j];
            }
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j)
            out(j, i) = m(i, j);
    return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError("add: shape mismatch");
    }
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError("subtract: shape mismatch");
    }
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

inline Matrix scale(const Matrix& a, double s) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
    return out;
}

inline double frobenius_norm(const Matrix& m) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) acc += m.data()[i] * m.data()[i];
    return std::sqrt(acc);
}

inline double max_abs(const Matrix& m) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) acc = std::max(acc, std::abs(m.data()[i]));
    return acc;
}

/// 1 - <vec(y), vec(y_hat)> / (||y|| * ||y_hat||), in [0, 2].
/// Returns 1 when y_hat is all-zero; y must not be all-zero.
inline double cosine_error(const Matrix& y, const Matrix& y_hat) {
    if (y.rows() != y_hat.rows() || y.cols() != y_hat.cols()) {
        throw ShapeError("cosine_error: shape mismatch");
    }
    double dot = 0.0, ny = 0.0, nh = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        dot += y.data()[i] * y_hat.data()[i];
        ny += y.data()[i] * y.data()[i];
        nh += y_hat.data()[i] * y_hat.data()[i];
    }
    if (ny == 0.0) {
        throw DomainError("cosine_error: reference is all-zero");
    }
    if (nh == 0.0) return 1.0;
    double c = 1.0 - dot / (std::sqrt(ny) * std::sqrt(nh));
    if (c < 0.0) c = 0.0;
    if (c > 2.0) c = 2.0;
    return c;
}

} // namespace w4a4
