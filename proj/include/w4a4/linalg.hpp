// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "w4a4/matrix.hpp"

namespace w4a4 {

struct SvdResult {
    Matrix u;                            // rows x r, orthonormal columns
    std::vector<double> singular_values; // length r, descending, >= 0
    Matrix v;                            // cols x r, orthonormal columns
};

namespace detail {

// One-sided Jacobi: orthogonalize the columns of a (m x n, n <= m),
// accumulating the rotations into v (n x n). Returns on convergence,
// throws ConvergenceError after the sweep cap.
inline void one_sided_jacobi(Matrix& a, Matrix& v, int max_sweeps, double tol) {
    const std::size_t m = a.rows(), n = a.cols();
    double off = 0.0;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        off = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = a(i, p), y = a(i, q);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if (app == 0.0 || aqq == 0.0) continue;
                const double rel = std::abs(apq) / std::sqrt(app * aqq);
                off = std::max(off, rel);
                if (rel <= tol) continue;

                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = a(i, p), y = a(i, q);
                    a(i, p) = c * x - s * y;
                    a(i, q) = s * x + c * y;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double x = v(i, p), y = v(i, q);
                    v(i, p) = c * x - s * y;
                    v(i, q) = s * x + c * y;
                }
            }
        }
        if (off <= tol) return;
    }
    throw ConvergenceError("truncated_svd: Jacobi did not converge in " +
                           std::to_string(max_sweeps) + " sweeps, residual " +
                           std::to_string(off));
}

} // namespace detail

/// Top-r singular triplets of m via one-sided Jacobi on the smaller Gram
/// dimension. Singular values descending; U, V column-orthonormal.
inline SvdResult truncated_svd(const Matrix& m, std::size_t r,
                               int max_sweeps = 100, double tol = 1e-12) {
    const std::size_t min_dim = std::min(m.rows(), m.cols());
    if (r < 1 || r > min_dim) {
        throw RankError("truncated_svd: rank " + std::to_string(r) +
                        " outside [1, " + std::to_string(min_dim) + "]");
    }
    const bool flipped = m.cols() > m.rows();
    Matrix a = flipped ? transpose(m) : m;
    Matrix v = Matrix::identity(a.cols());
    detail::one_sided_jacobi(a, v, max_sweeps, tol);

    const std::size_t n = a.cols();
    std::vector<double> norms(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < a.rows(); ++i) acc += a(i, j) * a(i, j);
        norms[j] = std::sqrt(acc);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

    Matrix u_full(a.rows(), r);
    Matrix v_small(n, r);
    std::vector<double> sv(r);
    for (std::size_t k = 0; k < r; ++k) {
        const std::size_t j = order[k];
        sv[k] = norms[j];
        if (norms[j] > 0.0) {
            for (std::size_t i = 0; i < a.rows(); ++i) u_full(i, k) = a(i, j) / norms[j];
        }
        for (std::size_t i = 0; i < n; ++i) v_small(i, k) = v(i, j);
    }
    if (flipped) return SvdResult{std::move(v_small), std::move(sv), std::move(u_full)};
    return SvdResult{std::move(u_full), std::move(sv), std::move(v_small)};
}

/// Inverse of a symmetric positive definite matrix via Cholesky factorization
/// and triangular solves. Symmetry is checked up front; positivity surfaces
/// as a failing pivot.
inline Matrix cholesky_inverse(const Matrix& h) {
    if (h.rows() != h.cols()) {
        throw ShapeError("cholesky_inverse: matrix not square");
    }
    const std::size_t n = h.rows();
    const double sym_tol = 1e-10 * std::max(1.0, max_abs(h));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (std::abs(h(i, j) - h(j, i)) > sym_tol) {
                throw DefinitenessError("cholesky_inverse: input not symmetric at (" +
                                        std::to_string(i) + "," + std::to_string(j) + ")");
            }
        }
    }

    // Lower factor L with H = L L^T.
    Matrix l(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double sum = h(i, j);
            for (std::size_t k = 0; k < j; ++k) sum -= l(i, k) * l(j, k);
            if (i == j) {
                if (sum <= 0.0) {
                    throw DefinitenessError(
                        "cholesky_inverse: non-positive pivot at index " + std::to_string(i));
                }
                l(i, i) = std::sqrt(sum);
            } else {
                l(i, j) = sum / l(j, j);
            }
        }
    }

    // Column i of H^-1 from L y = e_i, then L^T x = y.
    Matrix inv(n, n);
    std::vector<double> y(n), x(n);
    for (std::size_t col = 0; col < n; ++col) {
        for (std::size_t i = 0; i < n; ++i) {
            double sum = (i == col) ? 1.0 : 0.0;
            for (std::size_t k = 0; k < i; ++k) sum -= l(i, k) * y[k];
            y[i] = sum / l(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double sum = y[ii];
            for (std::size_t k = ii + 1; k < n; ++k) sum -= l(k, ii) * x[k];
            x[ii] = sum / l(ii, ii);
        }
        for (std::size_t i = 0; i < n; ++i) inv(i, col) = x[i];
    }
    // The solves are symmetric only to rounding; make it exact.
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double avg = 0.5 * (inv(i, j) + inv(j, i));
            inv(i, j) = avg;
            inv(j, i) = avg;
        }
    }
    return inv;
}

} // namespace w4a4
