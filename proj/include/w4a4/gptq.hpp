// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "w4a4/linalg.hpp"
#include "w4a4/matrix.hpp"
#include "w4a4/quantize.hpp"

namespace w4a4 {

/// Running sum of X_hat^T X_hat over calibration batches. Symmetric PSD by
/// construction.
struct HessianAccumulator {
    Matrix h;
    std::size_t n_samples = 0;

    explicit HessianAccumulator(std::size_t dim) : h(dim, dim) {}

    std::size_t dim() const { return h.rows(); }
};

inline void accumulate(HessianAccumulator& acc, const Matrix& x_hat) {
    if (x_hat.cols() != acc.dim()) {
        throw ShapeError("HessianAccumulator: batch has " + std::to_string(x_hat.cols()) +
                         " channels, accumulator expects " + std::to_string(acc.dim()));
    }
    const std::size_t n = acc.dim();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            double s = 0.0;
            for (std::size_t r = 0; r < x_hat.rows(); ++r) s += x_hat(r, i) * x_hat(r, j);
            acc.h(i, j) += s;
            if (i != j) acc.h(j, i) = acc.h(i, j);
        }
    }
    acc.n_samples += x_hat.rows();
}

/// Layer-wise reconstruction objectives measured on the accumulated
/// calibration inputs, for the returned packing and for plain
/// round-to-nearest on identical frozen scales.
struct GptqReport {
    double gptq_objective = 0.0;
    double rtn_objective = 0.0;
    bool fell_back_to_rtn = false;
    std::vector<std::size_t> column_order;
};

struct GptqResult {
    PackedWeight packed;
    GptqReport report;
};

namespace detail {

// tr(D^T H D) == sum_n ||X_n D||_F^2 for H = sum_n X_n^T X_n.
inline double quadratic_objective(const Matrix& h, const Matrix& d) {
    Matrix hd = matmul(h, d);
    double obj = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) obj += d.data()[i] * hd.data()[i];
    return obj;
}

// Upper-triangular U with A = U^T U. Row j of U is, up to its diagonal, the
// j-th sequentially eliminated inverse Hessian row, which is exactly the
// propagation coefficient GPTQ needs at step j.
inline Matrix cholesky_upper(const Matrix& a) {
    const std::size_t n = a.rows();
    Matrix u(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        double diag = a(i, i);
        for (std::size_t k = 0; k < i; ++k) diag -= u(k, i) * u(k, i);
        if (diag <= 0.0) {
            throw DefinitenessError("cholesky_upper: non-positive pivot at index " +
                                    std::to_string(i));
        }
        u(i, i) = std::sqrt(diag);
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = a(i, j);
            for (std::size_t k = 0; k < i; ++k) s -= u(k, i) * u(k, j);
            u(i, j) = s / u(i, i);
        }
    }
    return u;
}

} // namespace detail

/// Reconstruction-aware 4-bit quantization of the residual branch.
/// Input channels are processed in ascending order; per-group scales are
/// frozen from the residual before the loop; the rounding error of each row
/// is propagated to the remaining rows through the upper Cholesky factor of
/// the inverse damped Hessian (the sequentially eliminated inverse).
/// Greedy propagation can lose to plain rounding when compensations run into
/// the clip range on ill-conditioned layers, so the packing that scores
/// better on the calibration objective is the one returned.
inline GptqResult gptq_quantize(const Matrix& residual, const HessianAccumulator& acc,
                                QuantGrid grid, std::size_t group, double damping) {
    if (residual.rows() != acc.dim()) {
        throw ShapeError("gptq_quantize: residual has " + std::to_string(residual.rows()) +
                         " input channels, Hessian dim is " + std::to_string(acc.dim()));
    }
    if (acc.n_samples == 0) {
        throw CalibrationError("gptq_quantize: zero calibration samples accumulated");
    }
    if (!(damping > 0.0)) {
        throw DomainError("gptq_quantize: damping must be > 0");
    }

    const std::size_t c_in = residual.rows();
    const std::size_t c_out = residual.cols();

    // Frozen scales and the RTN reference come from the pre-GPTQ residual.
    PackedWeight rtn = quantize_weight_grouped(residual, grid, group);
    const std::size_t n_groups = rtn.n_groups();

    double diag_mean = 0.0;
    for (std::size_t i = 0; i < c_in; ++i) diag_mean += acc.h(i, i);
    diag_mean /= static_cast<double>(c_in);
    Matrix damped = acc.h;
    const double lambda = damping * diag_mean;
    for (std::size_t i = 0; i < c_in; ++i) damped(i, i) += lambda;

    Matrix hinv_chol;
    try {
        hinv_chol = detail::cholesky_upper(cholesky_inverse(damped));
    } catch (const DefinitenessError& e) {
        throw DefinitenessError(std::string(e.what()) +
                                " (damped Hessian not SPD; increase damping)");
    }

    Matrix work = residual;
    Matrix q_dense(c_in, c_out);
    PackedWeight packed = rtn; // same layout and frozen scales, codes rewritten
    std::vector<double> err(c_out);

    for (std::size_t j = 0; j < c_in; ++j) {
        const std::size_t g = j / rtn.group;
        const double hjj = hinv_chol(j, j);
        for (std::size_t c = 0; c < c_out; ++c) {
            const double w = work(j, c);
            std::uint8_t nib;
            double q_val;
            if (grid == QuantGrid::Int4Symmetric) {
                const double s = rtn.scales[c * n_groups + g];
                int q = 0;
                if (s != 0.0) {
                    double r = std::nearbyint(w / s);
                    if (r < -7.0) r = -7.0;
                    if (r > 7.0) r = 7.0;
                    q = static_cast<int>(r);
                }
                nib = static_cast<std::uint8_t>(q + 8);
                q_val = (s != 0.0) ? s * q : 0.0;
            } else {
                const int e = static_cast<int>(rtn.scale_exps[c * n_groups + g]) - 127;
                double scaled = std::ldexp(w, -e);
                if (scaled > 6.0) scaled = 6.0;
                if (scaled < -6.0) scaled = -6.0;
                nib = mxfp4_encode_element(scaled);
                q_val = std::ldexp(mxfp4_decode_element(nib), e);
            }
            detail::pack_nibble(packed.codes, c * packed.padded_rows + j, nib);
            q_dense(j, c) = q_val;
            err[c] = (w - q_val) / hjj;
        }
        for (std::size_t j2 = j + 1; j2 < c_in; ++j2) {
            const double hj = hinv_chol(j, j2);
            if (hj == 0.0) continue;
            for (std::size_t c = 0; c < c_out; ++c) {
                work(j2, c) -= hj * err[c];
            }
        }
    }

    GptqReport report;
    report.column_order.resize(c_in);
    std::iota(report.column_order.begin(), report.column_order.end(), std::size_t{0});
    report.gptq_objective = detail::quadratic_objective(acc.h, subtract(residual, q_dense));
    report.rtn_objective =
        detail::quadratic_objective(acc.h, subtract(residual, dequantize_packed(rtn)));
    if (report.gptq_objective > report.rtn_objective) {
        packed = rtn;
        report.gptq_objective = report.rtn_objective;
        report.fell_back_to_rtn = true;
    }
    return GptqResult{std::move(packed), std::move(report)};
}

} // namespace w4a4
