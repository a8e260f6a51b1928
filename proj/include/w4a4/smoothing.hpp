// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "w4a4/matrix.hpp"

namespace w4a4 {

/// Per-input-channel positive scaling that migrates activation outlier
/// magnitude into the weights. Entries are floored at kSmoothingFloor.
struct SmoothingVector {
    std::vector<double> d;

    std::size_t size() const { return d.size(); }

    static SmoothingVector ones(std::size_t n) { return SmoothingVector{std::vector<double>(n, 1.0)}; }
};

inline constexpr double kSmoothingFloor = 1e-5;

/// d_i = max(act_absmax_i, eps)^mu / max(row_absmax(w)_i, eps)^(1-mu),
/// floored at 1e-5. mu = 0 leaves activations untouched, mu = 1 migrates
/// everything.
inline SmoothingVector compute_smoothing(const std::vector<double>& act_absmax,
                                         const Matrix& w, double migration) {
    if (act_absmax.size() != w.rows()) {
        throw ShapeError("compute_smoothing: act_absmax length " +
                         std::to_string(act_absmax.size()) + " != C_in " +
                         std::to_string(w.rows()));
    }
    if (migration < 0.0 || migration > 1.0) {
        throw DomainError("compute_smoothing: migration exponent must be in [0,1]");
    }
    for (double a : act_absmax) {
        if (a < 0.0) throw DomainError("compute_smoothing: negative activation magnitude");
    }
    SmoothingVector out;
    out.d.resize(w.rows());
    for (std::size_t i = 0; i < w.rows(); ++i) {
        double wmax = 0.0;
        for (std::size_t j = 0; j < w.cols(); ++j) wmax = std::max(wmax, std::abs(w(i, j)));
        const double a = std::max(act_absmax[i], kSmoothingFloor);
        const double ww = std::max(wmax, kSmoothingFloor);
        double d = std::pow(a, migration) / std::pow(ww, 1.0 - migration);
        out.d[i] = std::max(d, kSmoothingFloor);
    }
    return out;
}

/// Exact rewrite X W = (X D^-1)(D W): column i of x divided by d_i, row i of
/// w multiplied by d_i.
inline std::pair<Matrix, Matrix> apply_smoothing(const Matrix& x, const Matrix& w,
                                                 const SmoothingVector& d) {
    if (d.size() != x.cols() || d.size() != w.rows()) {
        throw ShapeError("apply_smoothing: smoothing length " + std::to_string(d.size()) +
                         " vs x.cols " + std::to_string(x.cols()) + " / w.rows " +
                         std::to_string(w.rows()));
    }
    Matrix x_hat(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) x_hat(i, j) = x(i, j) / d.d[j];
    Matrix w_hat(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) w_hat(i, j) = w(i, j) * d.d[i];
    return {std::move(x_hat), std::move(w_hat)};
}

/// Smooth only the activation side (runtime path).
inline Matrix smooth_activations(const Matrix& x, const std::vector<double>& d) {
    if (d.size() != x.cols()) {
        throw ShapeError("smooth_activations: length mismatch");
    }
    Matrix x_hat(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) x_hat(i, j) = x(i, j) / d[j];
    return x_hat;
}

} // namespace w4a4
