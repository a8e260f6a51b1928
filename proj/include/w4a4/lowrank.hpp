// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <utility>

#include "w4a4/linalg.hpp"
#include "w4a4/matrix.hpp"

namespace w4a4 {

/// High-precision low-rank compensation branch: w_hat ~ l1 * l2 + residual.
/// rank 0 encodes "no branch" (empty factors).
struct LowRankFactors {
    Matrix l1; // C_in x r, carries U * diag(s)
    Matrix l2; // r x C_out, carries V^T
    std::size_t rank = 0;

    Matrix product(std::size_t c_in, std::size_t c_out) const {
        if (rank == 0) return Matrix(c_in, c_out);
        return matmul(l1, l2);
    }
};

/// Rank-r truncated SVD split of the smoothed weight. The singular-value
/// mass is folded into l1; residual = w_hat - l1*l2 so the additive
/// reconstruction is exact by construction.
inline std::pair<LowRankFactors, Matrix> split_low_rank(const Matrix& w_hat, std::size_t r) {
    const std::size_t min_dim = std::min(w_hat.rows(), w_hat.cols());
    if (r > min_dim) {
        throw RankError("split_low_rank: rank " + std::to_string(r) + " > min dim " +
                        std::to_string(min_dim));
    }
    if (r == 0) {
        return {LowRankFactors{}, w_hat};
    }
    SvdResult svd = truncated_svd(w_hat, r);
    LowRankFactors f;
    f.rank = r;
    f.l1 = Matrix(w_hat.rows(), r);
    for (std::size_t i = 0; i < w_hat.rows(); ++i)
        for (std::size_t k = 0; k < r; ++k) f.l1(i, k) = svd.u(i, k) * svd.singular_values[k];
    f.l2 = transpose(svd.v);
    Matrix residual = subtract(w_hat, matmul(f.l1, f.l2));
    return {std::move(f), std::move(residual)};
}

} // namespace w4a4
