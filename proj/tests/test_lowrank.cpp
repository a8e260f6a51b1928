// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "oracles.hpp"
#include "w4a4/lowrank.hpp"
#include "w4a4/toy_dit.hpp"

using w4a4::Matrix;

TEST(SplitLowRank, RankZeroReturnsResidualOnly) {
    w4a4::Prng rng(50);
    Matrix w = oracles::random_matrix(rng, 6, 9);
    auto [factors, residual] = w4a4::split_low_rank(w, 0);
    EXPECT_EQ(factors.rank, 0u);
    EXPECT_TRUE(factors.l1.empty());
    EXPECT_TRUE(factors.l2.empty());
    EXPECT_EQ(residual, w);
}

TEST(SplitLowRank, ExactRankTwoLeavesTinyResidual) {
    w4a4::Prng rng(51);
    Matrix a = oracles::random_matrix(rng, 12, 2);
    Matrix b = oracles::random_matrix(rng, 2, 10);
    Matrix w = matmul(a, b);
    auto [factors, residual] = w4a4::split_low_rank(w, 2);
    EXPECT_LE(w4a4::frobenius_norm(residual), 1e-8 * w4a4::frobenius_norm(w));
}

TEST(SplitLowRank, ResidualNormMatchesFullSvdOracle) {
    w4a4::Prng rng(52);
    Matrix w = oracles::random_matrix(rng, 32, 48);
    auto [factors, residual] = w4a4::split_low_rank(w, 8);
    const double expected = oracles::tail_norm(oracles::full_singular_values(w), 8);
    EXPECT_NEAR(w4a4::frobenius_norm(residual), expected, 1e-8);
}

TEST(SplitLowRank, AdditiveReconstructionIsExact) {
    w4a4::Prng rng(53);
    Matrix w = oracles::random_matrix(rng, 20, 14);
    for (std::size_t r : {1u, 3u, 7u, 14u}) {
        auto [factors, residual] = w4a4::split_low_rank(w, r);
        Matrix rebuilt = add(matmul(factors.l1, factors.l2), residual);
        double rel =
            w4a4::frobenius_norm(subtract(rebuilt, w)) / w4a4::frobenius_norm(w);
        EXPECT_LE(rel, 1e-10) << "rank " << r;
    }
}

TEST(SplitLowRank, ResidualNormMonotoneInRank) {
    w4a4::Prng rng(54);
    Matrix w = oracles::random_matrix(rng, 24, 18);
    double prev = w4a4::frobenius_norm(w);
    for (std::size_t r = 1; r <= 18; ++r) {
        auto [factors, residual] = w4a4::split_low_rank(w, r);
        const double norm = w4a4::frobenius_norm(residual);
        EXPECT_LE(norm, prev + 1e-10) << "rank " << r;
        prev = norm;
    }
}

TEST(SplitLowRank, RankOutOfRangeThrows) {
    Matrix w(4, 6);
    EXPECT_THROW(w4a4::split_low_rank(w, 5), w4a4::RankError);
}

TEST(SplitLowRank, FactorShapes) {
    w4a4::Prng rng(55);
    Matrix w = oracles::random_matrix(rng, 10, 7);
    auto [factors, residual] = w4a4::split_low_rank(w, 3);
    EXPECT_EQ(factors.l1.rows(), 10u);
    EXPECT_EQ(factors.l1.cols(), 3u);
    EXPECT_EQ(factors.l2.rows(), 3u);
    EXPECT_EQ(factors.l2.cols(), 7u);
    EXPECT_EQ(residual.rows(), 10u);
    EXPECT_EQ(residual.cols(), 7u);
}
