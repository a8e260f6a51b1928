// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "w4a4/quantize.hpp"
#include "w4a4/toy_dit.hpp"

using w4a4::Matrix;
using w4a4::QuantGrid;

TEST(ComputeScale, AlphaEqualsQmaxGivesUnitScale) {
    auto p = w4a4::compute_scale(7.0, QuantGrid::Int4Symmetric);
    EXPECT_DOUBLE_EQ(p.scale, 1.0);
    EXPECT_EQ(p.zero_point, 0);
    EXPECT_EQ(p.q_min, -7);
    EXPECT_EQ(p.q_max, 7);
}

TEST(ComputeScale, DirectSubstitution) {
    EXPECT_DOUBLE_EQ(w4a4::compute_scale(1.0, QuantGrid::Int4Symmetric).scale, 1.0 / 7.0);
    EXPECT_DOUBLE_EQ(w4a4::compute_scale(0.35, QuantGrid::Int4Symmetric).scale, 0.05);
}

TEST(ComputeScale, NonPositiveAlphaThrows) {
    EXPECT_THROW(w4a4::compute_scale(0.0, QuantGrid::Int4Symmetric), w4a4::DomainError);
    EXPECT_THROW(w4a4::compute_scale(-1.0, QuantGrid::MXFP4), w4a4::DomainError);
}

TEST(QuantizeDequantize, ZeroIsFixedPoint) {
    for (double alpha : {0.1, 1.0, 7.0, 123.0}) {
        auto p = w4a4::compute_scale(alpha, QuantGrid::Int4Symmetric);
        EXPECT_DOUBLE_EQ(w4a4::quantize_dequantize(0.0, p), 0.0);
    }
}

TEST(QuantizeDequantize, DirectEvaluationAndClipping) {
    auto p = w4a4::compute_scale(7.0, QuantGrid::Int4Symmetric); // s = 1
    EXPECT_DOUBLE_EQ(w4a4::quantize_dequantize(3.4, p), 3.0);
    EXPECT_DOUBLE_EQ(w4a4::quantize_dequantize(9.0, p), 7.0);
    EXPECT_DOUBLE_EQ(w4a4::quantize_dequantize(-9.0, p), -7.0);
}

TEST(QuantizeDequantize, RoundHalfToEven) {
    auto p = w4a4::compute_scale(7.0, QuantGrid::Int4Symmetric); // s = 1
    EXPECT_DOUBLE_EQ(w4a4::quantize_dequantize(2.5, p), 2.0);
    EXPECT_DOUBLE_EQ(w4a4::quantize_dequantize(3.5, p), 4.0);
    EXPECT_DOUBLE_EQ(w4a4::quantize_dequantize(-2.5, p), -2.0);
}

TEST(QuantizeDequantize, NearestGridPointOracle) {
    w4a4::Prng rng(100);
    auto p = w4a4::compute_scale(0.83, QuantGrid::Int4Symmetric);
    for (int i = 0; i < 2000; ++i) {
        const double z = (2.0 * rng.uniform() - 1.0) * p.alpha();
        const double out = w4a4::quantize_dequantize(z, p);
        EXPECT_LE(std::abs(out - z), p.scale / 2 + 1e-12);
        // round-half-even and the scan only differ exactly at midpoints,
        // which have measure zero for random draws
        EXPECT_NEAR(out, oracles::nearest_uniform_point(z, p.scale, p.q_max), 1e-12);
    }
}

TEST(QuantizeDequantize, Idempotent) {
    w4a4::Prng rng(101);
    auto p = w4a4::compute_scale(1.77, QuantGrid::Int4Symmetric);
    Matrix z(8, 8);
    for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] = 3.0 * rng.normal();
    Matrix q1 = w4a4::quantize_dequantize(z, p);
    Matrix q2 = w4a4::quantize_dequantize(q1, p);
    EXPECT_EQ(q1, q2);
}

TEST(QuantizeDequantize, OutputOnGrid) {
    w4a4::Prng rng(102);
    auto p = w4a4::compute_scale(2.9, QuantGrid::Int4Symmetric);
    for (int i = 0; i < 500; ++i) {
        const double out = w4a4::quantize_dequantize(5.0 * rng.normal(), p);
        const double q = out / p.scale;
        EXPECT_NEAR(q, std::nearbyint(q), 1e-9);
        EXPECT_LE(std::abs(q), 7.0 + 1e-9);
    }
}

TEST(QuantizeDequantize, ClippingSaturatesExactly) {
    auto p = w4a4::compute_scale(1.0, QuantGrid::Int4Symmetric);
    EXPECT_DOUBLE_EQ(w4a4::quantize_dequantize(2.0, p), p.scale * 7);
    EXPECT_DOUBLE_EQ(w4a4::quantize_dequantize(-123.0, p), -p.scale * 7);
}

// ---------------------------------------------------------------------------
// MXFP4
// ---------------------------------------------------------------------------

TEST(Mxfp4, ZeroBlock) {
    std::array<double, 32> zeros{};
    auto b = w4a4::mxfp4_encode_block(zeros.data());
    EXPECT_EQ(b.scale_exp, 127);
    for (auto c : b.codes) EXPECT_EQ(c, 0);
}

TEST(Mxfp4, CodebookPointsEncodeExactly) {
    std::array<double, 32> vals{};
    vals[0] = 6.0;
    vals[1] = 3.0;
    vals[2] = 1.5;
    vals[3] = 0.0;
    vals[4] = -4.0;
    vals[5] = -0.5;
    auto b = w4a4::mxfp4_encode_block(vals.data());
    EXPECT_EQ(b.scale_exp, 127); // max is 6 -> scale 2^0
    auto dec = w4a4::mxfp4_decode_block(b);
    for (int i = 0; i < 32; ++i) EXPECT_DOUBLE_EQ(dec[i], vals[i]);
}

TEST(Mxfp4, DecodeSingleCodes) {
    EXPECT_DOUBLE_EQ(w4a4::mxfp4_decode_element(0b0000), 0.0);
    // code for magnitude 1.5 is index 3; with scale 2^2 it decodes to 6.0
    w4a4::MXFP4Block b;
    b.scale_exp = 127 + 2;
    b.codes[0] = 3;
    EXPECT_DOUBLE_EQ(w4a4::mxfp4_decode_block(b)[0], 6.0);
}

TEST(Mxfp4, FullCodeSpaceRoundtrip) {
    // all 15 values x scales 2^-2..2^2: decode(encode(decode)) is exact
    for (int e = -2; e <= 2; ++e) {
        for (int code = 0; code < 16; ++code) {
            const double v = std::ldexp(w4a4::mxfp4_decode_element(code), e);
            std::array<double, 32> vals{};
            vals[0] = v;
            vals[1] = std::ldexp(6.0, e); // pin the block scale
            auto b = w4a4::mxfp4_encode_block(vals.data());
            EXPECT_EQ(static_cast<int>(b.scale_exp) - 127, e);
            EXPECT_DOUBLE_EQ(w4a4::mxfp4_decode_block(b)[0], v);
        }
    }
}

TEST(Mxfp4, RoundtripIdempotent) {
    w4a4::Prng rng(200);
    std::array<double, 32> vals{};
    for (auto& v : vals) v = 4.0 * rng.normal();
    auto b = w4a4::mxfp4_encode_block(vals.data());
    auto dec = w4a4::mxfp4_decode_block(b);
    auto b2 = w4a4::mxfp4_encode_block(dec.data());
    EXPECT_EQ(b2.scale_exp, b.scale_exp);
    EXPECT_EQ(w4a4::mxfp4_decode_block(b2), dec);
}

TEST(Mxfp4, ScaleExponentKeepsBlockMaxInRange) {
    w4a4::Prng rng(201);
    for (int trial = 0; trial < 200; ++trial) {
        std::array<double, 32> vals{};
        const double mag = std::pow(10.0, 4.0 * rng.uniform() - 2.0);
        for (auto& v : vals) v = mag * rng.normal();
        auto b = w4a4::mxfp4_encode_block(vals.data());
        EXPECT_NE(b.scale_exp, 255);
        double mx = 0.0;
        for (double v : vals) mx = std::max(mx, std::abs(v));
        const double ratio = mx / std::ldexp(1.0, static_cast<int>(b.scale_exp) - 127);
        EXPECT_LE(ratio, 6.0 + 1e-12);
        EXPECT_GT(ratio, 3.0 - 1e-12);
    }
}

TEST(Mxfp4, RandomBlockMatchesExhaustiveCodebookOracle) {
    w4a4::Prng rng(202);
    for (int trial = 0; trial < 50; ++trial) {
        std::array<double, 32> vals{};
        for (auto& v : vals) v = 5.0 * rng.normal();
        auto b = w4a4::mxfp4_encode_block(vals.data());
        auto dec = w4a4::mxfp4_decode_block(b);
        const int e = static_cast<int>(b.scale_exp) - 127;
        for (int i = 0; i < 32; ++i) {
            EXPECT_DOUBLE_EQ(dec[i], oracles::nearest_e2m1_point(vals[i], e))
                << "value " << vals[i] << " exp " << e;
        }
    }
}

TEST(Mxfp4, TiesAwayFromZero) {
    // 2.5 is equidistant from 2 and 3: away from zero picks 3
    EXPECT_DOUBLE_EQ(w4a4::mxfp4_decode_element(w4a4::mxfp4_encode_element(2.5)), 3.0);
    EXPECT_DOUBLE_EQ(w4a4::mxfp4_decode_element(w4a4::mxfp4_encode_element(-2.5)), -3.0);
    EXPECT_DOUBLE_EQ(w4a4::mxfp4_decode_element(w4a4::mxfp4_encode_element(0.25)), 0.5);
    EXPECT_DOUBLE_EQ(w4a4::mxfp4_decode_element(w4a4::mxfp4_encode_element(5.0)), 6.0);
}

// ---------------------------------------------------------------------------
// Grouped weight quantization
// ---------------------------------------------------------------------------

TEST(QuantizeWeightGrouped, ConstantMatrixMxfp4IsExact) {
    Matrix w(64, 8);
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = 6.0;
    auto pw = w4a4::quantize_weight_grouped(w, QuantGrid::MXFP4, 32);
    Matrix deq = w4a4::dequantize_packed(pw);
    EXPECT_EQ(deq, w);
}

TEST(QuantizeWeightGrouped, IntegerGridIsExactAtUnitScale) {
    Matrix w(16, 1);
    for (int i = 0; i < 15; ++i) w(i, 0) = i - 7; // {-7..7}
    w(15, 0) = 7.0;
    auto pw = w4a4::quantize_weight_grouped(w, QuantGrid::Int4Symmetric, 16);
    ASSERT_EQ(pw.scales.size(), 1u);
    EXPECT_FLOAT_EQ(pw.scales[0], 1.0f);
    EXPECT_EQ(w4a4::dequantize_packed(pw), w);
}

TEST(QuantizeWeightGrouped, MatchesPerGroupNearestPointOracle) {
    w4a4::Prng rng(300);
    Matrix w = oracles::random_matrix(rng, 64, 16);
    auto pw = w4a4::quantize_weight_grouped(w, QuantGrid::Int4Symmetric, 32);
    Matrix deq = w4a4::dequantize_packed(pw);
    const std::size_t n_groups = pw.n_groups();
    for (std::size_t j = 0; j < w.cols(); ++j) {
        for (std::size_t i = 0; i < w.rows(); ++i) {
            const double s = pw.scales[j * n_groups + i / 32];
            EXPECT_NEAR(deq(i, j), oracles::nearest_uniform_point(w(i, j), s, 7), 1e-7);
        }
    }
}

TEST(QuantizeWeightGrouped, MxfpMatchesPerBlockOracle) {
    w4a4::Prng rng(301);
    Matrix w = oracles::random_matrix(rng, 64, 4);
    auto pw = w4a4::quantize_weight_grouped(w, QuantGrid::MXFP4, 32);
    Matrix deq = w4a4::dequantize_packed(pw);
    const std::size_t n_groups = pw.n_groups();
    for (std::size_t j = 0; j < w.cols(); ++j) {
        for (std::size_t i = 0; i < w.rows(); ++i) {
            const int e = static_cast<int>(pw.scale_exps[j * n_groups + i / 32]) - 127;
            EXPECT_DOUBLE_EQ(deq(i, j), oracles::nearest_e2m1_point(w(i, j), e));
        }
    }
}

TEST(QuantizeWeightGrouped, PadsWhenGroupDoesNotDivide) {
    w4a4::Prng rng(302);
    Matrix w = oracles::random_matrix(rng, 48, 4);
    auto pw = w4a4::quantize_weight_grouped(w, QuantGrid::Int4Symmetric, 32);
    EXPECT_EQ(pw.padded_rows, 64u);
    EXPECT_EQ(pw.code_bytes(), 64u * 4 / 2);
    Matrix deq = w4a4::dequantize_packed(pw);
    EXPECT_EQ(deq.rows(), 48u);
}

TEST(QuantizeWeightGrouped, EmptyMatrixThrows) {
    EXPECT_THROW(w4a4::quantize_weight_grouped(Matrix(), QuantGrid::Int4Symmetric, 64),
                 w4a4::ShapeError);
}

TEST(QuantizeWeightGrouped, PackedByteLayoutIsPinned) {
    // Two output channels, four input channels, one group, unit scale.
    // Codes run per output channel with input channels ascending, two per
    // byte, low nibble first, int4 nibbles offset by 8.
    Matrix w(4, 2,
             {
                 7.0, 1.0,  //
                 -7.0, 2.0, //
                 0.0, 3.0,  //
                 3.0, -4.0, //
             });
    auto pw = w4a4::quantize_weight_grouped(w, QuantGrid::Int4Symmetric, 4);
    ASSERT_EQ(pw.scales.size(), 2u);
    EXPECT_FLOAT_EQ(pw.scales[0], 1.0f);
    ASSERT_EQ(pw.codes.size(), 4u);
    // column 0: nibbles (7+8, -7+8, 0+8, 3+8) = (15, 1, 8, 11)
    EXPECT_EQ(pw.codes[0], 0x1F);
    EXPECT_EQ(pw.codes[1], 0xB8);
    // column 1: the float32 scale for alpha 4 sits just above 4/7, so the
    // values 1,2,3,-4 quantize to 2,3,5,-7
    EXPECT_FLOAT_EQ(pw.scales[1], 4.0f / 7.0f);
    EXPECT_EQ(pw.codes[2], 0xBA); // (2+8, 3+8)
    EXPECT_EQ(pw.codes[3], 0x1D); // (5+8, -7+8)
}
