// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "w4a4/matrix.hpp"

namespace w4a4 {

/// Grid tag for all 4-bit tensors. Int4Symmetric is the uniform grid
/// {-7..7}; MXFP4 is the microscaling block-float format (E2M1 elements,
/// one shared E8M0 power-of-two scale per block of 32).
enum class QuantGrid : std::uint8_t { Int4Symmetric = 0, MXFP4 = 1 };

inline int grid_q_max(QuantGrid g) { return g == QuantGrid::Int4Symmetric ? 7 : 6; }

inline std::string grid_name(QuantGrid g) {
    return g == QuantGrid::Int4Symmetric ? "int4" : "mxfp4";
}

inline QuantGrid grid_from_name(const std::string& s) {
    if (s == "int4") return QuantGrid::Int4Symmetric;
    if (s == "mxfp4") return QuantGrid::MXFP4;
    throw DomainError("unknown grid name: " + s);
}

/// Symmetric uniform quantizer parameters. The clipping threshold alpha is
/// stored implicitly as scale * q_max.
struct UniformQuantParams {
    double scale = 1.0;
    int zero_point = 0;
    int q_min = -7;
    int q_max = 7;

    double alpha() const { return scale * q_max; }
};

/// s = alpha / q_max, symmetric (zero point 0).
inline UniformQuantParams compute_scale(double alpha, QuantGrid grid) {
    if (!(alpha > 0.0)) {
        throw DomainError("compute_scale: alpha must be > 0, got " + std::to_string(alpha));
    }
    const int qm = grid_q_max(grid);
    return UniformQuantParams{alpha / qm, 0, -qm, qm};
}

/// Round-half-to-even quantize-dequantize of a scalar:
/// s * (clip(round(z/s) + z0, q_min, q_max) - z0).
inline double quantize_dequantize(double z, const UniformQuantParams& p) {
    if (p.scale == 0.0) return 0.0;
    double q = std::nearbyint(z / p.scale) + p.zero_point;
    if (q < p.q_min) q = p.q_min;
    if (q > p.q_max) q = p.q_max;
    return p.scale * (q - p.zero_point);
}

inline Matrix quantize_dequantize(const Matrix& z, const UniformQuantParams& p) {
    Matrix out(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.size(); ++i) {
        out.data()[i] = quantize_dequantize(z.data()[i], p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// MXFP4 codec
// ---------------------------------------------------------------------------

inline constexpr std::size_t kMxfp4BlockSize = 32;

/// E2M1 magnitudes, indexed by the low 3 bits of a code.
inline constexpr std::array<double, 8> kE2m1Magnitudes = {0.0, 0.5, 1.0, 1.5,
                                                          2.0, 3.0, 4.0, 6.0};

/// 32 E2M1 codes (bit 3 = sign, bits 2..0 = magnitude index) sharing one
/// E8M0 power-of-two scale (bias 127). scale_exp never takes the NaN
/// sentinel 255.
struct MXFP4Block {
    std::uint8_t scale_exp = 127;
    std::array<std::uint8_t, kMxfp4BlockSize> codes{};
};

/// Nearest E2M1 code for a scaled element, ties away from zero.
inline std::uint8_t mxfp4_encode_element(double scaled) {
    // Midpoints between consecutive magnitudes; value >= midpoint rounds up.
    static constexpr std::array<double, 7> mids = {0.25, 0.75, 1.25, 1.75, 2.5, 3.5, 5.0};
    const double a = std::abs(scaled);
    std::uint8_t idx = 0;
    while (idx < 7 && a >= mids[idx]) ++idx;
    const bool neg = scaled < 0.0 && idx > 0;
    return static_cast<std::uint8_t>((neg ? 8 : 0) | idx);
}

inline double mxfp4_decode_element(std::uint8_t code) {
    const double mag = kE2m1Magnitudes[code & 7];
    return (code & 8) ? -mag : mag;
}

/// Shared scale exponent: the power of two mapping the block maximum into
/// (3, 6], so the largest element uses the top of the codebook.
inline int mxfp4_block_exponent(double max_abs_value) {
    if (max_abs_value <= 0.0) return 0;
    int e = static_cast<int>(std::ceil(std::log2(max_abs_value / 6.0)));
    // Guard the ratio against log2 rounding at the boundaries.
    while (std::ldexp(6.0, e) < max_abs_value) ++e;
    while (e > -127 && std::ldexp(3.0, e) >= max_abs_value) --e;
    if (e < -127) e = -127;
    if (e > 127) e = 127;
    return e;
}

inline MXFP4Block mxfp4_encode_block(const double* values, std::size_t n = kMxfp4BlockSize) {
    double mx = 0.0;
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, std::abs(values[i]));
    const int e = mxfp4_block_exponent(mx);
    MXFP4Block b;
    b.scale_exp = static_cast<std::uint8_t>(e + 127);
    const double inv = std::ldexp(1.0, -e);
    for (std::size_t i = 0; i < n; ++i) {
        double scaled = values[i] * inv;
        if (scaled > 6.0) scaled = 6.0;
        if (scaled < -6.0) scaled = -6.0;
        b.codes[i] = mxfp4_encode_element(scaled);
    }
    return b;
}

inline std::array<double, kMxfp4BlockSize> mxfp4_decode_block(const MXFP4Block& b) {
    std::array<double, kMxfp4BlockSize> out{};
    const double s = std::ldexp(1.0, static_cast<int>(b.scale_exp) - 127);
    for (std::size_t i = 0; i < kMxfp4BlockSize; ++i) {
        out[i] = mxfp4_decode_element(b.codes[i]) * s;
    }
    return out;
}

/// Quantize-dequantize one value against a frozen block exponent. Used by
/// GPTQ, where scales are fixed before the column loop.
inline double mxfp4_quantize_value(double v, int block_exp) {
    double scaled = std::ldexp(v, -block_exp);
    if (scaled > 6.0) scaled = 6.0;
    if (scaled < -6.0) scaled = -6.0;
    return std::ldexp(mxfp4_decode_element(mxfp4_encode_element(scaled)), block_exp);
}

/// Int4 counterpart with a frozen per-group scale.
inline double int4_quantize_value(double v, double s) {
    if (s == 0.0) return 0.0;
    double q = std::nearbyint(v / s);
    if (q < -7.0) q = -7.0;
    if (q > 7.0) q = 7.0;
    return s * q;
}

// ---------------------------------------------------------------------------
// Grouped weight quantization and packing
// ---------------------------------------------------------------------------

/// Packed 4-bit weight. Codes run per output channel with input channels
/// ascending, two codes per byte, low nibble first. Int4 nibbles are
/// offset-encoded (q + 8); per-group scales are 32-bit floats for Int4 and
/// one E8M0 byte for MXFP4. Scale index = col * n_groups + group.
struct PackedWeight {
    QuantGrid grid = QuantGrid::Int4Symmetric;
    std::size_t rows = 0;        // C_in (unpadded)
    std::size_t cols = 0;        // C_out
    std::size_t group = 64;      // effective group size along input channels
    std::size_t padded_rows = 0; // rows padded up to a multiple of group
    std::vector<std::uint8_t> codes;
    std::vector<float> scales;            // Int4Symmetric
    std::vector<std::uint8_t> scale_exps; // MXFP4 (E8M0, bias 127)

    std::size_t n_groups() const { return padded_rows / group; }
    std::size_t code_bytes() const { return padded_rows * cols / 2; }
    std::size_t scale_bytes() const {
        return grid == QuantGrid::Int4Symmetric ? scales.size() * 4 : scale_exps.size();
    }
};

namespace detail {

inline void pack_nibble(std::vector<std::uint8_t>& bytes, std::size_t idx, std::uint8_t nib) {
    if (idx % 2 == 0) {
        bytes[idx / 2] = nib & 0x0F;
    } else {
        bytes[idx / 2] |= static_cast<std::uint8_t>(nib << 4);
    }
}

inline std::uint8_t unpack_nibble(const std::vector<std::uint8_t>& bytes, std::size_t idx) {
    const std::uint8_t b = bytes[idx / 2];
    return (idx % 2 == 0) ? (b & 0x0F) : (b >> 4);
}

} // namespace detail

/// Group-wise 4-bit quantization of a weight matrix (C_in x C_out).
/// Int4Symmetric: per-group alpha = max |w| in the group, s = alpha / 7.
/// MXFP4: one block of 32 input channels per group (the group argument is
/// ignored for this grid). Rows not divisible by the group are zero-padded
/// and the padding recorded.
inline PackedWeight quantize_weight_grouped(const Matrix& w, QuantGrid grid,
                                            std::size_t group) {
    if (w.empty()) {
        throw ShapeError("quantize_weight_grouped: empty matrix");
    }
    if (grid == QuantGrid::MXFP4) {
        group = kMxfp4BlockSize;
    }
    if (group < 2 || group % 2 != 0) {
        throw DomainError("quantize_weight_grouped: group must be even and >= 2");
    }

    PackedWeight pw;
    pw.grid = grid;
    pw.rows = w.rows();
    pw.cols = w.cols();
    pw.group = group;
    pw.padded_rows = (w.rows() + group - 1) / group * group;
    pw.codes.assign(pw.code_bytes(), 0);

    const std::size_t n_groups = pw.n_groups();
    if (grid == QuantGrid::Int4Symmetric) {
        pw.scales.assign(pw.cols * n_groups, 0.0f);
    } else {
        pw.scale_exps.assign(pw.cols * n_groups, 127);
    }

    std::vector<double> buf(group);
    for (std::size_t j = 0; j < pw.cols; ++j) {
        for (std::size_t g = 0; g < n_groups; ++g) {
            double mx = 0.0;
            for (std::size_t k = 0; k < group; ++k) {
                const std::size_t i = g * group + k;
                buf[k] = (i < w.rows()) ? w(i, j) : 0.0;
                mx = std::max(mx, std::abs(buf[k]));
            }
            const std::size_t nib_base = j * pw.padded_rows + g * group;
            if (grid == QuantGrid::Int4Symmetric) {
                const float s = static_cast<float>(mx / 7.0);
                pw.scales[j * n_groups + g] = s;
                for (std::size_t k = 0; k < group; ++k) {
                    int q = 0;
                    if (s != 0.0f) {
                        double r = std::nearbyint(buf[k] / static_cast<double>(s));
                        if (r < -7.0) r = -7.0;
                        if (r > 7.0) r = 7.0;
                        q = static_cast<int>(r);
                    }
                    detail::pack_nibble(pw.codes, nib_base + k,
                                        static_cast<std::uint8_t>(q + 8));
                }
            } else {
                const int e = mxfp4_block_exponent(mx);
                pw.scale_exps[j * n_groups + g] = static_cast<std::uint8_t>(e + 127);
                const double inv = std::ldexp(1.0, -e);
                for (std::size_t k = 0; k < group; ++k) {
                    double scaled = buf[k] * inv;
                    if (scaled > 6.0) scaled = 6.0;
                    if (scaled < -6.0) scaled = -6.0;
                    detail::pack_nibble(pw.codes, nib_base + k, mxfp4_encode_element(scaled));
                }
            }
        }
    }
    return pw;
}

inline Matrix dequantize_packed(const PackedWeight& pw) {
    Matrix out(pw.rows, pw.cols);
    const std::size_t n_groups = pw.n_groups();
    for (std::size_t j = 0; j < pw.cols; ++j) {
        for (std::size_t g = 0; g < n_groups; ++g) {
            const std::size_t nib_base = j * pw.padded_rows + g * pw.group;
            for (std::size_t k = 0; k < pw.group; ++k) {
                const std::size_t i = g * pw.group + k;
                if (i >= pw.rows) break;
                const std::uint8_t nib = detail::unpack_nibble(pw.codes, nib_base + k);
                if (pw.grid == QuantGrid::Int4Symmetric) {
                    const double s = pw.scales[j * n_groups + g];
                    out(i, j) = s * (static_cast<int>(nib) - 8);
                } else {
                    const int e = static_cast<int>(pw.scale_exps[j * n_groups + g]) - 127;
                    out(i, j) = std::ldexp(mxfp4_decode_element(nib), e);
                }
            }
        }
    }
    return out;
}

} // namespace w4a4
