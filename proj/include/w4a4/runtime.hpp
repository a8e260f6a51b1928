// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "w4a4/clip_search.hpp"
#include "w4a4/gptq.hpp"
#include "w4a4/lowrank.hpp"
#include "w4a4/quantize.hpp"
#include "w4a4/smoothing.hpp"
#include "w4a4/toy_dit.hpp"

namespace w4a4 {

inline constexpr const char* kFormatVersion = "w4a4-v1";

// ---------------------------------------------------------------------------
// QuantizedLinear
// ---------------------------------------------------------------------------

/// One calibrated layer. Numeric parameters are stored at their serialized
/// width (float32 smoothing/low-rank/scales, packed 4-bit residual codes);
/// kept_fp layers carry the smoothed weight at full width instead of codes.
/// Double-precision caches for the forward pass are derived on finalize().
struct QuantizedLinear {
    LayerPath path;
    std::size_t c_in = 0;
    std::size_t c_out = 0;
    QuantGrid grid = QuantGrid::Int4Symmetric;
    std::size_t rank = 0;
    bool kept_fp = false;

    std::vector<float> smoothing; // length c_in
    std::vector<float> l1;        // c_in * rank, row-major
    std::vector<float> l2;        // rank * c_out, row-major
    PackedWeight residual;        // packed 4-bit residual (non-kept_fp)
    Matrix kept_weight;           // smoothed weight, kept_fp only

    // Derived caches (not serialized).
    std::vector<double> inv_smoothing;
    Matrix l1_cache;
    Matrix l2_cache;
    Matrix residual_cache;

    void finalize() {
        inv_smoothing.resize(smoothing.size());
        for (std::size_t i = 0; i < smoothing.size(); ++i) {
            inv_smoothing[i] = 1.0 / static_cast<double>(smoothing[i]);
        }
        if (rank > 0) {
            l1_cache = Matrix(c_in, rank);
            for (std::size_t i = 0; i < l1.size(); ++i) {
                l1_cache.data()[i] = static_cast<double>(l1[i]);
            }
            l2_cache = Matrix(rank, c_out);
            for (std::size_t i = 0; i < l2.size(); ++i) {
                l2_cache.data()[i] = static_cast<double>(l2[i]);
            }
        }
        if (!kept_fp) {
            residual_cache = dequantize_packed(residual);
        }
    }

    bool payload_equal(const QuantizedLinear& o) const {
        return path == o.path && c_in == o.c_in && c_out == o.c_out && grid == o.grid &&
               rank == o.rank && kept_fp == o.kept_fp && smoothing == o.smoothing &&
               l1 == o.l1 && l2 == o.l2 && residual.codes == o.residual.codes &&
               residual.scales == o.residual.scales &&
               residual.scale_exps == o.residual.scale_exps &&
               kept_weight == o.kept_weight;
    }
};

/// Pre-clip to the threshold implied by the params, then encode on the
/// configured grid. One code path for both grids: the uniform quantizer
/// saturates at alpha itself; MXFP4 clips first and block-encodes after.
inline Matrix quantize_activations(const Matrix& x_hat, const UniformQuantParams& params,
                                   QuantGrid grid) {
    if (grid == QuantGrid::Int4Symmetric) {
        return quantize_dequantize(x_hat, params);
    }
    const double alpha = params.alpha();
    Matrix out(x_hat.rows(), x_hat.cols());
    if (alpha <= 0.0) return out;
    std::array<double, kMxfp4BlockSize> buf{};
    for (std::size_t i = 0; i < x_hat.rows(); ++i) {
        for (std::size_t j0 = 0; j0 < x_hat.cols(); j0 += kMxfp4BlockSize) {
            const std::size_t n = std::min(kMxfp4BlockSize, x_hat.cols() - j0);
            for (std::size_t k = 0; k < n; ++k) {
                double v = x_hat(i, j0 + k);
                if (v > alpha) v = alpha;
                if (v < -alpha) v = -alpha;
                buf[k] = v;
            }
            for (std::size_t k = n; k < kMxfp4BlockSize; ++k) buf[k] = 0.0;
            const MXFP4Block block = mxfp4_encode_block(buf.data());
            const auto decoded = mxfp4_decode_block(block);
            for (std::size_t k = 0; k < n; ++k) out(i, j0 + k) = decoded[k];
        }
    }
    return out;
}

/// Decomposed W4A4 forward: smooth the input, run the high-precision
/// low-rank branch, quantize the smoothed activations with the bin-indexed
/// scale, multiply by the dequantized residual and sum. kept_fp layers
/// compute the smoothed product exactly.
inline Matrix forward_quantized(const QuantizedLinear& layer, const Matrix& x, double t,
                                Expert expert, const ClippingPolicy& policy) {
    if (x.cols() != layer.c_in) {
        throw ShapeError("forward_quantized: input has " + std::to_string(x.cols()) +
                         " channels, layer expects " + std::to_string(layer.c_in));
    }
    Matrix x_hat(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < x.cols(); ++j) {
            x_hat(i, j) = x(i, j) * layer.inv_smoothing[j];
        }
    }
    if (layer.kept_fp) {
        return matmul(x_hat, layer.kept_weight);
    }
    const UniformQuantParams params = lookup_scale(policy, layer.path.str(), expert, t);
    Matrix out = (layer.rank > 0)
                     ? matmul(matmul(x_hat, layer.l1_cache), layer.l2_cache)
                     : Matrix(x.rows(), layer.c_out);
    Matrix qa = quantize_activations(x_hat, params, layer.grid);
    return add(out, matmul(qa, layer.residual_cache));
}

// ---------------------------------------------------------------------------
// Clipping-ratio search
// ---------------------------------------------------------------------------

/// For every bin of the expert's binning, evaluate the fully quantized layer
/// under each candidate ratio on that bin's records and store the argmin of
/// the summed squared reconstruction error against the full-precision
/// output. Ties break toward the larger ratio.
inline void search_clip_ratio(const QuantizedLinear& layer, const Matrix& w_reference,
                              const CalibrationRecords& layer_records, Expert expert,
                              const TimestepBinning& binning, const BinStats& stats,
                              const std::vector<double>& candidates, ClippingPolicy& policy) {
    if (candidates.empty()) {
        throw DomainError("search_clip_ratio: empty candidate set");
    }
    std::vector<double> ratios = candidates;
    std::sort(ratios.begin(), ratios.end());

    const std::size_t n_bins = binning.num_bins();
    std::vector<std::vector<const CalibrationRecord*>> per_bin(n_bins);
    for (const CalibrationRecord& r : layer_records) {
        per_bin[assign_bin(binning, r.timestep)].push_back(&r);
    }

    const int qm = grid_q_max(layer.grid);
    for (std::size_t k = 0; k < n_bins; ++k) {
        const BinKey key{layer.path.str(), expert, k};
        if (per_bin[k].empty()) {
            throw CoverageError("search_clip_ratio: empty bin " + key.str());
        }
        const double m = stats.at(key);

        // Per-record invariants of the candidate loop.
        std::vector<Matrix> x_hats, refs, bases;
        for (const CalibrationRecord* r : per_bin[k]) {
            Matrix x_hat(r->input.rows(), r->input.cols());
            for (std::size_t i = 0; i < r->input.rows(); ++i) {
                for (std::size_t j = 0; j < r->input.cols(); ++j) {
                    x_hat(i, j) = r->input(i, j) * layer.inv_smoothing[j];
                }
            }
            refs.push_back(matmul(r->input, w_reference));
            bases.push_back(layer.rank > 0
                                ? matmul(matmul(x_hat, layer.l1_cache), layer.l2_cache)
                                : Matrix(r->input.rows(), layer.c_out));
            x_hats.push_back(std::move(x_hat));
        }

        double best_err = 0.0;
        double best_ratio = ratios.front();
        bool first = true;
        for (double rho : ratios) {
            const UniformQuantParams params{rho * m / qm, 0, -qm, qm};
            double err = 0.0;
            for (std::size_t r = 0; r < x_hats.size(); ++r) {
                Matrix qa = quantize_activations(x_hats[r], params, layer.grid);
                Matrix y = add(bases[r], matmul(qa, layer.residual_cache));
                Matrix diff = subtract(refs[r], y);
                for (std::size_t i = 0; i < diff.size(); ++i) {
                    err += diff.data()[i] * diff.data()[i];
                }
            }
            if (first || err <= best_err) { // ascending order: ties go to larger rho
                best_err = err;
                best_ratio = rho;
                first = false;
            }
        }
        policy.entries[key] = PolicyEntry{best_ratio, m, best_ratio * m / qm};
    }
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

enum class Variant { rtn, svd_rtn, svd_gptq, svd_gptq_tsclip, keepfp_diag };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::rtn: return "rtn";
        case Variant::svd_rtn: return "svd_rtn";
        case Variant::svd_gptq: return "svd_gptq";
        case Variant::svd_gptq_tsclip: return "svd_gptq_tsclip";
        case Variant::keepfp_diag: return "keepfp_diag";
    }
    throw DomainError("bad variant");
}

inline Variant variant_from_name(const std::string& s) {
    for (Variant v : {Variant::rtn, Variant::svd_rtn, Variant::svd_gptq,
                      Variant::svd_gptq_tsclip, Variant::keepfp_diag}) {
        if (variant_name(v) == s) return v;
    }
    throw DomainError("unknown variant: " + s);
}

struct QuantizeConfig {
    QuantGrid grid = QuantGrid::Int4Symmetric;
    std::size_t rank = 2;
    std::size_t group = 64;
    double migration = 0.5;
    double damping = 0.01;
    std::size_t bins_per_expert = 4;
    std::vector<double> candidates = {0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    StatMode stat_mode = StatMode::absmax();
    std::vector<std::string> kept_fp_patterns;
    bool use_smoothing = true;
    bool use_gptq = true;
};

/// Table-style variant presets. rtn reproduces the plain round-to-nearest
/// row: no smoothing, no low-rank branch, one bin, ratio fixed at 1.
inline QuantizeConfig variant_config(Variant v, QuantizeConfig base = {}) {
    switch (v) {
        case Variant::rtn:
            base.use_smoothing = false;
            base.use_gptq = false;
            base.rank = 0;
            base.bins_per_expert = 1;
            base.candidates = {1.0};
            break;
        case Variant::svd_rtn:
            base.use_gptq = false;
            base.bins_per_expert = 1;
            base.candidates = {1.0};
            break;
        case Variant::svd_gptq:
            base.bins_per_expert = 1;
            base.candidates = {1.0};
            break;
        case Variant::svd_gptq_tsclip:
            break;
        case Variant::keepfp_diag:
            base.kept_fp_patterns = {"self_attn.o", "ffn.2"};
            break;
    }
    return base;
}

struct QuantizedModel {
    std::string format_version = kFormatVersion;
    std::string variant = "custom";
    ToyDiTConfig cfg;
    QuantGrid grid = QuantGrid::Int4Symmetric;
    std::size_t group = 64;
    std::map<Expert, TimestepBinning> binning;
    ClippingPolicy policy;
    std::array<std::map<std::string, QuantizedLinear>, 2> layers; // [expert][path]

    const QuantizedLinear& layer(Expert e, const std::string& path) const {
        const auto& m = layers[static_cast<std::size_t>(e)];
        auto it = m.find(path);
        if (it == m.end()) throw PolicyError("QuantizedModel: no layer " + path);
        return it->second;
    }

    Matrix forward(Expert e, const std::string& path, const Matrix& x, double t) const {
        return forward_quantized(layer(e, path), x, t, e, policy);
    }

    /// Both experts carry the same layer set, and every non-kept_fp layer has
    /// a policy entry for every bin of its expert's binning.
    void validate() const {
        for (const auto& [path, l] : layers[0]) {
            if (layers[1].find(path) == layers[1].end()) {
                throw FormatError("QuantizedModel: layer sets differ at " + path);
            }
        }
        if (layers[0].size() != layers[1].size()) {
            throw FormatError("QuantizedModel: layer sets differ in size");
        }
        for (Expert e : kExperts) {
            const auto& per_expert = layers[static_cast<std::size_t>(e)];
            if (per_expert.empty()) continue;
            const TimestepBinning& b = policy.binning_for(e);
            for (const auto& [path, l] : per_expert) {
                if (l.kept_fp) continue;
                for (std::size_t k = 0; k < b.num_bins(); ++k) {
                    policy.entry(BinKey{path, e, k}); // throws PolicyError if absent
                }
            }
        }
    }
};

/// Per-expert, per-layer pipeline: smoothing -> low-rank split -> GPTQ (or
/// RTN) residual -> clipping-ratio search. Low-rank factors and the
/// smoothing vector are rounded to their 32-bit storage width before
/// anything downstream consumes them, so the serialized model reproduces
/// calibration bit-for-bit.
inline QuantizedModel quantize_model(const ToyModel& model, const CalibrationRecords& records,
                                     const QuantizeConfig& qcfg) {
    if (records.empty()) {
        throw CalibrationError("quantize_model: no calibration records");
    }
    QuantizedModel qm;
    qm.cfg = model.cfg;
    qm.grid = qcfg.grid;
    qm.group = qcfg.group;
    qm.binning[Expert::high_noise] = TimestepBinning::uniform(
        model.cfg.expert_boundary, 1.0, qcfg.bins_per_expert);
    qm.binning[Expert::low_noise] = TimestepBinning::uniform(
        0.0, model.cfg.expert_boundary, qcfg.bins_per_expert);
    qm.policy.grid = qcfg.grid;
    qm.policy.candidate_set = qcfg.candidates;
    qm.policy.binning = qm.binning;

    // Group records per expert and per layer path.
    std::array<CalibrationRecords, 2> expert_records;
    std::array<std::map<std::string, CalibrationRecords>, 2> by_layer;
    for (const CalibrationRecord& r : records) {
        expert_records[static_cast<std::size_t>(r.expert)].push_back(r);
        by_layer[static_cast<std::size_t>(r.expert)][r.layer.str()].push_back(r);
    }

    for (Expert e : kExperts) {
        const std::size_t ei = static_cast<std::size_t>(e);
        if (expert_records[ei].empty()) {
            throw CalibrationError("quantize_model: no records for expert " + expert_name(e));
        }
        // Strict per-expert stats; raises CoverageError on any missing bin.
        const BinStats stats = collect_bin_stats(expert_records[ei], qm.binning.at(e),
                                                 qcfg.stat_mode, /*require_all_bins=*/true);

        std::vector<std::string> missing;
        for (const LayerPath& path : model.all_paths()) {
            if (by_layer[ei].find(path.str()) == by_layer[ei].end()) {
                missing.push_back(expert_name(e) + "/" + path.str());
            }
        }
        if (!missing.empty()) {
            std::string list;
            for (const auto& s : missing) list += " " + s;
            throw CalibrationError("quantize_model: layers without records:" + list);
        }

        for (const LayerPath& path : model.all_paths()) {
            const Matrix& w = model.layer_weight(e, path);
            const CalibrationRecords& recs = by_layer[ei][path.str()];

            QuantizedLinear ql;
            ql.path = path;
            ql.c_in = w.rows();
            ql.c_out = w.cols();
            ql.grid = qcfg.grid;

            std::vector<double> act_absmax(w.rows(), 0.0);
            for (const CalibrationRecord& r : recs) {
                for (std::size_t i = 0; i < r.input.rows(); ++i) {
                    for (std::size_t j = 0; j < r.input.cols(); ++j) {
                        act_absmax[j] = std::max(act_absmax[j], std::abs(r.input(i, j)));
                    }
                }
            }
            SmoothingVector d = qcfg.use_smoothing
                                    ? compute_smoothing(act_absmax, w, qcfg.migration)
                                    : SmoothingVector::ones(w.rows());
            ql.smoothing.resize(w.rows());
            for (std::size_t i = 0; i < w.rows(); ++i) {
                ql.smoothing[i] = static_cast<float>(d.d[i]);
                d.d[i] = static_cast<double>(ql.smoothing[i]); // storage width
            }

            Matrix w_hat(w.rows(), w.cols());
            for (std::size_t i = 0; i < w.rows(); ++i) {
                for (std::size_t j = 0; j < w.cols(); ++j) w_hat(i, j) = w(i, j) * d.d[i];
            }

            if (path_matches_any(path, qcfg.kept_fp_patterns)) {
                ql.kept_fp = true;
                ql.kept_weight = std::move(w_hat);
                ql.finalize();
                qm.layers[ei][path.str()] = std::move(ql);
                continue;
            }

            const std::size_t r_eff = std::min(qcfg.rank, std::min(w.rows(), w.cols()));
            ql.rank = r_eff;
            Matrix residual = w_hat;
            if (r_eff > 0) {
                auto [factors, res] = split_low_rank(w_hat, r_eff);
                ql.l1.resize(factors.l1.size());
                for (std::size_t i = 0; i < factors.l1.size(); ++i) {
                    ql.l1[i] = static_cast<float>(factors.l1.data()[i]);
                }
                ql.l2.resize(factors.l2.size());
                for (std::size_t i = 0; i < factors.l2.size(); ++i) {
                    ql.l2[i] = static_cast<float>(factors.l2.data()[i]);
                }
                Matrix l1d(w.rows(), r_eff);
                for (std::size_t i = 0; i < ql.l1.size(); ++i) {
                    l1d.data()[i] = static_cast<double>(ql.l1[i]);
                }
                Matrix l2d(r_eff, w.cols());
                for (std::size_t i = 0; i < ql.l2.size(); ++i) {
                    l2d.data()[i] = static_cast<double>(ql.l2[i]);
                }
                residual = subtract(w_hat, matmul(l1d, l2d));
            }

            if (qcfg.use_gptq) {
                HessianAccumulator acc(w.rows());
                for (const CalibrationRecord& r : recs) {
                    accumulate(acc, smooth_activations(r.input, d.d));
                }
                ql.residual = gptq_quantize(residual, acc, qcfg.grid, qcfg.group,
                                            qcfg.damping)
                                  .packed;
            } else {
                ql.residual = quantize_weight_grouped(residual, qcfg.grid, qcfg.group);
            }

            ql.finalize();
            search_clip_ratio(ql, w, recs, e, qm.binning.at(e), stats, qcfg.candidates,
                              qm.policy);
            qm.layers[ei][path.str()] = std::move(ql);
        }
    }
    qm.validate();
    return qm;
}

// ---------------------------------------------------------------------------
// Memory accounting
// ---------------------------------------------------------------------------

struct MemoryBreakdown {
    std::uint64_t codes_bytes = 0;
    std::uint64_t scale_bytes = 0;
    std::uint64_t lowrank_bytes = 0;
    std::uint64_t smoothing_bytes = 0;
    std::uint64_t kept_fp_bytes = 0;

    std::uint64_t total() const {
        return codes_bytes + scale_bytes + lowrank_bytes + smoothing_bytes + kept_fp_bytes;
    }
};

inline std::uint64_t layer_payload_bytes(const QuantizedLinear& l) {
    std::uint64_t n = 4ULL * l.c_in; // smoothing
    if (l.kept_fp) {
        n += 8ULL * l.c_in * l.c_out;
    } else {
        n += 4ULL * l.rank * (l.c_in + l.c_out);
        n += l.residual.code_bytes();
        n += l.residual.scale_bytes();
    }
    return n;
}

/// Byte accounting per component. The total equals the serialized payload
/// size exactly (the manifest text is excluded).
inline MemoryBreakdown estimate_memory(const QuantizedModel& qm) {
    MemoryBreakdown mb;
    for (const auto& per_expert : qm.layers) {
        for (const auto& [path, l] : per_expert) {
            mb.smoothing_bytes += 4ULL * l.c_in;
            if (l.kept_fp) {
                mb.kept_fp_bytes += 8ULL * l.c_in * l.c_out;
            } else {
                mb.lowrank_bytes += 4ULL * l.rank * (l.c_in + l.c_out);
                mb.codes_bytes += l.residual.code_bytes();
                mb.scale_bytes += l.residual.scale_bytes();
            }
        }
    }
    return mb;
}

/// 16-bit-per-weight reference size of the same layer set.
inline std::uint64_t baseline_bytes_16bit(const QuantizedModel& qm) {
    std::uint64_t n = 0;
    for (const auto& per_expert : qm.layers) {
        for (const auto& [path, l] : per_expert) n += 2ULL * l.c_in * l.c_out;
    }
    return n;
}

// ---------------------------------------------------------------------------
// Serialization: manifest (JSON) + little-endian binary payload
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const std::uint8_t* p, std::size_t n) {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

namespace detail {

inline void append_f32(std::vector<std::uint8_t>& out, const std::vector<float>& v) {
    const std::size_t base = out.size();
    out.resize(base + v.size() * 4);
    std::memcpy(out.data() + base, v.data(), v.size() * 4);
}

inline void append_f64(std::vector<std::uint8_t>& out, const std::vector<double>& v) {
    const std::size_t base = out.size();
    out.resize(base + v.size() * 8);
    std::memcpy(out.data() + base, v.data(), v.size() * 8);
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

} // namespace detail

inline nlohmann::json toy_config_to_json(const ToyDiTConfig& cfg) {
    return nlohmann::json{{"d_model", cfg.d_model},
                          {"n_blocks", cfg.n_blocks},
                          {"seq_len", cfg.seq_len},
                          {"ctx_len", cfg.ctx_len},
                          {"n_steps", cfg.n_steps},
                          {"expert_boundary", cfg.expert_boundary},
                          {"nonstationarity_gain", cfg.nonstationarity_gain},
                          {"seed", cfg.seed}};
}

inline ToyDiTConfig toy_config_from_json(const nlohmann::json& j) {
    ToyDiTConfig cfg;
    cfg.d_model = j.at("d_model").get<std::size_t>();
    cfg.n_blocks = j.at("n_blocks").get<std::size_t>();
    cfg.seq_len = j.at("seq_len").get<std::size_t>();
    cfg.ctx_len = j.at("ctx_len").get<std::size_t>();
    cfg.n_steps = j.at("n_steps").get<std::size_t>();
    cfg.expert_boundary = j.at("expert_boundary").get<double>();
    cfg.nonstationarity_gain = j.at("nonstationarity_gain").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

/// Writes <stem>.manifest.json and <stem>.payload.bin.
inline void serialize(const QuantizedModel& qm, const std::string& stem) {
    std::vector<std::uint8_t> payload;
    nlohmann::json layers_json = nlohmann::json::array();

    for (Expert e : kExperts) {
        for (const auto& [path, l] : qm.layers[static_cast<std::size_t>(e)]) {
            const std::uint64_t offset = payload.size();
            detail::append_f32(payload, l.smoothing);
            if (l.kept_fp) {
                detail::append_f64(payload, l.kept_weight.values());
            } else {
                detail::append_f32(payload, l.l1);
                detail::append_f32(payload, l.l2);
                payload.insert(payload.end(), l.residual.codes.begin(),
                               l.residual.codes.end());
                if (l.grid == QuantGrid::Int4Symmetric) {
                    detail::append_f32(payload, l.residual.scales);
                } else {
                    payload.insert(payload.end(), l.residual.scale_exps.begin(),
                                   l.residual.scale_exps.end());
                }
            }
            layers_json.push_back(nlohmann::json{
                {"expert", expert_name(e)},
                {"path", path},
                {"c_in", l.c_in},
                {"c_out", l.c_out},
                {"rank", l.rank},
                {"group", l.kept_fp ? qm.group : l.residual.group},
                {"padded_rows", l.kept_fp ? 0 : l.residual.padded_rows},
                {"kept_fp", l.kept_fp},
                {"offset", offset},
                {"bytes", payload.size() - offset}});
        }
    }

    nlohmann::json binning_json;
    for (const auto& [e, b] : qm.binning) {
        binning_json[expert_name(e)] = nlohmann::json{
            {"lo", b.lo}, {"hi", b.hi}, {"boundaries", b.boundaries}};
    }
    nlohmann::json policy_json = nlohmann::json::object();
    for (const auto& [key, entry] : qm.policy.entries) {
        policy_json[key.str()] = nlohmann::json{
            {"ratio", entry.ratio}, {"m", entry.m}, {"scale", entry.scale}};
    }

    nlohmann::json manifest{{"format_version", qm.format_version},
                            {"variant", qm.variant},
                            {"toy_config", toy_config_to_json(qm.cfg)},
                            {"grid", grid_name(qm.grid)},
                            {"group", qm.group},
                            {"binning", binning_json},
                            {"candidates", qm.policy.candidate_set},
                            {"policy", policy_json},
                            {"layers", layers_json},
                            {"payload_bytes", payload.size()},
                            {"payload_fnv1a64", detail::hex64(fnv1a64(payload.data(),
                                                                      payload.size()))}};

    std::ofstream mf(stem + ".manifest.json", std::ios::trunc);
    if (!mf) throw IntegrityError("cannot write manifest for " + stem);
    mf << manifest.dump(2) << "\n";
    std::ofstream pf(stem + ".payload.bin", std::ios::binary | std::ios::trunc);
    if (!pf) throw IntegrityError("cannot write payload for " + stem);
    pf.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size()));
    if (!mf || !pf) throw IntegrityError("write failed for " + stem);
}

inline QuantizedModel deserialize(const std::string& stem) {
    std::ifstream mf(stem + ".manifest.json");
    if (!mf) throw IntegrityError("cannot open manifest for " + stem);
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest parse error: " + std::string(e.what()));
    }
    const std::string version = manifest.at("format_version").get<std::string>();
    if (version != kFormatVersion) {
        throw FormatError("format version mismatch: file has '" + version + "', expected '" +
                          kFormatVersion + "'");
    }

    std::ifstream pf(stem + ".payload.bin", std::ios::binary);
    if (!pf) throw IntegrityError("cannot open payload for " + stem);
    std::vector<std::uint8_t> payload((std::istreambuf_iterator<char>(pf)),
                                      std::istreambuf_iterator<char>());
    const std::uint64_t expected_bytes = manifest.at("payload_bytes").get<std::uint64_t>();
    if (payload.size() != expected_bytes) {
        throw IntegrityError("payload length " + std::to_string(payload.size()) +
                             " != manifest payload_bytes " + std::to_string(expected_bytes));
    }
    const std::string checksum = detail::hex64(fnv1a64(payload.data(), payload.size()));
    if (checksum != manifest.at("payload_fnv1a64").get<std::string>()) {
        throw IntegrityError("payload checksum mismatch");
    }

    QuantizedModel qm;
    qm.format_version = version;
    qm.variant = manifest.value("variant", "custom");
    qm.cfg = toy_config_from_json(manifest.at("toy_config"));
    qm.grid = grid_from_name(manifest.at("grid").get<std::string>());
    qm.group = manifest.at("group").get<std::size_t>();
    for (const auto& [name, bj] : manifest.at("binning").items()) {
        TimestepBinning b;
        b.lo = bj.at("lo").get<double>();
        b.hi = bj.at("hi").get<double>();
        b.boundaries = bj.at("boundaries").get<std::vector<double>>();
        b.validate();
        qm.binning[expert_from_name(name)] = b;
    }
    qm.policy.grid = qm.grid;
    qm.policy.binning = qm.binning;
    qm.policy.candidate_set = manifest.at("candidates").get<std::vector<double>>();
    for (const auto& [keystr, ej] : manifest.at("policy").items()) {
        const std::size_t s1 = keystr.find('/');
        const std::size_t s2 = keystr.rfind('/');
        if (s1 == std::string::npos || s2 == s1) {
            throw FormatError("bad policy key: " + keystr);
        }
        BinKey key;
        key.expert = expert_from_name(keystr.substr(0, s1));
        key.layer = keystr.substr(s1 + 1, s2 - s1 - 1);
        key.bin = std::stoul(keystr.substr(s2 + 1));
        qm.policy.entries[key] = PolicyEntry{ej.at("ratio").get<double>(),
                                             ej.at("m").get<double>(),
                                             ej.at("scale").get<double>()};
    }

    auto take = [&](std::uint64_t offset, std::uint64_t n, void* dst) {
        if (offset + n > payload.size()) {
            throw IntegrityError("layer span exceeds payload");
        }
        std::memcpy(dst, payload.data() + offset, n);
    };

    for (const auto& lj : manifest.at("layers")) {
        QuantizedLinear l;
        const Expert e = expert_from_name(lj.at("expert").get<std::string>());
        l.path = LayerPath::parse(lj.at("path").get<std::string>());
        l.c_in = lj.at("c_in").get<std::size_t>();
        l.c_out = lj.at("c_out").get<std::size_t>();
        l.rank = lj.at("rank").get<std::size_t>();
        l.kept_fp = lj.at("kept_fp").get<bool>();
        l.grid = qm.grid;
        std::uint64_t off = lj.at("offset").get<std::uint64_t>();

        l.smoothing.resize(l.c_in);
        take(off, 4ULL * l.c_in, l.smoothing.data());
        off += 4ULL * l.c_in;
        if (l.kept_fp) {
            std::vector<double> w(l.c_in * l.c_out);
            take(off, 8ULL * w.size(), w.data());
            off += 8ULL * w.size();
            l.kept_weight = Matrix(l.c_in, l.c_out, std::move(w));
        } else {
            l.l1.resize(l.c_in * l.rank);
            take(off, 4ULL * l.l1.size(), l.l1.data());
            off += 4ULL * l.l1.size();
            l.l2.resize(l.rank * l.c_out);
            take(off, 4ULL * l.l2.size(), l.l2.data());
            off += 4ULL * l.l2.size();

            l.residual.grid = qm.grid;
            l.residual.rows = l.c_in;
            l.residual.cols = l.c_out;
            l.residual.group = lj.at("group").get<std::size_t>();
            l.residual.padded_rows = lj.at("padded_rows").get<std::size_t>();
            l.residual.codes.resize(l.residual.code_bytes());
            take(off, l.residual.codes.size(), l.residual.codes.data());
            off += l.residual.codes.size();
            const std::size_t n_scales = l.residual.n_groups() * l.c_out;
            if (qm.grid == QuantGrid::Int4Symmetric) {
                l.residual.scales.resize(n_scales);
                take(off, 4ULL * n_scales, l.residual.scales.data());
                off += 4ULL * n_scales;
            } else {
                l.residual.scale_exps.resize(n_scales);
                take(off, n_scales, l.residual.scale_exps.data());
                off += n_scales;
            }
        }
        const std::uint64_t expected_span =
            lj.at("offset").get<std::uint64_t>() + lj.at("bytes").get<std::uint64_t>();
        if (off != expected_span) {
            throw IntegrityError("layer span mismatch for " + l.path.str());
        }
        l.finalize();
        qm.layers[static_cast<std::size_t>(e)][l.path.str()] = std::move(l);
    }
    qm.validate();
    return qm;
}

inline bool models_payload_equal(const QuantizedModel& a, const QuantizedModel& b) {
    if (a.format_version != b.format_version || a.grid != b.grid || a.group != b.group) {
        return false;
    }
    if (a.policy.entries != b.policy.entries) return false;
    for (std::size_t e = 0; e < 2; ++e) {
        if (a.layers[e].size() != b.layers[e].size()) return false;
        for (const auto& [path, l] : a.layers[e]) {
            auto it = b.layers[e].find(path);
            if (it == b.layers[e].end() || !l.payload_equal(it->second)) return false;
        }
    }
    return true;
}

} // namespace w4a4
