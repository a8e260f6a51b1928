// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "w4a4/matrix.hpp"

namespace w4a4 {

enum class Expert : std::uint8_t { high_noise = 0, low_noise = 1 };

inline constexpr std::array<Expert, 2> kExperts = {Expert::high_noise, Expert::low_noise};

inline std::string expert_name(Expert e) {
    return e == Expert::high_noise ? "high_noise" : "low_noise";
}

inline Expert expert_from_name(const std::string& s) {
    if (s == "high_noise") return Expert::high_noise;
    if (s == "low_noise") return Expert::low_noise;
    throw DomainError("unknown expert name: " + s);
}

/// The ten linear modules of a block, in execution order.
inline constexpr std::array<const char*, 10> kLayerModules = {
    "self_attn.q", "self_attn.k", "self_attn.v", "self_attn.o",
    "cross_attn.q", "cross_attn.k", "cross_attn.v", "cross_attn.o",
    "ffn.0", "ffn.2"};

inline int module_index(const std::string& module) {
    for (std::size_t i = 0; i < kLayerModules.size(); ++i) {
        if (module == kLayerModules[i]) return static_cast<int>(i);
    }
    return -1;
}

/// Canonical layer identifier "blocks.<i>.<module>".
struct LayerPath {
    std::size_t block = 0;
    std::string module;

    std::string str() const { return "blocks." + std::to_string(block) + "." + module; }

    bool operator==(const LayerPath& o) const { return block == o.block && module == o.module; }
    bool operator<(const LayerPath& o) const {
        if (block != o.block) return block < o.block;
        return module_index(module) < module_index(o.module);
    }

    static LayerPath parse(const std::string& s) {
        if (s.rfind("blocks.", 0) != 0) throw DomainError("LayerPath: bad prefix in " + s);
        const std::size_t dot = s.find('.', 7);
        if (dot == std::string::npos) throw DomainError("LayerPath: malformed " + s);
        LayerPath p;
        p.block = static_cast<std::size_t>(std::stoul(s.substr(7, dot - 7)));
        p.module = s.substr(dot + 1);
        if (module_index(p.module) < 0) throw DomainError("LayerPath: unknown module in " + s);
        return p;
    }
};

/// Suffix match used both for capture filters and kept_fp patterns.
/// "*" matches everything; otherwise the canonical path must end with the
/// pattern ("ffn.2" matches every block's FFN down projection).
inline bool path_matches_suffix(const LayerPath& path, const std::string& pattern) {
    if (pattern == "*") return true;
    const std::string s = path.str();
    if (pattern.size() > s.size()) return false;
    return s.compare(s.size() - pattern.size(), pattern.size(), pattern) == 0;
}

inline bool path_matches_any(const LayerPath& path, const std::vector<std::string>& patterns) {
    for (const auto& p : patterns) {
        if (path_matches_suffix(path, p)) return true;
    }
    return false;
}

struct ToyDiTConfig {
    std::size_t d_model = 64;
    std::size_t n_blocks = 6;
    std::size_t seq_len = 32;
    std::size_t ctx_len = 16;
    std::size_t n_steps = 40;
    double expert_boundary = 0.5;
    double nonstationarity_gain = 8.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (d_model < 8) throw DomainError("ToyDiTConfig: d_model must be >= 8");
        if (n_blocks < 2) throw DomainError("ToyDiTConfig: n_blocks must be >= 2");
        if (seq_len < 1 || ctx_len < 1) throw DomainError("ToyDiTConfig: empty sequence");
        if (n_steps < 2) throw DomainError("ToyDiTConfig: n_steps must be >= 2");
        if (!(expert_boundary > 0.0 && expert_boundary < 1.0)) {
            throw DomainError("ToyDiTConfig: expert_boundary must be in (0, 1)");
        }
        if (nonstationarity_gain < 1.0) {
            throw DomainError("ToyDiTConfig: nonstationarity_gain must be >= 1");
        }
    }

    /// t_i = 1 - i / (n_steps - 1): from pure noise at t=1 down to t=0.
    std::vector<double> schedule() const {
        std::vector<double> ts(n_steps);
        for (std::size_t i = 0; i < n_steps; ++i) {
            ts[i] = 1.0 - static_cast<double>(i) / static_cast<double>(n_steps - 1);
        }
        return ts;
    }

    Expert route(double t) const {
        return t >= expert_boundary ? Expert::high_noise : Expert::low_noise;
    }

    /// (C_in, C_out) of a module at this width.
    std::pair<std::size_t, std::size_t> layer_dims(const std::string& module) const {
        if (module == "ffn.0") return {d_model, 4 * d_model};
        if (module == "ffn.2") return {4 * d_model, d_model};
        return {d_model, d_model};
    }
};

/// One captured layer input: which layer, which expert ran it, at which
/// timestep, and the (tokens x C_in) input itself.
struct CalibrationRecord {
    LayerPath layer;
    Expert expert = Expert::high_noise;
    double timestep = 0.0;
    Matrix input;
};

using CalibrationRecords = std::vector<CalibrationRecord>;

// ---------------------------------------------------------------------------
// Deterministic PRNG (splitmix64 + Box-Muller), stable across platforms.
// ---------------------------------------------------------------------------

class Prng {
public:
    explicit Prng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    double uniform() { // in (0, 1)
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

private:
    std::uint64_t state_;
    bool have_cached_ = false;
    double cached_ = 0.0;
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct BlockWeights {
    std::array<Matrix, 10> w; // indexed by module_index
};

struct ToyModel {
    ToyDiTConfig cfg;
    std::array<std::vector<BlockWeights>, 2> experts; // [expert][block]
    Matrix context;                                   // fixed cross-attention context

    const Matrix& layer_weight(Expert e, const LayerPath& p) const {
        return experts[static_cast<std::size_t>(e)][p.block].w[module_index(p.module)];
    }

    std::vector<LayerPath> all_paths() const {
        std::vector<LayerPath> out;
        for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
            for (const char* m : kLayerModules) out.push_back(LayerPath{b, m});
        }
        return out;
    }
};

namespace detail {

inline Matrix random_weight(Prng& rng, std::size_t c_in, std::size_t c_out) {
    Matrix w(c_in, c_out);
    const double std = 1.0 / std::sqrt(static_cast<double>(c_in));
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = std * rng.normal();
    return w;
}

// Scale a few output channels up so the downstream activation stream carries
// heavy-tailed channels for smoothing and the low-rank branch to absorb.
inline void inject_heavy_tail(Prng& rng, Matrix& w, double factor) {
    const std::size_t n_inject = std::max<std::size_t>(1, w.cols() / 64);
    for (std::size_t k = 0; k < n_inject; ++k) {
        const std::size_t col = rng.next_u64() % w.cols();
        for (std::size_t i = 0; i < w.rows(); ++i) w(i, col) *= factor;
    }
}

} // namespace detail

inline constexpr double kHeavyTailFactor = 24.0;

/// Two independent expert stacks plus a fixed seeded cross-attention
/// context. Deterministic per seed.
inline ToyModel build_model(const ToyDiTConfig& cfg) {
    cfg.validate();
    ToyModel model;
    model.cfg = cfg;
    for (Expert e : kExperts) {
        auto& stack = model.experts[static_cast<std::size_t>(e)];
        stack.resize(cfg.n_blocks);
        for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
            for (std::size_t m = 0; m < kLayerModules.size(); ++m) {
                const auto [c_in, c_out] = cfg.layer_dims(kLayerModules[m]);
                Prng rng(mix_seed(cfg.seed, 1000 + 97 * static_cast<std::uint64_t>(e) +
                                                10 * b + m));
                Matrix w = detail::random_weight(rng, c_in, c_out);
                detail::inject_heavy_tail(rng, w, kHeavyTailFactor);
                stack[b].w[m] = std::move(w);
            }
        }
    }
    Prng ctx_rng(mix_seed(cfg.seed, 7777));
    model.context = Matrix(cfg.ctx_len, cfg.d_model);
    for (std::size_t i = 0; i < model.context.size(); ++i) {
        model.context.data()[i] = ctx_rng.normal();
    }
    return model;
}

// ---------------------------------------------------------------------------
// Forward pass and trajectory
// ---------------------------------------------------------------------------

namespace detail {

inline Matrix rmsnorm_rows(const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) ms += x(i, j) * x(i, j);
        const double inv = 1.0 / std::sqrt(ms / static_cast<double>(x.cols()) + 1e-8);
        for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) * inv;
    }
    return out;
}

inline void softmax_rows(Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double mx = m(i, 0);
        for (std::size_t j = 1; j < m.cols(); ++j) mx = std::max(mx, m(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) {
            m(i, j) = std::exp(m(i, j) - mx);
            sum += m(i, j);
        }
        for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) /= sum;
    }
}

inline Matrix gelu(const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        out.data()[i] = 0.5 * v * (1.0 + std::erf(v / 1.4142135623730951));
    }
    return out;
}

inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v) {
    Matrix scores = matmul(q, transpose(k));
    // Bounded logits keep the softmax concentration, and with it the output
    // magnitude, stable across the trajectory.
    const double inv = 1.0 / static_cast<double>(q.cols());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores.data()[i] = 1.5 * std::tanh(scores.data()[i] * inv);
    }
    softmax_rows(scores);
    return matmul(scores, v);
}

} // namespace detail

using CaptureFilter = std::function<bool(const LayerPath&)>;

inline CaptureFilter capture_all() {
    return [](const LayerPath&) { return true; };
}

inline CaptureFilter capture_suffixes(std::vector<std::string> patterns) {
    return [patterns = std::move(patterns)](const LayerPath& p) {
        return path_matches_any(p, patterns);
    };
}

/// One denoiser evaluation at timestep t with the given expert stack.
/// A timestep-conditioned modulation (1 + (gain-1)*t) scales the normalized
/// sub-layer inputs, so early (noisy) steps see larger dynamic range.
/// Captured inputs are the exact matrices each linear module consumes.
inline Matrix toy_dit_forward(const ToyModel& model, const Matrix& x, double t, Expert expert,
                              const CaptureFilter& filter, CalibrationRecords* records) {
    const ToyDiTConfig& cfg = model.cfg;
    const double mod = 1.0 + (cfg.nonstationarity_gain - 1.0) * t;
    const auto& stack = model.experts[static_cast<std::size_t>(expert)];

    auto capture = [&](std::size_t block, const char* module, const Matrix& input) {
        if (!records) return;
        LayerPath p{block, module};
        if (filter && !filter(p)) return;
        records->push_back(CalibrationRecord{std::move(p), expert, t, input});
    };

    // Sub-layer outputs feed the residual stream at reduced weight so the
    // stream's channel profile drifts slowly over the trajectory.
    constexpr double kResidualWeight = 0.5;
    Matrix h = x;
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        const BlockWeights& bw = stack[b];

        Matrix u1 = detail::rmsnorm_rows(h);
        for (std::size_t i = 0; i < u1.size(); ++i) u1.data()[i] *= mod;
        capture(b, "self_attn.q", u1);
        capture(b, "self_attn.k", u1);
        capture(b, "self_attn.v", u1);
        Matrix attn = detail::attention(matmul(u1, bw.w[0]), matmul(u1, bw.w[1]),
                                        matmul(u1, bw.w[2]));
        capture(b, "self_attn.o", attn);
        h = add(h, scale(matmul(attn, bw.w[3]), kResidualWeight));

        Matrix u2 = detail::rmsnorm_rows(h);
        for (std::size_t i = 0; i < u2.size(); ++i) u2.data()[i] *= mod;
        capture(b, "cross_attn.q", u2);
        capture(b, "cross_attn.k", model.context);
        capture(b, "cross_attn.v", model.context);
        Matrix cattn = detail::attention(matmul(u2, bw.w[4]), matmul(model.context, bw.w[5]),
                                         matmul(model.context, bw.w[6]));
        capture(b, "cross_attn.o", cattn);
        h = add(h, scale(matmul(cattn, bw.w[7]), kResidualWeight));

        Matrix u3 = detail::rmsnorm_rows(h);
        for (std::size_t i = 0; i < u3.size(); ++i) u3.data()[i] *= mod;
        capture(b, "ffn.0", u3);
        Matrix g = detail::gelu(matmul(u3, bw.w[8]));
        capture(b, "ffn.2", g);
        h = add(h, scale(matmul(g, bw.w[9]), kResidualWeight));
    }

    // Denoiser output: a contractive term keeps the latent scale bounded over
    // the trajectory; the transformer contribution is tanh-bounded.
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out.data()[i] = 0.6 * x.data()[i] + 0.3 * std::tanh(h.data()[i]);
    }
    return out;
}

struct TrajectoryResult {
    Matrix final_latent;
    CalibrationRecords records;
};

/// Euler denoising from t=1 to t=0 over n_steps uniform steps, routing to
/// the high-noise expert while t >= expert_boundary. Fully deterministic
/// per (config, seed).
inline TrajectoryResult denoise_trajectory(const ToyModel& model, const ToyDiTConfig& cfg,
                                           const CaptureFilter& filter = capture_all()) {
    cfg.validate();
    Prng rng(mix_seed(cfg.seed, 42424242ULL));
    // Correlated channels in the initial latent, as in real video latents.
    Matrix z(cfg.seq_len, cfg.d_model);
    for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
    Matrix mixer = Matrix::identity(cfg.d_model);
    const double mix_std = 0.8 / std::sqrt(static_cast<double>(cfg.d_model));
    for (std::size_t i = 0; i < mixer.size(); ++i) mixer.data()[i] += mix_std * rng.normal();
    Matrix x = matmul(z, mixer);

    TrajectoryResult result;
    const std::vector<double> ts = cfg.schedule();
    const double dt = 1.0 / static_cast<double>(cfg.n_steps - 1);
    for (double t : ts) {
        const Expert e = cfg.route(t);
        Matrix f = toy_dit_forward(model, x, t, e, filter, &result.records);
        for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] -= dt * f.data()[i];
    }
    result.final_latent = std::move(x);
    return result;
}

// ---------------------------------------------------------------------------
// Calibration dump (binary, little-endian)
// ---------------------------------------------------------------------------

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
inline void write_pod(std::ostream& os, T v) {
    write_bytes(os, &v, sizeof(T));
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) throw IntegrityError("calibration dump truncated");
}

template <typename T>
inline T read_pod(std::istream& is) {
    T v;
    read_bytes(is, &v, sizeof(T));
    return v;
}

} // namespace detail

inline constexpr char kCalibMagic[8] = {'W', '4', 'A', '4', 'C', 'A', 'L', '1'};

inline void write_calibration_dump(const std::string& path, const ToyDiTConfig& cfg,
                                   const CalibrationRecords& records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IntegrityError("cannot open " + path + " for writing");
    detail::write_bytes(os, kCalibMagic, sizeof(kCalibMagic));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.d_model));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.n_blocks));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.seq_len));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.ctx_len));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.n_steps));
    detail::write_pod<double>(os, cfg.expert_boundary);
    detail::write_pod<double>(os, cfg.nonstationarity_gain);
    detail::write_pod<std::uint64_t>(os, cfg.seed);
    detail::write_pod<std::uint64_t>(os, records.size());
    for (const CalibrationRecord& r : records) {
        const std::string p = r.layer.str();
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.size()));
        detail::write_bytes(os, p.data(), p.size());
        detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(r.expert));
        detail::write_pod<double>(os, r.timestep);
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(r.input.rows()));
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(r.input.cols()));
        for (std::size_t i = 0; i < r.input.size(); ++i) {
            detail::write_pod<float>(os, static_cast<float>(r.input.data()[i]));
        }
    }
    if (!os) throw IntegrityError("write failed for " + path);
}

struct CalibrationDump {
    ToyDiTConfig cfg;
    CalibrationRecords records;
};

inline CalibrationDump read_calibration_dump(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IntegrityError("cannot open " + path);
    char magic[8];
    detail::read_bytes(is, magic, sizeof(magic));
    if (std::memcmp(magic, kCalibMagic, sizeof(magic)) != 0) {
        throw FormatError("not a calibration dump: " + path);
    }
    CalibrationDump dump;
    dump.cfg.d_model = detail::read_pod<std::uint32_t>(is);
    dump.cfg.n_blocks = detail::read_pod<std::uint32_t>(is);
    dump.cfg.seq_len = detail::read_pod<std::uint32_t>(is);
    dump.cfg.ctx_len = detail::read_pod<std::uint32_t>(is);
    dump.cfg.n_steps = detail::read_pod<std::uint32_t>(is);
    dump.cfg.expert_boundary = detail::read_pod<double>(is);
    dump.cfg.nonstationarity_gain = detail::read_pod<double>(is);
    dump.cfg.seed = detail::read_pod<std::uint64_t>(is);
    const std::uint64_t n = detail::read_pod<std::uint64_t>(is);
    dump.records.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        const std::uint32_t len = detail::read_pod<std::uint32_t>(is);
        std::string pathstr(len, '\0');
        detail::read_bytes(is, pathstr.data(), len);
        CalibrationRecord rec;
        rec.layer = LayerPath::parse(pathstr);
        rec.expert = static_cast<Expert>(detail::read_pod<std::uint8_t>(is));
        rec.timestep = detail::read_pod<double>(is);
        const std::uint32_t rows = detail::read_pod<std::uint32_t>(is);
        const std::uint32_t cols = detail::read_pod<std::uint32_t>(is);
        Matrix m(rows, cols);
        for (std::size_t j = 0; j < m.size(); ++j) {
            m.data()[j] = static_cast<double>(detail::read_pod<float>(is));
        }
        rec.input = std::move(m);
        dump.records.push_back(std::move(rec));
    }
    return dump;
}

} // namespace w4a4
