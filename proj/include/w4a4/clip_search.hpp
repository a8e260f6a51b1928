// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "w4a4/binning.hpp"
#include "w4a4/quantize.hpp"
#include "w4a4/toy_dit.hpp"

namespace w4a4 {

/// Reference-magnitude estimator for Eq-style clipping thresholds.
struct StatMode {
    enum class Kind { absmax, percentile } kind = Kind::absmax;
    double p = 99.9; // percentile, used only for Kind::percentile

    static StatMode absmax() { return StatMode{Kind::absmax, 0.0}; }
    static StatMode percentile(double p) { return StatMode{Kind::percentile, p}; }
};

struct BinKey {
    std::string layer;
    Expert expert = Expert::high_noise;
    std::size_t bin = 0;

    bool operator<(const BinKey& o) const {
        return std::tie(layer, expert, bin) < std::tie(o.layer, o.expert, o.bin);
    }
    bool operator==(const BinKey& o) const {
        return layer == o.layer && expert == o.expert && bin == o.bin;
    }

    std::string str() const {
        return expert_name(expert) + "/" + layer + "/" + std::to_string(bin);
    }
};

/// Reference activation magnitude per (layer, expert, bin).
struct BinStats {
    std::map<BinKey, double> m;

    double at(const BinKey& k) const {
        auto it = m.find(k);
        if (it == m.end()) throw CoverageError("BinStats: no entry for " + k.str());
        return it->second;
    }
};

/// m_{l,e,k} from calibration records: absmax of |x| over all records of the
/// triple, or the p-th percentile (nearest rank) of |x|.
/// With require_all_bins, every (layer, expert) pair present must cover every
/// bin of the binning; the first missing triple is reported.
inline BinStats collect_bin_stats(const CalibrationRecords& records,
                                  const TimestepBinning& binning, const StatMode& mode,
                                  bool require_all_bins = true) {
    binning.validate();
    BinStats stats;
    std::map<BinKey, std::vector<double>> values; // percentile mode only
    for (const CalibrationRecord& r : records) {
        const BinKey key{r.layer.str(), r.expert, assign_bin(binning, r.timestep)};
        if (mode.kind == StatMode::Kind::absmax) {
            double& m = stats.m[key]; // default 0
            m = std::max(m, max_abs(r.input));
        } else {
            auto& v = values[key];
            for (std::size_t i = 0; i < r.input.size(); ++i) {
                v.push_back(std::abs(r.input.data()[i]));
            }
        }
    }
    if (mode.kind == StatMode::Kind::percentile) {
        if (!(mode.p > 0.0 && mode.p <= 100.0)) {
            throw DomainError("collect_bin_stats: percentile must be in (0, 100]");
        }
        for (auto& [key, v] : values) {
            std::sort(v.begin(), v.end());
            const std::size_t rank = static_cast<std::size_t>(
                std::ceil(mode.p / 100.0 * static_cast<double>(v.size())));
            stats.m[key] = v[std::min(v.size(), std::max<std::size_t>(rank, 1)) - 1];
        }
    }
    if (require_all_bins) {
        std::map<std::pair<std::string, Expert>, std::vector<bool>> seen;
        for (const auto& [key, _] : stats.m) {
            auto& bins = seen[{key.layer, key.expert}];
            bins.resize(binning.num_bins(), false);
            bins[key.bin] = true;
        }
        for (const auto& [pair, bins] : seen) {
            for (std::size_t k = 0; k < binning.num_bins(); ++k) {
                if (!bins[k]) {
                    throw CoverageError("collect_bin_stats: no records for " +
                                        BinKey{pair.first, pair.second, k}.str());
                }
            }
        }
    }
    return stats;
}

/// One searched policy entry: the winning clipping ratio, the bin's reference
/// magnitude, and the induced activation scale rho * m / q_max.
struct PolicyEntry {
    double ratio = 1.0;
    double m = 0.0;
    double scale = 0.0;

    bool operator==(const PolicyEntry& o) const {
        return ratio == o.ratio && m == o.m && scale == o.scale;
    }
};

/// Lookup table (layer, expert, bin) -> clipping ratio and activation scale.
/// Write-once during calibration, read-only at inference.
struct ClippingPolicy {
    QuantGrid grid = QuantGrid::Int4Symmetric;
    std::vector<double> candidate_set;
    std::map<Expert, TimestepBinning> binning; // per-expert trajectory segment
    std::map<BinKey, PolicyEntry> entries;

    const TimestepBinning& binning_for(Expert e) const {
        auto it = binning.find(e);
        if (it == binning.end()) {
            throw PolicyError("ClippingPolicy: no binning for expert " + expert_name(e));
        }
        return it->second;
    }

    const PolicyEntry& entry(const BinKey& key) const {
        auto it = entries.find(key);
        if (it == entries.end()) {
            throw PolicyError("ClippingPolicy: missing entry " + key.str());
        }
        return it->second;
    }
};

/// O(1) inference-time lookup: map t to its bin and return the precomputed
/// activation quantizer parameters. No recomputation.
inline UniformQuantParams lookup_scale(const ClippingPolicy& policy, const std::string& layer,
                                       Expert expert, double t) {
    const std::size_t bin = assign_bin(policy.binning_for(expert), t);
    const PolicyEntry& e = policy.entry(BinKey{layer, expert, bin});
    const int qm = grid_q_max(policy.grid);
    return UniformQuantParams{e.scale, 0, -qm, qm};
}

} // namespace w4a4
