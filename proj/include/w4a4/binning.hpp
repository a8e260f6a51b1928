// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "w4a4/errors.hpp"

namespace w4a4 {

/// Contiguous timestep bins over [lo, hi], delimited by strictly ascending
/// interior boundaries. Bin index = number of boundaries <= t, so a boundary
/// value belongs to the higher-timestep (higher-noise, earlier) bin and
/// indices ascend with t.
struct TimestepBinning {
    double lo = 0.0;
    double hi = 1.0;
    std::vector<double> boundaries;

    std::size_t num_bins() const { return boundaries.size() + 1; }

    void validate() const {
        if (!(lo < hi)) throw DomainError("TimestepBinning: lo must be < hi");
        for (std::size_t i = 0; i < boundaries.size(); ++i) {
            if (boundaries[i] <= lo || boundaries[i] >= hi) {
                throw DomainError("TimestepBinning: boundary outside (lo, hi)");
            }
            if (i > 0 && boundaries[i] <= boundaries[i - 1]) {
                throw DomainError("TimestepBinning: boundaries not strictly ascending");
            }
        }
    }

    static TimestepBinning uniform(double lo, double hi, std::size_t k) {
        if (k == 0) throw DomainError("TimestepBinning: need at least one bin");
        TimestepBinning b;
        b.lo = lo;
        b.hi = hi;
        for (std::size_t i = 1; i < k; ++i) {
            b.boundaries.push_back(lo + (hi - lo) * static_cast<double>(i) /
                                            static_cast<double>(k));
        }
        b.validate();
        return b;
    }
};

inline std::size_t assign_bin(const TimestepBinning& binning, double t) {
    if (t < binning.lo || t > binning.hi) {
        throw RangeError("assign_bin: timestep " + std::to_string(t) + " outside [" +
                         std::to_string(binning.lo) + ", " + std::to_string(binning.hi) + "]");
    }
    std::size_t k = 0;
    for (double b : binning.boundaries) {
        if (b <= t) ++k;
    }
    return k;
}

} // namespace w4a4
