// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "w4a4/matrix.hpp"
#include "w4a4/runtime.hpp"
#include "w4a4/toy_dit.hpp"

namespace w4a4 {

/// Cosine reconstruction error of one linear module, averaged over its
/// calibration samples.
struct SensitivityCell {
    Expert expert = Expert::high_noise;
    std::size_t block = 0;
    std::string module;
    double cosine_err = 0.0;
};

/// Mean layer-local errors of one quantized variant.
struct AblationRow {
    std::string variant;
    double mean_layer_mse = 0.0;
    double mean_cosine_error = 0.0;
    std::uint64_t model_bytes = 0;
};

namespace detail {

struct LayerErrors {
    double mse = 0.0;    // per-element squared error, averaged over records
    double cosine = 0.0; // mean cosine error over records
};

inline LayerErrors layer_errors(const ToyModel& model, const QuantizedModel& qm, Expert e,
                                const LayerPath& path, const CalibrationRecords& recs) {
    const Matrix& w = model.layer_weight(e, path);
    double sq = 0.0, cos_sum = 0.0;
    std::size_t elements = 0;
    for (const CalibrationRecord& r : recs) {
        Matrix y_ref = matmul(r.input, w);
        Matrix y_hat = qm.forward(e, path.str(), r.input, r.timestep);
        Matrix diff = subtract(y_ref, y_hat);
        for (std::size_t i = 0; i < diff.size(); ++i) sq += diff.data()[i] * diff.data()[i];
        elements += diff.size();
        cos_sum += cosine_error(y_ref, y_hat);
    }
    LayerErrors out;
    out.mse = sq / static_cast<double>(elements);
    out.cosine = cos_sum / static_cast<double>(recs.size());
    return out;
}

inline std::map<std::pair<int, std::string>, CalibrationRecords> group_records(
    const CalibrationRecords& records) {
    std::map<std::pair<int, std::string>, CalibrationRecords> grouped;
    for (const CalibrationRecord& r : records) {
        grouped[{static_cast<int>(r.expert), r.layer.str()}].push_back(r);
    }
    return grouped;
}

} // namespace detail

/// One cell per (expert, block, module).
inline std::vector<SensitivityCell> compute_sensitivity(const ToyModel& model,
                                                        const QuantizedModel& qm,
                                                        const CalibrationRecords& records) {
    auto grouped = detail::group_records(records);
    std::vector<SensitivityCell> cells;
    for (Expert e : kExperts) {
        for (const LayerPath& path : model.all_paths()) {
            const auto& recs = grouped.at({static_cast<int>(e), path.str()});
            SensitivityCell cell;
            cell.expert = e;
            cell.block = path.block;
            cell.module = path.module;
            cell.cosine_err = detail::layer_errors(model, qm, e, path, recs).cosine;
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

inline AblationRow compute_ablation_row(const std::string& variant, const ToyModel& model,
                                        const QuantizedModel& qm,
                                        const CalibrationRecords& records) {
    auto grouped = detail::group_records(records);
    AblationRow row;
    row.variant = variant;
    std::size_t n_layers = 0;
    for (Expert e : kExperts) {
        for (const LayerPath& path : model.all_paths()) {
            const auto& recs = grouped.at({static_cast<int>(e), path.str()});
            const auto err = detail::layer_errors(model, qm, e, path, recs);
            row.mean_layer_mse += err.mse;
            row.mean_cosine_error += err.cosine;
            ++n_layers;
        }
    }
    row.mean_layer_mse /= static_cast<double>(n_layers);
    row.mean_cosine_error /= static_cast<double>(n_layers);
    row.model_bytes = estimate_memory(qm).total();
    return row;
}

/// (expert, bin, ratio) -> count of policy entries that selected the ratio.
inline std::map<std::tuple<Expert, std::size_t, double>, std::size_t> ratio_histogram(
    const ClippingPolicy& policy) {
    std::map<std::tuple<Expert, std::size_t, double>, std::size_t> hist;
    for (const auto& [key, entry] : policy.entries) {
        ++hist[{key.expert, key.bin, entry.ratio}];
    }
    return hist;
}

// ---------------------------------------------------------------------------
// CSV output (schema-stable headers)
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(12) << v;
    return os.str();
}

} // namespace detail

inline void write_sensitivity_csv(std::ostream& os, const std::vector<SensitivityCell>& cells) {
    os << "expert,block,module,cosine_error\n";
    for (const SensitivityCell& c : cells) {
        os << expert_name(c.expert) << "," << c.block << "," << c.module << ","
           << detail::fmt_double(c.cosine_err) << "\n";
    }
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
    os << "variant,mean_layer_mse,mean_cosine_error,model_bytes\n";
    for (const AblationRow& r : rows) {
        os << r.variant << "," << detail::fmt_double(r.mean_layer_mse) << ","
           << detail::fmt_double(r.mean_cosine_error) << "," << r.model_bytes << "\n";
    }
}

inline void write_histogram_csv(
    std::ostream& os, const std::map<std::tuple<Expert, std::size_t, double>, std::size_t>& hist) {
    os << "expert,bin,ratio,count\n";
    for (const auto& [key, count] : hist) {
        os << expert_name(std::get<0>(key)) << "," << std::get<1>(key) << ","
           << detail::fmt_double(std::get<2>(key)) << "," << count << "\n";
    }
}

} // namespace w4a4
