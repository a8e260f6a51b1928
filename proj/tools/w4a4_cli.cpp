// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver for the W4A4 quantization toolkit: calibrate the toy
// diffusion Transformer, quantize it under the table variants, and emit
// sensitivity / ablation / clip-ratio reports as CSV.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "w4a4/analysis.hpp"
#include "w4a4/runtime.hpp"

namespace fs = std::filesystem;

namespace {

// Relative outputs land under $W4A4_OUT_DIR when it is set.
fs::path resolve_out(const std::string& path) {
    fs::path p(path);
    if (p.is_relative()) {
        if (const char* base = std::getenv("W4A4_OUT_DIR")) {
            p = fs::path(base) / p;
        }
    }
    if (p.has_parent_path()) {
        fs::create_directories(p.parent_path());
    }
    return p;
}

struct ToyFlags {
    std::size_t d_model = 64;
    std::size_t blocks = 6;
    std::size_t seq_len = 32;
    std::size_t ctx_len = 16;
    std::size_t steps = 40;
    double boundary = 0.5;
    double gain = 8.0;
    std::uint64_t seed = 0;

    w4a4::ToyDiTConfig config() const {
        w4a4::ToyDiTConfig cfg;
        cfg.d_model = d_model;
        cfg.n_blocks = blocks;
        cfg.seq_len = seq_len;
        cfg.ctx_len = ctx_len;
        cfg.n_steps = steps;
        cfg.expert_boundary = boundary;
        cfg.nonstationarity_gain = gain;
        cfg.seed = seed;
        return cfg;
    }

    void attach(CLI::App* cmd) {
        cmd->add_option("--d-model", d_model, "model width");
        cmd->add_option("--blocks", blocks, "number of transformer blocks");
        cmd->add_option("--seq-len", seq_len, "latent sequence length");
        cmd->add_option("--ctx-len", ctx_len, "cross-attention context length");
        cmd->add_option("--steps", steps, "denoising steps");
        cmd->add_option("--boundary", boundary, "expert switch timestep fraction");
        cmd->add_option("--gain", gain, "nonstationarity gain (>= 1)");
        cmd->add_option("--seed", seed, "PRNG seed");
    }
};

void check_bin_coverage(const w4a4::CalibrationRecords& records,
                        const w4a4::ToyDiTConfig& cfg, std::size_t bins, bool print) {
    const std::map<w4a4::Expert, w4a4::TimestepBinning> binning = {
        {w4a4::Expert::high_noise,
         w4a4::TimestepBinning::uniform(cfg.expert_boundary, 1.0, bins)},
        {w4a4::Expert::low_noise,
         w4a4::TimestepBinning::uniform(0.0, cfg.expert_boundary, bins)}};
    for (const auto& [e, b] : binning) {
        std::vector<std::size_t> counts(bins, 0);
        for (const auto& r : records) {
            if (r.expert == e) ++counts[w4a4::assign_bin(b, r.timestep)];
        }
        for (std::size_t k = 0; k < bins; ++k) {
            if (print) {
                std::cout << "  " << w4a4::expert_name(e) << " bin " << k << ": "
                          << counts[k] << " records\n";
            }
            if (counts[k] == 0) {
                throw w4a4::CoverageError(
                    "no calibration records for " + w4a4::expert_name(e) + " bin " +
                    std::to_string(k) + "; use more steps or fewer bins");
            }
        }
    }
}

int cmd_calibrate(const ToyFlags& toy, std::size_t bins, const std::string& out) {
    const auto cfg = toy.config();
    cfg.validate();
    auto model = w4a4::build_model(cfg);
    auto result = w4a4::denoise_trajectory(model, cfg);
    check_bin_coverage(result.records, cfg, bins, /*print=*/true);
    const fs::path path = resolve_out(out);
    w4a4::write_calibration_dump(path.string(), cfg, result.records);
    std::cout << "wrote " << result.records.size() << " records to " << path.string()
              << "\n";
    return 0;
}

struct QuantFlags {
    std::string variant = "svd_gptq_tsclip";
    std::size_t rank = 2;
    std::string grid = "int4";
    std::size_t group = 64;
    std::size_t bins = 4;
    double migration = 0.5;
    double damping = 0.01;
    std::vector<double> ratios;
    std::vector<std::string> keep_fp;
};

// Base flags feed the variant preset; on the quantize subcommand explicitly
// passed flags additionally override the preset (run-all keeps the presets
// intact so e.g. --rank does not give the rtn variant a low-rank branch).
w4a4::QuantizeConfig make_quant_config(const QuantFlags& qf, const CLI::App* cmd,
                                       bool explicit_overrides) {
    w4a4::QuantizeConfig base;
    base.grid = w4a4::grid_from_name(qf.grid);
    base.group = base.grid == w4a4::QuantGrid::MXFP4 ? 32 : qf.group;
    base.rank = qf.rank;
    base.migration = qf.migration;
    base.damping = qf.damping;
    base.bins_per_expert = qf.bins;
    if (!qf.ratios.empty()) base.candidates = qf.ratios;
    base.kept_fp_patterns = qf.keep_fp;

    w4a4::QuantizeConfig qcfg =
        w4a4::variant_config(w4a4::variant_from_name(qf.variant), base);
    if (!explicit_overrides) return qcfg;
    auto passed = [&](const std::string& name) {
        const CLI::Option* opt = cmd->get_option_no_throw(name);
        return opt != nullptr && opt->count() > 0;
    };
    if (passed("--rank")) qcfg.rank = qf.rank;
    if (passed("--bins")) qcfg.bins_per_expert = qf.bins;
    if (passed("--ratios")) qcfg.candidates = qf.ratios;
    if (passed("--keep-fp")) qcfg.kept_fp_patterns = qf.keep_fp;
    return qcfg;
}

int cmd_quantize(const std::string& calib, const QuantFlags& qf, const std::string& out,
                 const CLI::App* cmd) {
    auto dump = w4a4::read_calibration_dump(resolve_out(calib).string());
    auto model = w4a4::build_model(dump.cfg);
    auto qcfg = make_quant_config(qf, cmd, /*explicit_overrides=*/true);
    auto qm = w4a4::quantize_model(model, dump.records, qcfg);
    qm.variant = qf.variant;
    const fs::path stem = resolve_out(out);
    w4a4::serialize(qm, stem.string());
    const auto mb = w4a4::estimate_memory(qm);
    std::cout << "variant " << qf.variant << ": payload " << mb.total()
              << " bytes (codes " << mb.codes_bytes << ", scales " << mb.scale_bytes
              << ", low-rank " << mb.lowrank_bytes << ", smoothing " << mb.smoothing_bytes
              << ", kept-fp " << mb.kept_fp_bytes << "); baseline "
              << w4a4::baseline_bytes_16bit(qm) << " bytes at 16-bit\n";
    std::cout << "wrote " << stem.string() << ".manifest.json / .payload.bin\n";
    return 0;
}

int cmd_sensitivity(const std::string& model_stem, const std::string& calib,
                    const std::string& out) {
    auto qm = w4a4::deserialize(resolve_out(model_stem).string());
    auto dump = w4a4::read_calibration_dump(resolve_out(calib).string());
    auto model = w4a4::build_model(qm.cfg);
    auto cells = w4a4::compute_sensitivity(model, qm, dump.records);

    const fs::path path = resolve_out(out);
    std::ofstream os(path);
    if (!os) throw w4a4::IntegrityError("cannot write " + path.string());
    w4a4::write_sensitivity_csv(os, cells);
    std::cout << "wrote " << cells.size() << " rows to " << path.string() << "\n";

    auto sorted = cells;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.cosine_err > b.cosine_err; });
    std::cout << "top-5 most sensitive modules:\n";
    for (std::size_t i = 0; i < std::min<std::size_t>(5, sorted.size()); ++i) {
        std::cout << "  " << w4a4::expert_name(sorted[i].expert) << "/blocks."
                  << sorted[i].block << "." << sorted[i].module
                  << "  cosine_error=" << sorted[i].cosine_err << "\n";
    }
    std::map<std::string, std::pair<double, std::size_t>> per_module;
    for (const auto& c : cells) {
        auto& agg = per_module[c.module];
        agg.first += c.cosine_err;
        agg.second += 1;
    }
    std::cout << "per-module mean cosine error:\n";
    for (const auto& [module, agg] : per_module) {
        std::cout << "  " << module << ": " << agg.first / agg.second << "\n";
    }
    return 0;
}

int cmd_report(const std::vector<std::string>& model_stems, const std::string& calib,
               const std::string& out_dir) {
    auto dump = w4a4::read_calibration_dump(resolve_out(calib).string());
    const fs::path dir = resolve_out(out_dir.empty() ? std::string(".") : out_dir);
    fs::create_directories(dir);

    std::vector<w4a4::QuantizedModel> models;
    models.reserve(model_stems.size());
    for (const auto& stem : model_stems) {
        models.push_back(w4a4::deserialize(resolve_out(stem).string()));
    }
    std::vector<w4a4::AblationRow> rows;
    const w4a4::QuantizedModel* histogram_source = nullptr;
    for (const auto& qm : models) {
        auto model = w4a4::build_model(qm.cfg);
        rows.push_back(w4a4::compute_ablation_row(qm.variant, model, qm, dump.records));
        const bool multi_bin = qm.binning.count(w4a4::Expert::high_noise) &&
                               qm.binning.at(w4a4::Expert::high_noise).num_bins() > 1;
        if (!histogram_source || multi_bin) histogram_source = &qm;
    }
    std::sort(rows.begin(), rows.end(),
              [](const auto& a, const auto& b) { return a.mean_layer_mse > b.mean_layer_mse; });

    {
        std::ofstream os(dir / "ablation.csv");
        if (!os) throw w4a4::IntegrityError("cannot write ablation.csv");
        w4a4::write_ablation_csv(os, rows);
    }
    if (histogram_source) {
        std::ofstream os(dir / "ratios.csv");
        if (!os) throw w4a4::IntegrityError("cannot write ratios.csv");
        w4a4::write_histogram_csv(os, w4a4::ratio_histogram(histogram_source->policy));
    }

    std::cout << "variant            mean_layer_mse   mean_cosine_err   bytes\n";
    for (const auto& r : rows) {
        std::cout << "  " << r.variant;
        for (std::size_t i = r.variant.size(); i < 18; ++i) std::cout << ' ';
        std::cout << r.mean_layer_mse << "  " << r.mean_cosine_error << "  "
                  << r.model_bytes << "\n";
    }
    std::cout << "wrote " << (dir / "ablation.csv").string();
    if (histogram_source) std::cout << " and " << (dir / "ratios.csv").string();
    std::cout << "\n";
    return 0;
}

int cmd_run_all(const ToyFlags& toy, const QuantFlags& qf, const std::string& out_dir,
                const CLI::App* cmd) {
    const fs::path dir = resolve_out(out_dir);
    fs::create_directories(dir);
    const std::string calib = (dir / "calibration.bin").string();

    std::cout << "[1/4] calibrate\n";
    {
        const auto cfg = toy.config();
        cfg.validate();
        auto model = w4a4::build_model(cfg);
        auto result = w4a4::denoise_trajectory(model, cfg);
        check_bin_coverage(result.records, cfg, qf.bins, /*print=*/false);
        w4a4::write_calibration_dump(calib, cfg, result.records);
        std::cout << "  " << result.records.size() << " records -> " << calib << "\n";
    }

    auto dump = w4a4::read_calibration_dump(calib);
    auto model = w4a4::build_model(dump.cfg);
    const std::vector<w4a4::Variant> variants = {
        w4a4::Variant::rtn, w4a4::Variant::svd_rtn, w4a4::Variant::svd_gptq,
        w4a4::Variant::svd_gptq_tsclip};
    std::vector<std::string> stems;
    std::cout << "[2/4] quantize " << variants.size() << " variants\n";
    for (w4a4::Variant v : variants) {
        QuantFlags vf = qf;
        vf.variant = w4a4::variant_name(v);
        auto qcfg = make_quant_config(vf, cmd, /*explicit_overrides=*/false);
        auto qm = w4a4::quantize_model(model, dump.records, qcfg);
        qm.variant = vf.variant;
        const std::string stem = (dir / ("model_" + vf.variant)).string();
        w4a4::serialize(qm, stem);
        stems.push_back(stem);
        std::cout << "  " << vf.variant << " -> " << stem << "\n";
    }

    std::cout << "[3/4] sensitivity\n";
    cmd_sensitivity(stems.back(), calib, (dir / "sensitivity.csv").string());

    std::cout << "[4/4] report\n";
    return cmd_report(stems, calib, dir.string());
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"W4A4 post-training quantization toolkit for the toy two-expert DiT"};
    app.require_subcommand(1);

    ToyFlags toy;
    QuantFlags qf;
    std::size_t calib_bins = 4;
    std::string out, calib, model_stem, out_dir = "out";
    std::vector<std::string> model_stems;

    auto* calibrate = app.add_subcommand("calibrate", "run a trajectory and dump records");
    toy.attach(calibrate);
    calibrate->add_option("--bins", calib_bins, "timestep bins per expert to verify");
    calibrate->add_option("--out", out, "output dump file")->required();

    auto* quantize = app.add_subcommand("quantize", "calibrate a quantized model");
    quantize->add_option("--calib", calib, "calibration dump")->required();
    quantize->add_option("--out", out, "output model stem")->required();
    quantize->add_option("--variant", qf.variant,
                         "rtn | svd_rtn | svd_gptq | svd_gptq_tsclip | keepfp_diag");
    quantize->add_option("--rank", qf.rank, "low-rank branch rank");
    quantize->add_option("--grid", qf.grid, "int4 | mxfp4");
    quantize->add_option("--group", qf.group, "weight quantization group size");
    quantize->add_option("--bins", qf.bins, "timestep bins per expert");
    quantize->add_option("--migration", qf.migration, "smoothing migration exponent");
    quantize->add_option("--damping", qf.damping, "GPTQ Hessian damping fraction");
    quantize->add_option("--ratios", qf.ratios, "candidate clipping ratios")
        ->delimiter(',');
    quantize->add_option("--keep-fp", qf.keep_fp, "module suffixes kept at full precision")
        ->delimiter(',');

    auto* sensitivity =
        app.add_subcommand("sensitivity", "per-layer cosine reconstruction error CSV");
    sensitivity->add_option("--model", model_stem, "model stem")->required();
    sensitivity->add_option("--calib", calib, "calibration dump")->required();
    sensitivity->add_option("--out", out, "output CSV")->required();

    auto* report = app.add_subcommand("report", "ablation table and clip-ratio histogram");
    report->add_option("--models", model_stems, "model stems")->required()->delimiter(',');
    report->add_option("--calib", calib, "calibration dump")->required();
    report->add_option("--out-dir", out_dir, "output directory");

    auto* run_all =
        app.add_subcommand("run-all", "calibrate, quantize all table variants, and report");
    toy.attach(run_all);
    run_all->add_option("--rank", qf.rank, "low-rank branch rank");
    run_all->add_option("--grid", qf.grid, "int4 | mxfp4");
    run_all->add_option("--group", qf.group, "weight quantization group size");
    run_all->add_option("--bins", qf.bins, "timestep bins per expert");
    run_all->add_option("--ratios", qf.ratios, "candidate clipping ratios")->delimiter(',');
    run_all->add_option("--out-dir", out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*calibrate) return cmd_calibrate(toy, calib_bins, out);
        if (*quantize) return cmd_quantize(calib, qf, out, quantize);
        if (*sensitivity) return cmd_sensitivity(model_stem, calib, out);
        if (*report) return cmd_report(model_stems, calib, out_dir);
        if (*run_all) return cmd_run_all(toy, qf, out_dir, run_all);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
