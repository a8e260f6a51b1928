// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "w4a4/binning.hpp"
#include "w4a4/clip_search.hpp"
#include "w4a4/toy_dit.hpp"

using w4a4::TimestepBinning;

TEST(AssignBin, SingleBinAlwaysZero) {
    auto b = TimestepBinning::uniform(0.0, 1.0, 1);
    EXPECT_EQ(b.num_bins(), 1u);
    for (double t : {0.0, 0.3, 1.0}) EXPECT_EQ(w4a4::assign_bin(b, t), 0u);
}

TEST(AssignBin, IntervalLookup) {
    TimestepBinning b{0.0, 1.0, {0.25, 0.5, 0.75}};
    EXPECT_EQ(w4a4::assign_bin(b, 0.6), 2u);
    EXPECT_EQ(w4a4::assign_bin(b, 0.1), 0u);
    EXPECT_EQ(w4a4::assign_bin(b, 1.0), 3u);
}

TEST(AssignBin, BoundaryBelongsToHigherNoiseBin) {
    TimestepBinning b{0.0, 1.0, {0.25, 0.5, 0.75}};
    // boundary values join the bin covering larger (earlier, noisier) t
    EXPECT_EQ(w4a4::assign_bin(b, 0.25), 1u);
    EXPECT_EQ(w4a4::assign_bin(b, 0.5), 2u);
    EXPECT_EQ(w4a4::assign_bin(b, 0.75), 3u);
}

TEST(AssignBin, OutsideRangeThrows) {
    auto b = TimestepBinning::uniform(0.0, 0.5, 2);
    EXPECT_THROW(w4a4::assign_bin(b, 0.6), w4a4::RangeError);
    EXPECT_THROW(w4a4::assign_bin(b, -0.1), w4a4::RangeError);
}

TEST(AssignBin, FortyStepSchedulePartitions) {
    w4a4::ToyDiTConfig cfg;
    cfg.n_steps = 40;
    auto b = TimestepBinning::uniform(0.0, 1.0, 4);
    std::vector<std::size_t> counts(4, 0);
    for (double t : cfg.schedule()) ++counts[w4a4::assign_bin(b, t)];
    std::size_t total = 0;
    for (std::size_t c : counts) {
        EXPECT_GT(c, 0u);
        total += c;
    }
    EXPECT_EQ(total, 40u);
}

TEST(TimestepBinning, UniformBoundariesAreEquallySpaced) {
    auto b = TimestepBinning::uniform(0.5, 1.0, 4);
    ASSERT_EQ(b.boundaries.size(), 3u);
    EXPECT_DOUBLE_EQ(b.boundaries[0], 0.625);
    EXPECT_DOUBLE_EQ(b.boundaries[1], 0.75);
    EXPECT_DOUBLE_EQ(b.boundaries[2], 0.875);
}

TEST(TimestepBinning, ValidationRejectsBadBoundaries) {
    TimestepBinning decreasing{0.0, 1.0, {0.5, 0.25}};
    EXPECT_THROW(decreasing.validate(), w4a4::DomainError);
    TimestepBinning outside{0.0, 1.0, {1.5}};
    EXPECT_THROW(outside.validate(), w4a4::DomainError);
}

// ---------------------------------------------------------------------------
// collect_bin_stats
// ---------------------------------------------------------------------------

namespace {

w4a4::CalibrationRecord make_record(const std::string& path, w4a4::Expert e, double t,
                                    std::vector<double> values) {
    w4a4::CalibrationRecord r;
    r.layer = w4a4::LayerPath::parse(path);
    r.expert = e;
    r.timestep = t;
    const std::size_t n = values.size();
    r.input = w4a4::Matrix(1, n, std::move(values));
    return r;
}

} // namespace

TEST(CollectBinStats, SingleRecordAbsmax) {
    w4a4::CalibrationRecords recs;
    recs.push_back(make_record("blocks.0.ffn.0", w4a4::Expert::high_noise, 0.9,
                               {0.5, -3.2, 1.0}));
    auto b = TimestepBinning::uniform(0.0, 1.0, 1);
    auto stats = w4a4::collect_bin_stats(recs, b, w4a4::StatMode::absmax());
    EXPECT_DOUBLE_EQ(
        stats.at({"blocks.0.ffn.0", w4a4::Expert::high_noise, 0}), 3.2);
}

TEST(CollectBinStats, DuplicatedRecordsDoNotChangeAbsmax) {
    w4a4::CalibrationRecords recs;
    recs.push_back(make_record("blocks.0.ffn.0", w4a4::Expert::low_noise, 0.1, {2.0, -1.0}));
    auto b = TimestepBinning::uniform(0.0, 1.0, 1);
    auto once = w4a4::collect_bin_stats(recs, b, w4a4::StatMode::absmax());
    recs.push_back(recs.front());
    recs.push_back(recs.front());
    auto thrice = w4a4::collect_bin_stats(recs, b, w4a4::StatMode::absmax());
    EXPECT_EQ(once.m, thrice.m);
}

TEST(CollectBinStats, KnownPerBinRampReproducesRatios) {
    // bins built so each record lands in its own bin with scales 1,2,4,8
    auto b = TimestepBinning::uniform(0.0, 1.0, 4);
    w4a4::CalibrationRecords recs;
    const double scales[4] = {1.0, 2.0, 4.0, 8.0};
    const double ts[4] = {0.1, 0.4, 0.6, 0.9};
    for (int k = 0; k < 4; ++k) {
        recs.push_back(make_record("blocks.1.self_attn.q", w4a4::Expert::high_noise, ts[k],
                                   {scales[k], -0.5 * scales[k]}));
    }
    auto stats = w4a4::collect_bin_stats(recs, b, w4a4::StatMode::absmax());
    for (int k = 0; k < 4; ++k) {
        EXPECT_DOUBLE_EQ(
            stats.at({"blocks.1.self_attn.q", w4a4::Expert::high_noise,
                      static_cast<std::size_t>(k)}),
            scales[k]);
    }
}

TEST(CollectBinStats, MissingBinRaisesCoverageErrorNamingTriple) {
    auto b = TimestepBinning::uniform(0.0, 1.0, 4);
    w4a4::CalibrationRecords recs;
    recs.push_back(make_record("blocks.0.ffn.2", w4a4::Expert::high_noise, 0.9, {1.0}));
    recs.push_back(make_record("blocks.0.ffn.2", w4a4::Expert::high_noise, 0.1, {1.0}));
    try {
        w4a4::collect_bin_stats(recs, b, w4a4::StatMode::absmax());
        FAIL() << "expected CoverageError";
    } catch (const w4a4::CoverageError& e) {
        EXPECT_NE(std::string(e.what()).find("blocks.0.ffn.2"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("high_noise"), std::string::npos);
    }
    // lenient mode returns the partial stats instead
    auto stats = w4a4::collect_bin_stats(recs, b, w4a4::StatMode::absmax(),
                                         /*require_all_bins=*/false);
    EXPECT_EQ(stats.m.size(), 2u);
}

TEST(CollectBinStats, PercentileModeIgnoresSparseOutliers) {
    auto b = TimestepBinning::uniform(0.0, 1.0, 1);
    std::vector<double> values(1000, 1.0);
    values[7] = 100.0; // one outlier out of 1000
    w4a4::CalibrationRecords recs;
    recs.push_back(make_record("blocks.0.ffn.0", w4a4::Expert::low_noise, 0.2, values));
    auto absmax = w4a4::collect_bin_stats(recs, b, w4a4::StatMode::absmax());
    auto p99 = w4a4::collect_bin_stats(recs, b, w4a4::StatMode::percentile(99.0));
    const w4a4::BinKey key{"blocks.0.ffn.0", w4a4::Expert::low_noise, 0};
    EXPECT_DOUBLE_EQ(absmax.at(key), 100.0);
    EXPECT_DOUBLE_EQ(p99.at(key), 1.0);
}
