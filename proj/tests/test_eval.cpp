#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace urbanst;
using urbanst::testing::series_tensor;

namespace {

MetricsReport metrics(const std::vector<double>& y, const std::vector<double>& yhat) {
    const std::vector<std::uint8_t> all(y.size(), 1);
    return compute_metrics(y, yhat, all);
}

Dataset observed(SpatioTemporalTensor x) {
    auto mask = ObservationMask::all_observed(x);
    return {std::move(x), std::move(mask)};
}

AdjacencyMatrix dense(std::size_t n, const std::vector<double>& w) { return {GraphKind::gaussian, n, w}; }

// Records which steps each forecast call saw.
class RecordingSubject final : public Subject {
public:
    explicit RecordingSubject(SpatioTemporalTensor truth) : oracle_(std::move(truth)) {}
    std::string name() const override { return "recording"; }
    SpatioTemporalTensor forecast(const Dataset& history, std::size_t horizon) override {
        starts.push_back(history.x.start_epoch_s);
        return oracle_.forecast(history, horizon);
    }
    SpatioTemporalTensor impute(const Dataset& data) override { return oracle_.impute(data); }
    std::vector<std::int64_t> starts;

private:
    OracleSubject oracle_;
};

} // namespace

TEST(Metrics, PerfectPredictionIsZero) {
    const auto r = metrics({1, -2, 3.5}, {1, -2, 3.5});
    EXPECT_EQ(r.mae, 0.0);
    EXPECT_EQ(r.rmse, 0.0);
    EXPECT_EQ(r.mre, 0.0);
    EXPECT_EQ(r.mape_percent, 0.0);
    EXPECT_EQ(r.n_evaluated, 3u);
}

TEST(Metrics, HandArithmetic) {
    const auto r = metrics({2, 4}, {1, 5});
    EXPECT_DOUBLE_EQ(r.mae, 1.0);
    EXPECT_DOUBLE_EQ(r.rmse, 1.0);
    EXPECT_DOUBLE_EQ(r.mre, 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(r.mape_percent, 37.5);
}

TEST(Metrics, ZeroTargetsSkipMapeOnly) {
    const auto r = metrics({0, 4}, {1, 5});
    EXPECT_DOUBLE_EQ(r.mae, 1.0);
    EXPECT_DOUBLE_EQ(r.rmse, 1.0);
    EXPECT_DOUBLE_EQ(r.mre, 0.5);
    EXPECT_DOUBLE_EQ(r.mape_percent, 25.0);
    EXPECT_EQ(r.mape_count, 1u);
    EXPECT_EQ(r.n_evaluated, 2u);
}

TEST(Metrics, AllZeroTargetsLeaveMreUndefined) {
    const auto r = metrics({0, 0}, {1, 1});
    EXPECT_FALSE(r.mre_defined);
    EXPECT_EQ(r.mape_count, 0u);
}

TEST(Metrics, MaskSelectsEntries) {
    const std::vector<double> y{2, 4, 100};
    const std::vector<double> yhat{1, 5, -100};
    const std::vector<std::uint8_t> mask{1, 1, 0};
    EXPECT_DOUBLE_EQ(compute_metrics(y, yhat, mask).mae, 1.0);
}

TEST(Metrics, EmptyMaskIsEvalError) {
    const std::vector<double> y{1, 2};
    const std::vector<std::uint8_t> none{0, 0};
    EXPECT_THROW(compute_metrics(y, y, none), EvalError);
}

TEST(Metrics, MatchesScalarOracleAndRmseBoundsMae) {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> y(1000);
        std::vector<double> yhat(1000);
        std::vector<std::uint8_t> mask(1000);
        for (std::size_t i = 0; i < y.size(); ++i) {
            y[i] = rng.uniform(-5, 5);
            yhat[i] = y[i] + rng.normal(0, 1);
            mask[i] = rng.bernoulli(0.7) ? 1 : 0;
        }
        mask[0] = 1;
        long double ae = 0, se = 0, ya = 0, ape = 0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (mask[i]) {
                const long double e = std::abs(static_cast<long double>(yhat[i]) - y[i]);
                ae += e;
                se += e * e;
                ya += std::abs(static_cast<long double>(y[i]));
                ape += e / std::abs(static_cast<long double>(y[i]));
                ++n;
            }
        }
        const auto r = compute_metrics(y, yhat, mask);
        EXPECT_NEAR(r.mae, static_cast<double>(ae / n), 1e-9);
        EXPECT_NEAR(r.rmse, static_cast<double>(std::sqrt(se / n)), 1e-9);
        EXPECT_NEAR(r.mre, static_cast<double>(ae / ya), 1e-9);
        EXPECT_NEAR(r.mape_percent, static_cast<double>(100 * ape / n), 1e-9 * r.mape_percent);
        EXPECT_GE(r.rmse, r.mae);
    }
}

TEST(PointMask, ExtremeRatios) {
    EXPECT_EQ(missing_fraction(point_missing_mask(4, 50, 2, 0.0, 1)), 0.0);
    EXPECT_EQ(missing_fraction(point_missing_mask(4, 50, 2, 1.0, 1)), 1.0);
    EXPECT_THROW(point_missing_mask(1, 1, 1, 1.5, 1), ConfigError);
}

TEST(PointMask, EmpiricalRateAndDeterminism) {
    const auto m = point_missing_mask(100, 500, 2, 0.25, 42);
    EXPECT_NEAR(missing_fraction(m), 0.25, 0.02);
    EXPECT_EQ(m.bits, point_missing_mask(100, 500, 2, 0.25, 42).bits);
}

TEST(BlockMask, ZeroRateHasNoOutages) {
    EXPECT_EQ(missing_fraction(block_missing_mask(20, 400, 2, 0.0, 3)), 0.0);
}

TEST(BlockMask, EmpiricalRate) {
    const double f = missing_fraction(block_missing_mask(300, 2000, 1, 0.05, 5));
    EXPECT_GE(f, 0.04);
    EXPECT_LE(f, 0.06);
}

TEST(BlockMask, RunsAreContiguousAndSpanChannels) {
    const auto m = block_missing_mask(50, 600, 3, 0.05, 9);
    for (std::size_t n = 0; n < 50; ++n) {
        std::size_t run = 0;
        for (std::size_t t = 0; t < 600; ++t) {
            const bool miss = !m.observed(n, t, 0);
            for (std::size_t c = 1; c < 3; ++c) {
                ASSERT_EQ(!m.observed(n, t, c), miss);
            }
            if (miss) {
                ++run;
            } else {
                // Merged outages can run longer than one block, never shorter.
                if (run > 0) {
                    EXPECT_GE(run, kBlockMinLength);
                }
                run = 0;
            }
        }
    }
}

TEST(HistoricalAverage, EqualHorizonCopiesHistory) {
    const auto h = series_tensor({{1, 2, 3, 4}, {5, 6, 7, 8}});
    const auto out = baseline_ha(h, 4);
    EXPECT_EQ(out.values, h.values);
}

TEST(HistoricalAverage, SingleStepIsLastValue) {
    const auto out = baseline_ha(series_tensor({{1, 2, 3, 4}}), 1);
    ASSERT_EQ(out.steps, 1u);
    EXPECT_EQ(out.at(0, 0, 0), 4.0);
}

TEST(HistoricalAverage, ShortHorizonTakesTail) {
    const auto out = baseline_ha(series_tensor({{1, 2, 3, 4}}), 2);
    EXPECT_EQ(out.values, (std::vector<double>{3, 4}));
}

TEST(HistoricalAverage, LongHorizonTilesFromTheEnd) {
    const auto out = baseline_ha(series_tensor({{1, 2, 3}}), 5);
    // Step t maps to history index (3 - 5 + t) mod 3.
    EXPECT_EQ(out.values, (std::vector<double>{2, 3, 1, 2, 3}));
}

TEST(HistoricalAverage, ConstantHistoryConstantForecast) {
    const auto out = baseline_ha(series_tensor({{7, 7, 7}}), 8);
    for (double v : out.values) {
        EXPECT_EQ(v, 7.0);
    }
}

TEST(MeanImpute, HandArithmetic) {
    const auto x = series_tensor({{2, 0, 4}, {1, 1, 1}});
    auto mask = ObservationMask::all_observed(x);
    mask.set(0, 1, 0, false);
    const auto out = baseline_mean_impute(x, mask);
    EXPECT_DOUBLE_EQ(out.at(0, 1, 0), 3.0);
    EXPECT_EQ(out.at(0, 0, 0), 2.0);
    EXPECT_EQ(out.at(1, 1, 0), 1.0);
}

TEST(MeanImpute, FullyObservedUnchanged) {
    Rng rng(4);
    const auto x = urbanst::testing::random_tensor(rng, 5, 20, 2);
    EXPECT_EQ(baseline_mean_impute(x, ObservationMask::all_observed(x)).values, x.values);
}

TEST(MeanImpute, ConstantFillPerSlice) {
    Rng rng(5);
    const auto x = urbanst::testing::random_tensor(rng, 4, 60, 2);
    const auto mask = point_missing_mask(4, 60, 2, 0.4, 6);
    const auto out = baseline_mean_impute(x, mask);
    for (std::size_t n = 0; n < 4; ++n) {
        for (std::size_t c = 0; c < 2; ++c) {
            std::vector<double> fills;
            for (std::size_t t = 0; t < 60; ++t) {
                if (!mask.observed(n, t, c)) {
                    fills.push_back(out.at(n, t, c));
                }
            }
            for (double f : fills) {
                EXPECT_EQ(f, fills.front());
            }
        }
    }
}

TEST(MeanImpute, UnobservedSliceIsImputeError) {
    const auto x = series_tensor({{1, 2}, {3, 4}});
    auto mask = ObservationMask::all_observed(x);
    mask.set(1, 0, 0, false);
    mask.set(1, 1, 0, false);
    try {
        baseline_mean_impute(x, mask);
        FAIL() << "expected ImputeError";
    } catch (const ImputeError& e) {
        EXPECT_NE(std::string(e.what()).find("node 1"), std::string::npos);
    }
}

TEST(KnnImpute, HeavierNeighborWinsWithKOne) {
    const auto x = series_tensor({{10}, {0}, {30}});
    auto mask = ObservationMask::all_observed(x);
    mask.set(1, 0, 0, false);
    const auto adj = dense(3, {0, 0.9, 0.1, 0.9, 0, 0.4, 0.1, 0.4, 0});
    EXPECT_EQ(baseline_knn_impute(x, mask, adj, 1).at(1, 0, 0), 10.0);
}

TEST(KnnImpute, TiesGoToLowerIndex) {
    const auto x = series_tensor({{10}, {0}, {30}});
    auto mask = ObservationMask::all_observed(x);
    mask.set(1, 0, 0, false);
    const auto adj = dense(3, {0, 0.5, 0, 0.5, 0, 0.5, 0, 0.5, 0});
    EXPECT_EQ(baseline_knn_impute(x, mask, adj, 1).at(1, 0, 0), 10.0);
}

TEST(KnnImpute, SaturatedKIsNeighborMean) {
    const auto x = series_tensor({{10}, {0}, {30}, {50}});
    auto mask = ObservationMask::all_observed(x);
    mask.set(1, 0, 0, false);
    mask.set(3, 0, 0, false);
    std::vector<double> w(16, 0.3);
    for (std::size_t i = 0; i < 4; ++i) {
        w[i * 4 + i] = 0.0;
    }
    // Node 3 is masked too, so only 0 and 2 contribute.
    EXPECT_DOUBLE_EQ(baseline_knn_impute(x, mask, dense(4, w), 10).at(1, 0, 0), 20.0);
}

TEST(KnnImpute, FallsBackToNodeMean) {
    const auto x = series_tensor({{1, 2}, {4, 0}});
    auto mask = ObservationMask::all_observed(x);
    mask.set(1, 1, 0, false);
    mask.set(0, 1, 0, false);
    const auto adj = dense(2, {0, 1, 1, 0});
    EXPECT_EQ(baseline_knn_impute(x, mask, adj, 1).at(1, 1, 0), 4.0);
}

TEST(Protocol, OracleScoresZeroEverywhere) {
    SynthSpec spec;
    spec.nodes = 6;
    spec.steps = 400;
    const auto d = make_synthetic(spec);
    for (Task task : {Task::forecast_short, Task::forecast_long, Task::impute_point, Task::impute_block}) {
        OracleSubject oracle(d.x);
        const auto r = run_protocol(oracle, d, ProtocolSpec::make(task), 3);
        EXPECT_EQ(r.mae, 0.0) << to_string(task);
        EXPECT_EQ(r.rmse, 0.0);
        EXPECT_GT(r.n_evaluated, 0u);
    }
}

TEST(Protocol, HistoricalAverageOnPeriodTwelveSignal) {
    std::vector<std::vector<double>> rows(3, std::vector<double>(240));
    for (std::size_t n = 0; n < 3; ++n) {
        for (std::size_t t = 0; t < 240; ++t) {
            rows[n][t] = std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / 12.0) + static_cast<double>(n);
        }
    }
    const auto d = observed(series_tensor(rows));
    HistoricalAverageSubject ha;
    const auto r = run_protocol(ha, d, ProtocolSpec::make(Task::forecast_short), 1);
    EXPECT_NEAR(r.mae, 0.0, 1e-12);
    EXPECT_EQ(r.n_evaluated, 2u * 3u * 12u);
}

TEST(Protocol, SameSeedSameReport) {
    SynthSpec spec;
    spec.nodes = 8;
    spec.steps = 300;
    const auto d = make_synthetic(spec);
    MeanImputeSubject a;
    MeanImputeSubject b;
    const auto ra = run_protocol(a, d, ProtocolSpec::make(Task::impute_point), 11);
    const auto rb = run_protocol(b, d, ProtocolSpec::make(Task::impute_point), 11);
    EXPECT_EQ(metrics_csv_row(ra), metrics_csv_row(rb));
    const auto rc = run_protocol(a, d, ProtocolSpec::make(Task::impute_point), 12);
    EXPECT_NE(ra.mae, rc.mae);
}

TEST(Protocol, ForecastWindowsDisjointInsideTestRange) {
    SynthSpec spec;
    spec.nodes = 4;
    spec.steps = 500;
    const auto d = make_synthetic(spec);
    const auto split = chronological_split(d.x.steps);
    const std::int64_t dt = static_cast<std::int64_t>(d.x.dt_minutes) * 60;
    for (Task task : {Task::forecast_short, Task::forecast_long}) {
        RecordingSubject rec(d.x);
        const auto p = ProtocolSpec::make(task);
        run_protocol(rec, d, p, 1);
        ASSERT_FALSE(rec.starts.empty());
        std::int64_t prev_end = -1;
        for (auto s : rec.starts) {
            const auto begin = static_cast<std::size_t>((s - d.x.start_epoch_s) / dt);
            EXPECT_GE(begin, split.test.begin);
            EXPECT_LE(begin + p.history + p.horizon, split.test.end);
            EXPECT_GE(static_cast<std::int64_t>(begin), prev_end);
            prev_end = static_cast<std::int64_t>(begin + p.history + p.horizon);
        }
    }
}

TEST(Protocol, ImputationNeverScoresOriginallyMissingEntries) {
    SynthSpec spec;
    spec.nodes = 6;
    spec.steps = 300;
    auto d = make_synthetic(spec);
    const auto test = d.slice_steps(chronological_split(300).test.begin, chronological_split(300).test.size());
    auto holes = test;
    for (std::size_t t = 0; t < test.x.steps; t += 2) {
        holes.mask.set(2, t, 0, false);
    }
    for (Task task : {Task::impute_point, Task::impute_block}) {
        const auto c = make_imputation_case(holes, ProtocolSpec::make(task), 5);
        for (std::size_t i = 0; i < c.eval.size(); ++i) {
            if (c.eval[i]) {
                EXPECT_TRUE(holes.mask.bits[i]);
                EXPECT_FALSE(c.input.mask.bits[i]);
            }
        }
    }
}

TEST(Protocol, ShortHorizonLimits) {
    auto p = ProtocolSpec::make(Task::forecast_short);
    p.horizon = 13;
    EXPECT_THROW(p.validate(), ConfigError);
    auto q = ProtocolSpec::make(Task::forecast_long);
    EXPECT_EQ(q.horizon, 24u);
    q.horizon = 12;
    EXPECT_THROW(q.validate(), ConfigError);
}

TEST(Protocol, ShortTestRangeIsWindowError) {
    const auto d = observed(series_tensor({std::vector<double>(50, 1.0)}));
    HistoricalAverageSubject ha;
    EXPECT_THROW(run_protocol(ha, d, ProtocolSpec::make(Task::forecast_short), 1), WindowError);
}
