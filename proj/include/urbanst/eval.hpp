#pragma once

// Metrics, classical baselines and the forecasting / imputation evaluation
// protocols.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "urbanst/dataset.hpp"
#include "urbanst/errors.hpp"
#include "urbanst/graph.hpp"
#include "urbanst/inference.hpp"
#include "urbanst/masks.hpp"
#include "urbanst/model.hpp"
#include "urbanst/trainer.hpp"

namespace urbanst {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline constexpr double kMapeFloor = 1e-6;

enum class Task { forecast_short, forecast_long, impute_point, impute_block };
enum class Shot { zero, few, full };

inline const char* to_string(Task t) {
    switch (t) {
    case Task::forecast_short:
        return "forecast_short";
    case Task::forecast_long:
        return "forecast_long";
    case Task::impute_point:
        return "impute_point";
    case Task::impute_block:
        return "impute_block";
    }
    return "?";
}

inline const char* to_string(Shot s) {
    switch (s) {
    case Shot::zero:
        return "zero";
    case Shot::few:
        return "few";
    case Shot::full:
        return "full";
    }
    return "?";
}

inline Task parse_task(const std::string& s) {
    for (Task t : {Task::forecast_short, Task::forecast_long, Task::impute_point, Task::impute_block}) {
        if (s == to_string(t)) {
            return t;
        }
    }
    throw ConfigError("unknown protocol `" + s + "`");
}

inline Shot parse_shot(const std::string& s) {
    for (Shot v : {Shot::zero, Shot::few, Shot::full}) {
        if (s == to_string(v)) {
            return v;
        }
    }
    throw ConfigError("unknown shot mode `" + s + "` (expected zero, few or full)");
}

inline bool is_forecast(Task t) { return t == Task::forecast_short || t == Task::forecast_long; }

struct ProtocolSpec {
    Task task = Task::forecast_short;
    std::size_t history = 12; // T_h
    std::size_t horizon = 12; // T_f
    double point_ratio = kPointMissingRatio;
    double block_drop = kBlockDropRate;
    Shot shot = Shot::zero;
    double few_shot_fraction = kFewShotFraction;

    static ProtocolSpec make(Task task, Shot shot = Shot::zero) {
        ProtocolSpec p;
        p.task = task;
        p.shot = shot;
        if (task == Task::forecast_long) {
            p.history = 24;
            p.horizon = 24;
        }
        return p;
    }

    void validate() const {
        if (task == Task::forecast_short && horizon > 12) {
            throw ConfigError("short-term forecasting covers at most 12 steps");
        }
        if (task == Task::forecast_long && horizon <= 12) {
            throw ConfigError("long-term forecasting covers more than 12 steps");
        }
        if (is_forecast(task) && (history == 0 || horizon == 0)) {
            throw ConfigError("forecast windows need positive history and horizon");
        }
    }

    std::string missing_pattern() const {
        switch (task) {
        case Task::impute_point:
            return "point";
        case Task::impute_block:
            return "block";
        default:
            return "none";
        }
    }
};

struct MetricsReport {
    double mae = 0.0;
    double rmse = 0.0;
    double mre = 0.0;
    double mape_percent = 0.0;
    bool mre_defined = true;
    std::size_t mape_count = 0; // entries with |y| above the floor
    std::size_t n_evaluated = 0;

    // Protocol record.
    std::string task;
    std::size_t horizon = 0;
    std::string shot;
    std::string missing_pattern;
    std::string dataset;
    std::string subject;
    std::uint64_t seed = 0;
};

// MAE, RMSE, MRE = sum|e| / sum|y| and MAPE = 100 * mean |e / y| over the
// selected entries; MAPE skips |y| <= mape_floor.
inline MetricsReport compute_metrics(std::span<const double> y, std::span<const double> yhat,
                                     std::span<const std::uint8_t> eval_mask, double mape_floor = kMapeFloor) {
    if (y.size() != yhat.size() || y.size() != eval_mask.size()) {
        throw ShapeError("metric inputs differ in length");
    }
    MetricsReport r;
    double abs_sum = 0.0;
    double sq_sum = 0.0;
    double y_abs_sum = 0.0;
    double ape_sum = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (eval_mask[i] == 0) {
            continue;
        }
        const double e = yhat[i] - y[i];
        abs_sum += std::abs(e);
        sq_sum += e * e;
        y_abs_sum += std::abs(y[i]);
        if (std::abs(y[i]) > mape_floor) {
            ape_sum += std::abs(e / y[i]);
            ++r.mape_count;
        }
        ++r.n_evaluated;
    }
    if (r.n_evaluated == 0) {
        throw EvalError("evaluation mask selects no entries");
    }
    const auto n = static_cast<double>(r.n_evaluated);
    r.mae = abs_sum / n;
    r.rmse = std::sqrt(sq_sum / n);
    r.mre_defined = y_abs_sum > 0.0;
    r.mre = r.mre_defined ? abs_sum / y_abs_sum : 0.0;
    r.mape_percent = r.mape_count > 0 ? 100.0 * ape_sum / static_cast<double>(r.mape_count) : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

// Replays the most recent history: output step t = history step
// T_h - T_f + t; horizons longer than the history tile it cyclically from
// its end.
inline SpatioTemporalTensor baseline_ha(const SpatioTemporalTensor& history, std::size_t horizon) {
    const std::size_t th = history.steps;
    if (th < 1) {
        throw WindowError("HA needs at least one history step");
    }
    SpatioTemporalTensor out = history.with_steps(horizon);
    out.start_epoch_s = history.start_epoch_s + static_cast<std::int64_t>(th) * history.dt_minutes * 60;
    // Step t maps to history index (T_h - T_f + t) mod T_h, taken non-negative.
    const std::size_t shift = (th - horizon % th) % th;
    for (std::size_t n = 0; n < history.nodes; ++n) {
        for (std::size_t t = 0; t < horizon; ++t) {
            const std::size_t src = (shift + t) % th;
            for (std::size_t c = 0; c < history.channels; ++c) {
                out.at(n, t, c) = history.at(n, src, c);
            }
        }
    }
    return out;
}

inline SpatioTemporalTensor baseline_mean_impute(const SpatioTemporalTensor& x, const ObservationMask& mask) {
    if (!mask.same_shape(x)) {
        throw ShapeError("mask does not match the tensor");
    }
    const auto stats = node_stats(x, &mask);
    std::vector<std::string> offenders;
    std::vector<std::uint8_t> has(x.nodes * x.channels, 0);
    for (std::size_t n = 0; n < x.nodes; ++n) {
        for (std::size_t c = 0; c < x.channels; ++c) {
            for (std::size_t t = 0; t < x.steps; ++t) {
                if (mask.observed(n, t, c)) {
                    has[n * x.channels + c] = 1;
                    break;
                }
            }
            if (!has[n * x.channels + c]) {
                offenders.push_back("node " + std::to_string(n) + " channel " + std::to_string(c));
            }
        }
    }
    if (!offenders.empty()) {
        std::string list;
        for (std::size_t i = 0; i < offenders.size(); ++i) {
            list += (i ? ", " : "") + offenders[i];
        }
        throw ImputeError("no observed values for " + list);
    }
    SpatioTemporalTensor out = x;
    for (std::size_t n = 0; n < x.nodes; ++n) {
        for (std::size_t t = 0; t < x.steps; ++t) {
            for (std::size_t c = 0; c < x.channels; ++c) {
                if (!mask.observed(n, t, c)) {
                    out.at(n, t, c) = stats.mean[n * x.channels + c];
                }
            }
        }
    }
    return out;
}

inline constexpr std::size_t kKnnNeighbors = 10;

// Up to k nodes with the largest positive adjacency weight, ties to the
// lower index.
inline std::vector<std::size_t> top_neighbors(const AdjacencyMatrix& adj, std::size_t node, std::size_t k) {
    std::vector<std::size_t> cand;
    for (std::size_t j = 0; j < adj.nodes; ++j) {
        if (j != node && adj(node, j) > 0.0) {
            cand.push_back(j);
        }
    }
    std::stable_sort(cand.begin(), cand.end(),
                     [&](std::size_t a, std::size_t b) { return adj(node, a) > adj(node, b); });
    if (cand.size() > k) {
        cand.resize(k);
    }
    return cand;
}

// Missing (i, t, c) takes the unweighted mean of the observed values of i's
// top-k neighbors at (t, c); with none observed it takes i's observed mean.
inline SpatioTemporalTensor baseline_knn_impute(const SpatioTemporalTensor& x, const ObservationMask& mask,
                                                const AdjacencyMatrix& adj, std::size_t k = kKnnNeighbors) {
    if (!mask.same_shape(x)) {
        throw ShapeError("mask does not match the tensor");
    }
    if (adj.nodes != x.nodes) {
        throw ShapeError("adjacency has " + std::to_string(adj.nodes) + " nodes, data has " + std::to_string(x.nodes));
    }
    if (k < 1) {
        throw ConfigError("KNN imputation needs k >= 1");
    }
    const auto stats = node_stats(x, &mask);
    SpatioTemporalTensor out = x;
    for (std::size_t n = 0; n < x.nodes; ++n) {
        const auto nbrs = top_neighbors(adj, n, k);
        for (std::size_t t = 0; t < x.steps; ++t) {
            for (std::size_t c = 0; c < x.channels; ++c) {
                if (mask.observed(n, t, c)) {
                    continue;
                }
                double sum = 0.0;
                std::size_t cnt = 0;
                for (auto j : nbrs) {
                    if (mask.observed(j, t, c)) {
                        sum += x.at(j, t, c);
                        ++cnt;
                    }
                }
                out.at(n, t, c) = cnt > 0 ? sum / static_cast<double>(cnt) : stats.mean[n * x.channels + c];
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Subjects under evaluation
// ---------------------------------------------------------------------------

class Subject {
public:
    virtual ~Subject() = default;
    virtual std::string name() const = 0;
    // `history` is a window [N x T_h x C] with its mask.
    virtual SpatioTemporalTensor forecast(const Dataset& history, std::size_t horizon) = 0;
    // Fills every entry whose mask bit is 0.
    virtual SpatioTemporalTensor impute(const Dataset& data) = 0;
    // Few-/full-shot adaptation on the first `fraction` of the train split.
    virtual void adapt(const Dataset& /*data*/, double /*fraction*/) {}
};

class HistoricalAverageSubject final : public Subject {
public:
    std::string name() const override { return "ha"; }
    SpatioTemporalTensor forecast(const Dataset& history, std::size_t horizon) override {
        return baseline_ha(history.x, horizon);
    }
    SpatioTemporalTensor impute(const Dataset&) override {
        throw EvalError("the HA baseline does not impute");
    }
};

class MeanImputeSubject final : public Subject {
public:
    std::string name() const override { return "mean"; }
    SpatioTemporalTensor forecast(const Dataset&, std::size_t) override {
        throw EvalError("the mean baseline does not forecast");
    }
    SpatioTemporalTensor impute(const Dataset& data) override { return baseline_mean_impute(data.x, data.mask); }
};

class KnnImputeSubject final : public Subject {
public:
    KnnImputeSubject(AdjacencyMatrix adj, std::size_t k = kKnnNeighbors) : adj_(std::move(adj)), k_(k) {}
    std::string name() const override { return "knn"; }
    SpatioTemporalTensor forecast(const Dataset&, std::size_t) override {
        throw EvalError("the KNN baseline does not forecast");
    }
    SpatioTemporalTensor impute(const Dataset& data) override {
        return baseline_knn_impute(data.x, data.mask, adj_, k_);
    }

private:
    AdjacencyMatrix adj_;
    std::size_t k_;
};

// Returns ground truth, located by timestamp.
class OracleSubject final : public Subject {
public:
    explicit OracleSubject(SpatioTemporalTensor truth) : truth_(std::move(truth)) {}
    std::string name() const override { return "oracle"; }
    SpatioTemporalTensor forecast(const Dataset& history, std::size_t horizon) override {
        return truth_.slice_steps(locate(history.x) + history.x.steps, horizon);
    }
    SpatioTemporalTensor impute(const Dataset& data) override {
        return truth_.slice_steps(locate(data.x), data.x.steps);
    }

private:
    std::size_t locate(const SpatioTemporalTensor& x) const {
        const std::int64_t delta = x.start_epoch_s - truth_.start_epoch_s;
        return static_cast<std::size_t>(delta / (static_cast<std::int64_t>(truth_.dt_minutes) * 60));
    }
    SpatioTemporalTensor truth_;
};

template <class T>
class ModelSubject final : public Subject {
public:
    ModelSubject(ModelState<T> model, ClusterPlan plan, TrainConfig finetune = {})
        : model_(std::move(model)), plan_(std::move(plan)), finetune_(std::move(finetune)) {}
    std::string name() const override { return "model"; }
    SpatioTemporalTensor forecast(const Dataset& history, std::size_t horizon) override {
        return urbanst::forecast(history, horizon, model_, plan_);
    }
    SpatioTemporalTensor impute(const Dataset& data) override { return urbanst::impute(data, model_, plan_); }
    void adapt(const Dataset& data, double fraction) override {
        model_ = finetune_fewshot(model_, data, plan_, fraction, finetune_).model;
    }
    const ModelState<T>& model() const { return model_; }

private:
    ModelState<T> model_;
    ClusterPlan plan_;
    TrainConfig finetune_;
};

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

// Non-overlapping (T_h + T_f) window starts inside `range`.
inline std::vector<std::size_t> forecast_window_starts(StepRange range, std::size_t history, std::size_t horizon) {
    std::vector<std::size_t> starts;
    const std::size_t span = history + horizon;
    for (std::size_t s = range.begin; s + span <= range.end; s += span) {
        starts.push_back(s);
    }
    if (starts.empty()) {
        throw WindowError("test range of " + std::to_string(range.size()) + " steps cannot hold a " +
                          std::to_string(span) + "-step forecast window");
    }
    return starts;
}

// Entries hidden from the subject: artificially masked and originally
// observed. Everything else stays as in the original mask.
struct ImputationCase {
    Dataset input;                  // hidden entries zeroed, mask cleared
    std::vector<std::uint8_t> eval; // 1 = hidden and originally observed
};

inline ImputationCase make_imputation_case(const Dataset& test, const ProtocolSpec& spec, std::uint64_t seed) {
    const auto& x = test.x;
    const auto artificial =
        spec.task == Task::impute_point
            ? point_missing_mask(x.nodes, x.steps, x.channels, spec.point_ratio, seed)
            : block_missing_mask(x.nodes, x.steps, x.channels, spec.block_drop, seed);
    ImputationCase c{test, std::vector<std::uint8_t>(x.size(), 0)};
    for (std::size_t i = 0; i < x.size(); ++i) {
        const bool orig = test.mask.bits[i] != 0;
        const bool hidden = artificial.bits[i] == 0;
        if (hidden) {
            c.input.mask.bits[i] = 0;
            c.input.x.values[i] = 0.0;
        }
        c.eval[i] = orig && hidden ? 1 : 0;
    }
    return c;
}

inline MetricsReport run_protocol(Subject& subject, const Dataset& data, const ProtocolSpec& spec,
                                  std::uint64_t seed) {
    spec.validate();
    const auto split = chronological_split(data.x.steps);
    if (spec.shot == Shot::few) {
        subject.adapt(data, spec.few_shot_fraction);
    } else if (spec.shot == Shot::full) {
        subject.adapt(data, 1.0);
    }
    std::vector<double> y;
    std::vector<double> yhat;
    std::vector<std::uint8_t> mask;
    std::size_t horizon = 0;
    if (is_forecast(spec.task)) {
        horizon = spec.horizon;
        for (std::size_t s : forecast_window_starts(split.test, spec.history, spec.horizon)) {
            const Dataset history = data.slice_steps(s, spec.history);
            const Dataset target = data.slice_steps(s + spec.history, spec.horizon);
            const auto pred = subject.forecast(history, spec.horizon);
            if (pred.values.size() != target.x.values.size()) {
                throw ShapeError("subject returned a forecast of the wrong shape");
            }
            y.insert(y.end(), target.x.values.begin(), target.x.values.end());
            yhat.insert(yhat.end(), pred.values.begin(), pred.values.end());
            mask.insert(mask.end(), target.mask.bits.begin(), target.mask.bits.end());
        }
    } else {
        const Dataset test = data.slice_steps(split.test.begin, split.test.size());
        const auto c = make_imputation_case(test, spec, seed);
        const auto filled = subject.impute(c.input);
        if (filled.values.size() != test.x.values.size()) {
            throw ShapeError("subject returned an imputation of the wrong shape");
        }
        y = test.x.values;
        yhat = filled.values;
        mask = c.eval;
    }
    auto r = compute_metrics(y, yhat, mask);
    r.task = to_string(spec.task);
    r.horizon = horizon;
    r.shot = to_string(spec.shot);
    r.missing_pattern = spec.missing_pattern();
    r.dataset = data.x.name;
    r.subject = subject.name();
    r.seed = seed;
    return r;
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

inline std::string metrics_csv_header() {
    return "dataset,subject,task,shot,horizon,missing_pattern,seed,mae,rmse,mre,mape_percent,n_evaluated";
}

inline std::string metrics_csv_row(const MetricsReport& r) {
    std::ostringstream out;
    out << std::setprecision(10);
    out << r.dataset << ',' << r.subject << ',' << r.task << ',' << r.shot << ',' << r.horizon << ','
        << r.missing_pattern << ',' << r.seed << ',' << r.mae << ',' << r.rmse << ',';
    if (r.mre_defined) {
        out << r.mre;
    } else {
        out << "undefined";
    }
    out << ',' << r.mape_percent << ',' << r.n_evaluated;
    return out.str();
}

inline void write_metrics_csv(const std::vector<MetricsReport>& reports, const std::filesystem::path& file) {
    std::ofstream out(file);
    if (!out) {
        throw IoError("cannot write " + file.string());
    }
    out << metrics_csv_header() << '\n';
    for (const auto& r : reports) {
        out << metrics_csv_row(r) << '\n';
    }
}

// Aligned plain-text table, one row per report.
inline std::string metrics_table(const std::vector<MetricsReport>& reports) {
    std::ostringstream out;
    out << std::left << std::setw(18) << "dataset" << std::setw(8) << "subject" << std::setw(16) << "task"
        << std::setw(6) << "shot" << std::right << std::setw(12) << "MAE" << std::setw(12) << "RMSE" << std::setw(12)
        << "MRE" << std::setw(12) << "MAPE%" << '\n';
    out << std::fixed << std::setprecision(4);
    for (const auto& r : reports) {
        out << std::left << std::setw(18) << r.dataset << std::setw(8) << r.subject << std::setw(16) << r.task
            << std::setw(6) << r.shot << std::right << std::setw(12) << r.mae << std::setw(12) << r.rmse;
        if (r.mre_defined) {
            out << std::setw(12) << r.mre;
        } else {
            out << std::setw(12) << "undefined";
        }
        out << std::setw(12) << r.mape_percent << '\n';
    }
    return out.str();
}

} // namespace urbanst
