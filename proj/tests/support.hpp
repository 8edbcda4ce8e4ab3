#pragma once

// Shared fixtures for the unit and acceptance tests.

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "urbanst/urbanst.hpp"

namespace urbanst::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("urbanst_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

// Single-channel sensor tensor from per-node series.
inline SpatioTemporalTensor series_tensor(const std::vector<std::vector<double>>& rows, int dt = 5) {
    auto x = SpatioTemporalTensor::zeros(rows.size(), rows.front().size(), 1);
    x.dt_minutes = dt;
    x.name = "fixture";
    for (std::size_t n = 0; n < rows.size(); ++n) {
        x.sensor_coords[n] = {40.0 + 0.01 * static_cast<double>(n), -74.0};
        for (std::size_t t = 0; t < rows[n].size(); ++t) {
            x.at(n, t, 0) = rows[n][t];
        }
    }
    return x;
}

inline SpatioTemporalTensor random_tensor(Rng& rng, std::size_t n, std::size_t t, std::size_t c, double scale = 1.0) {
    auto x = SpatioTemporalTensor::zeros(n, t, c);
    x.name = "random";
    for (std::size_t i = 0; i < n; ++i) {
        x.sensor_coords[i] = {rng.uniform(-60.0, 60.0), rng.uniform(-170.0, 170.0)};
    }
    for (auto& v : x.values) {
        v = rng.normal(0.0, scale);
    }
    return x;
}

inline NodePoints random_points(Rng& rng, std::size_t n) {
    std::vector<std::array<double, 2>> xy(n);
    for (auto& p : xy) {
        p = {rng.uniform(0.0, 100.0), rng.uniform(0.0, 100.0)};
    }
    return NodePoints::planar(std::move(xy));
}

// Plan that assigns nodes to clusters in a random order, for locality
// comparisons.
inline ClusterPlan random_plan(Rng& rng, std::size_t n, std::size_t capacity) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[rng.index(i)]);
    }
    ClusterPlan plan{capacity, FillMode::binary_mask, {}};
    for (std::size_t i = 0; i < n; i += capacity) {
        std::vector<Slot> slots(capacity);
        for (std::size_t j = 0; j < capacity && i + j < n; ++j) {
            slots[j] = {static_cast<std::int64_t>(order[i + j]), true};
        }
        plan.clusters.push_back(std::move(slots));
    }
    return plan;
}

// Empty string when `plan` satisfies the capacity and coverage invariants
// for `n` nodes; otherwise a description of the first violation.
inline std::string plan_violation(const ClusterPlan& plan, std::size_t n, std::size_t capacity) {
    if (plan.capacity != capacity || plan.clusters.empty()) {
        return "wrong capacity or no clusters";
    }
    std::vector<std::size_t> seen(n, 0);
    for (std::size_t k = 0; k < plan.size(); ++k) {
        const auto& c = plan.clusters[k];
        if (c.size() != capacity) {
            return "cluster " + std::to_string(k) + " has " + std::to_string(c.size()) + " slots";
        }
        for (const auto& s : c) {
            if (!s.valid) {
                if (s.node != Slot::kNone) {
                    return "invalid slot carries a node index";
                }
                continue;
            }
            if (s.node < 0 || static_cast<std::size_t>(s.node) >= n) {
                return "slot node out of range";
            }
            ++seen[static_cast<std::size_t>(s.node)];
        }
    }
    const bool repeats_allowed = plan.fill_mode == FillMode::neighbor_fill;
    for (std::size_t i = 0; i < n; ++i) {
        if (seen[i] == 0) {
            return "node " + std::to_string(i) + " uncovered";
        }
        if (seen[i] > 1 && !repeats_allowed) {
            return "node " + std::to_string(i) + " appears " + std::to_string(seen[i]) + " times";
        }
    }
    if (repeats_allowed && capacity <= n) {
        // Duplicates may only come from filling the final cluster.
        for (std::size_t k = 0; k + 1 < plan.size(); ++k) {
            for (const auto& s : plan.clusters[k]) {
                if (s.valid && seen[static_cast<std::size_t>(s.node)] > 1) {
                    bool in_last = false;
                    for (const auto& l : plan.clusters.back()) {
                        in_last = in_last || l.node == s.node;
                    }
                    if (!in_last) {
                        return "duplicate outside the final cluster";
                    }
                }
            }
        }
    }
    return {};
}

// Largest |<rope(q,m), rope(k,n)> - <rope(q,m+s), rope(k,n+s)>| over
// `draws` random (q, k, m, n, s) in dimension `dim`.
inline double rope_shift_max_error(Rng& rng, std::size_t dim, int draws, double base = 10000.0) {
    double worst = 0.0;
    for (int i = 0; i < draws; ++i) {
        Tensor<double> q({1, dim});
        Tensor<double> k({1, dim});
        for (std::size_t j = 0; j < dim; ++j) {
            q[j] = rng.normal();
            k[j] = rng.normal();
        }
        const std::size_t m = rng.index(512);
        const std::size_t n = rng.index(512);
        const std::size_t s = rng.index(512);
        auto dot = [&](std::size_t a, std::size_t b) {
            const std::size_t pa[] = {a};
            const std::size_t pb[] = {b};
            const auto rq = rope_apply(q, pa, base);
            const auto rk = rope_apply(k, pb, base);
            double acc = 0.0;
            for (std::size_t j = 0; j < dim; ++j) {
                acc += rq[j] * rk[j];
            }
            return acc;
        };
        worst = std::max(worst, std::abs(dot(m, n) - dot(m + s, n + s)));
    }
    return worst;
}

} // namespace urbanst::testing
