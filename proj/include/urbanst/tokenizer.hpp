#pragma once

// MiniST tokenization: greedy capacity-constrained KD-tree clustering of the
// spatial nodes and spatio-temporal patching into uniform [S_p x T_p] samples.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "urbanst/dataset.hpp"
#include "urbanst/errors.hpp"
#include "urbanst/graph.hpp"
#include "urbanst/kdtree.hpp"

namespace urbanst {

enum class FillMode {
    binary_mask,   // pad a short cluster with invalid slots
    neighbor_fill, // pad it with the nearest already-assigned nodes
};

inline const char* to_string(FillMode m) { return m == FillMode::binary_mask ? "binary_mask" : "neighbor_fill"; }

inline FillMode parse_fill_mode(const std::string& s) {
    if (s == "binary_mask") {
        return FillMode::binary_mask;
    }
    if (s == "neighbor_fill") {
        return FillMode::neighbor_fill;
    }
    throw ConfigError("unknown fill mode `" + s + "`");
}

struct Slot {
    static constexpr std::int64_t kNone = -1;
    std::int64_t node = kNone;
    bool valid = false;
    friend bool operator==(const Slot&, const Slot&) = default;
};

struct ClusterPlan {
    std::size_t capacity = 0;
    FillMode fill_mode = FillMode::binary_mask;
    std::vector<std::vector<Slot>> clusters;

    std::size_t size() const { return clusters.size(); }
    friend bool operator==(const ClusterPlan&, const ClusterPlan&) = default;
};

// Spatial metric used for grouping: planar Euclidean for grid cells and
// synthetic points, great-circle for sensors.
enum class Metric { euclidean, haversine };

struct NodePoints {
    Metric metric = Metric::euclidean;
    std::vector<std::array<double, 2>> coords; // (x, y) or (lat, lon)

    std::size_t size() const { return coords.size(); }

    double distance(std::size_t i, std::size_t j) const {
        if (metric == Metric::haversine) {
            return haversine_km({coords[i][0], coords[i][1]}, {coords[j][0], coords[j][1]});
        }
        return std::hypot(coords[i][0] - coords[j][0], coords[i][1] - coords[j][1]);
    }

    static NodePoints planar(std::vector<std::array<double, 2>> xy) { return {Metric::euclidean, std::move(xy)}; }

    static NodePoints of(const SpatioTemporalTensor& x) {
        NodePoints p;
        if (x.format == SpatialFormat::grid) {
            p.metric = Metric::euclidean;
            for (std::size_t n = 0; n < x.nodes; ++n) {
                const auto cell = x.grid_cell(n);
                p.coords.push_back({static_cast<double>(cell.idx), static_cast<double>(cell.idy)});
            }
        } else {
            p.metric = Metric::haversine;
            for (const auto& c : x.sensor_coords) {
                p.coords.push_back({c.lat_deg, c.lon_deg});
            }
        }
        return p;
    }
};

namespace detail {

// Runs the greedy grouping over points embedded so that Euclidean distance
// ranks neighbours exactly as the target metric does.
template <std::size_t K>
ClusterPlan greedy_clusters(std::span<const std::array<double, K>> pts, std::size_t capacity, FillMode mode) {
    const std::size_t n = pts.size();
    ClusterPlan plan{capacity, mode, {}};
    auto as_slots = [](const std::vector<std::size_t>& members, std::size_t cap) {
        std::vector<Slot> slots(cap);
        for (std::size_t i = 0; i < members.size(); ++i) {
            slots[i] = {static_cast<std::int64_t>(members[i]), true};
        }
        return slots;
    };

    if (capacity > n) {
        std::vector<std::size_t> members;
        if (mode == FillMode::neighbor_fill) {
            // Repeat the whole point set, then the first (capacity mod n).
            for (std::size_t j = 0; j < capacity / n; ++j) {
                for (std::size_t i = 0; i < n; ++i) {
                    members.push_back(i);
                }
            }
            for (std::size_t i = 0; i < capacity % n; ++i) {
                members.push_back(i);
            }
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                members.push_back(i);
            }
        }
        plan.clusters.push_back(as_slots(members, capacity));
        return plan;
    }

    const KdTree<K> tree(pts);
    std::vector<bool> assigned(n, false);
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < n; ++i) {
        if (assigned[i]) {
            continue;
        }
        std::vector<std::size_t> cluster;
        std::vector<bool> in_cluster(n, false);
        for (const auto& nb : tree.nearest(pts[i], capacity)) {
            if (!assigned[nb.index]) {
                cluster.push_back(nb.index);
                in_cluster[nb.index] = true;
                if (cluster.size() == capacity) {
                    break;
                }
            }
        }
        if (cluster.size() < capacity) {
            for (const auto& nb : tree.nearest(pts[i], n)) {
                if (!assigned[nb.index] && !in_cluster[nb.index]) {
                    cluster.push_back(nb.index);
                    in_cluster[nb.index] = true;
                    if (cluster.size() == capacity) {
                        break;
                    }
                }
            }
        }
        for (const auto idx : cluster) {
            assigned[idx] = true;
        }
        groups.push_back(std::move(cluster));
    }

    auto& last = groups.back();
    if (last.size() < capacity && mode == FillMode::neighbor_fill) {
        std::size_t needed = capacity - last.size();
        std::vector<bool> in_last(n, false);
        for (const auto idx : last) {
            in_last[idx] = true;
        }
        // Seeds are the members present before filling began.
        const std::vector<std::size_t> seeds = last;
        for (const auto seed : seeds) {
            for (const auto& nb : tree.nearest(pts[seed], n)) {
                if (!in_last[nb.index]) {
                    last.push_back(nb.index);
                    in_last[nb.index] = true;
                    if (--needed == 0) {
                        break;
                    }
                }
            }
            if (needed == 0) {
                break;
            }
        }
    }
    for (const auto& g : groups) {
        plan.clusters.push_back(as_slots(g, capacity));
    }
    return plan;
}

} // namespace detail

// Greedy capacity-constrained clustering. Seeds are visited in ascending node
// index; each unassigned seed takes its nearest unassigned neighbours (itself
// included) until the cluster holds `capacity` nodes. Ties between
// equidistant neighbours go to the lower node index.
inline ClusterPlan build_clusters(const NodePoints& points, std::size_t capacity,
                                  FillMode mode = FillMode::binary_mask) {
    if (points.size() == 0) {
        throw EmptyDatasetError("cannot cluster an empty node set");
    }
    if (capacity < 1) {
        throw ConfigError("cluster capacity must be at least 1");
    }
    if (points.metric == Metric::euclidean) {
        return detail::greedy_clusters<2>(std::span<const std::array<double, 2>>(points.coords), capacity, mode);
    }
    // Chord length on the unit sphere is monotone in great-circle distance,
    // so nearest-neighbour order in this embedding is Haversine order.
    std::vector<std::array<double, 3>> unit;
    unit.reserve(points.size());
    constexpr double rad = std::numbers::pi / 180.0;
    for (const auto& c : points.coords) {
        check_coordinate({c[0], c[1]});
        const double lat = c[0] * rad;
        const double lon = c[1] * rad;
        unit.push_back({std::cos(lat) * std::cos(lon), std::cos(lat) * std::sin(lon), std::sin(lat)});
    }
    return detail::greedy_clusters<3>(std::span<const std::array<double, 3>>(unit), capacity, mode);
}

inline ClusterPlan build_clusters(const SpatioTemporalTensor& x, std::size_t capacity,
                                  FillMode mode = FillMode::binary_mask) {
    return build_clusters(NodePoints::of(x), capacity, mode);
}

// Mean over clusters of the mean pairwise distance between distinct valid
// members. Clusters with fewer than two distinct members contribute zero.
inline double locality_score(const ClusterPlan& plan, const NodePoints& points) {
    if (plan.clusters.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (const auto& cluster : plan.clusters) {
        std::set<std::int64_t> distinct;
        for (const auto& s : cluster) {
            if (s.valid) {
                distinct.insert(s.node);
            }
        }
        if (distinct.size() < 2) {
            continue;
        }
        const std::vector<std::int64_t> members(distinct.begin(), distinct.end());
        double sum = 0.0;
        std::size_t pairs = 0;
        for (std::size_t a = 0; a < members.size(); ++a) {
            for (std::size_t b = a + 1; b < members.size(); ++b) {
                sum += points.distance(static_cast<std::size_t>(members[a]), static_cast<std::size_t>(members[b]));
                ++pairs;
            }
        }
        total += sum / static_cast<double>(pairs);
    }
    return total / static_cast<double>(plan.clusters.size());
}

inline void save_plan(const ClusterPlan& plan, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + file.string());
    }
    out << "# capacity=" << plan.capacity << " fill_mode=" << to_string(plan.fill_mode) << '\n';
    out << "cluster_id,slot,node_index,valid\n";
    for (std::size_t k = 0; k < plan.clusters.size(); ++k) {
        for (std::size_t s = 0; s < plan.clusters[k].size(); ++s) {
            const auto& slot = plan.clusters[k][s];
            out << k << ',' << s << ',' << slot.node << ',' << (slot.valid ? 1 : 0) << '\n';
        }
    }
}

inline ClusterPlan load_plan(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) {
        throw IoError("cannot open " + file.string());
    }
    ClusterPlan plan;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        if (line.front() == '#') {
            std::istringstream meta(line.substr(1));
            std::string token;
            while (meta >> token) {
                const auto eq = token.find('=');
                if (eq == std::string::npos) {
                    continue;
                }
                const auto key = token.substr(0, eq);
                const auto value = token.substr(eq + 1);
                if (key == "capacity") {
                    plan.capacity = KeyValueText::convert<std::size_t>(value, key);
                } else if (key == "fill_mode") {
                    plan.fill_mode = parse_fill_mode(value);
                }
            }
            continue;
        }
        if (line.rfind("cluster_id", 0) == 0) {
            continue;
        }
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != 4) {
            throw FormatError(file.string() + ": expected 4 columns");
        }
        const auto k = KeyValueText::convert<std::size_t>(cells[0], "cluster_id");
        const auto s = KeyValueText::convert<std::size_t>(cells[1], "slot");
        const auto node = KeyValueText::convert<std::int64_t>(cells[2], "node_index");
        const bool valid = KeyValueText::convert<bool>(cells[3], "valid");
        if (k >= plan.clusters.size()) {
            plan.clusters.resize(k + 1);
        }
        auto& cluster = plan.clusters[k];
        if (s >= cluster.size()) {
            cluster.resize(s + 1);
        }
        cluster[s] = {node, valid};
    }
    for (const auto& c : plan.clusters) {
        if (plan.capacity == 0) {
            plan.capacity = c.size();
        }
        if (c.size() != plan.capacity) {
            throw FormatError(file.string() + ": clusters differ in slot count");
        }
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Spatio-temporal patching
// ---------------------------------------------------------------------------

struct PatchOrigin {
    std::size_t cluster = 0;
    std::size_t start = 0;
    friend bool operator==(const PatchOrigin&, const PatchOrigin&) = default;
};

// Uniform samples [batch][slot][step][channel].
struct PatchBatch {
    std::size_t batch = 0;
    std::size_t slots = 0;
    std::size_t steps = 0;
    std::size_t channels = 0;
    std::vector<double> data;
    std::vector<std::uint8_t> slot_mask;  // [batch][slot]
    std::vector<std::uint8_t> value_mask; // [batch][slot][step][channel]
    std::vector<PatchOrigin> origin;

    PatchBatch() = default;
    PatchBatch(std::size_t b, std::size_t s, std::size_t t, std::size_t c)
        : batch(b), slots(s), steps(t), channels(c), data(b * s * t * c, 0.0), slot_mask(b * s, 0),
          value_mask(b * s * t * c, 0), origin(b) {}

    std::size_t patch_size() const { return slots * steps * channels; }
    std::size_t index(std::size_t b, std::size_t s, std::size_t t, std::size_t c) const {
        return ((b * slots + s) * steps + t) * channels + c;
    }
    bool slot_valid(std::size_t b, std::size_t s) const { return slot_mask[b * slots + s] != 0; }

    void append(const PatchBatch& other) {
        if (batch == 0) {
            *this = other;
            return;
        }
        if (other.slots != slots || other.steps != steps || other.channels != channels) {
            throw ShapeError("cannot append patches of a different shape");
        }
        batch += other.batch;
        data.insert(data.end(), other.data.begin(), other.data.end());
        slot_mask.insert(slot_mask.end(), other.slot_mask.begin(), other.slot_mask.end());
        value_mask.insert(value_mask.end(), other.value_mask.begin(), other.value_mask.end());
        origin.insert(origin.end(), other.origin.begin(), other.origin.end());
    }
};

// Writes the patch for (cluster, start) into slot b of `out`.
inline void gather_patch(const Dataset& data, const ClusterPlan& plan, std::size_t cluster, std::size_t start,
                         PatchBatch& out, std::size_t b) {
    const auto& x = data.x;
    const auto& slots = plan.clusters.at(cluster);
    out.origin[b] = {cluster, start};
    for (std::size_t s = 0; s < slots.size(); ++s) {
        const bool valid = slots[s].valid;
        out.slot_mask[b * out.slots + s] = valid ? 1 : 0;
        if (!valid) {
            continue;
        }
        const auto node = static_cast<std::size_t>(slots[s].node);
        for (std::size_t t = 0; t < out.steps; ++t) {
            for (std::size_t c = 0; c < out.channels; ++c) {
                const std::size_t i = out.index(b, s, t, c);
                out.data[i] = x.at(node, start + t, c);
                out.value_mask[i] = data.mask.observed(node, start + t, c) ? 1 : 0;
            }
        }
    }
}

// Window starts 0, stride, 2*stride, ... while the window fits.
inline std::vector<std::size_t> window_starts(std::size_t steps, std::size_t window, std::size_t stride) {
    if (steps < window) {
        throw WindowError("series of " + std::to_string(steps) + " steps is shorter than the window " +
                          std::to_string(window));
    }
    if (stride < 1) {
        throw WindowError("stride must be at least 1");
    }
    std::vector<std::size_t> starts;
    for (std::size_t t = 0; t + window <= steps; t += stride) {
        starts.push_back(t);
    }
    return starts;
}

// One patch per (cluster, window), cluster-major.
inline PatchBatch patchify(const Dataset& data, const ClusterPlan& plan, std::size_t patch_steps,
                           std::size_t stride) {
    if (!data.mask.same_shape(data.x)) {
        throw ShapeError("mask shape does not match the tensor");
    }
    const auto starts = window_starts(data.x.steps, patch_steps, stride);
    PatchBatch out(plan.size() * starts.size(), plan.capacity, patch_steps, data.x.channels);
    std::size_t b = 0;
    for (std::size_t k = 0; k < plan.size(); ++k) {
        for (const auto t : starts) {
            gather_patch(data, plan, k, t, out, b++);
        }
    }
    return out;
}

} // namespace urbanst
