#pragma once

// Predefined adjacency matrices: threshold Gaussian kernel over Haversine
// distances for sensors, Moore (8-connected) neighbourhood for grids.

#include <cmath>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "urbanst/dataset.hpp"
#include "urbanst/errors.hpp"
#include "urbanst/kv_text.hpp"

namespace urbanst {

inline constexpr double kEarthRadiusKm = 6371.0;

enum class GraphKind { gaussian, moore };

inline const char* to_string(GraphKind k) { return k == GraphKind::gaussian ? "gaussian" : "moore"; }

inline GraphKind parse_graph_kind(const std::string& s) {
    if (s == "gaussian") {
        return GraphKind::gaussian;
    }
    if (s == "moore") {
        return GraphKind::moore;
    }
    throw ConfigError("unknown graph kind `" + s + "` (expected gaussian or moore)");
}

struct AdjacencyMatrix {
    GraphKind kind = GraphKind::gaussian;
    std::size_t nodes = 0;
    std::vector<double> weights; // row-major N x N

    double operator()(std::size_t i, std::size_t j) const { return weights[i * nodes + j]; }
    double& operator()(std::size_t i, std::size_t j) { return weights[i * nodes + j]; }

    std::size_t degree(std::size_t i) const {
        std::size_t d = 0;
        for (std::size_t j = 0; j < nodes; ++j) {
            d += (*this)(i, j) != 0.0 ? 1 : 0;
        }
        return d;
    }
};

inline void check_coordinate(const LatLon& p) {
    if (!(p.lat_deg >= -90.0 && p.lat_deg <= 90.0) || !(p.lon_deg >= -180.0 && p.lon_deg <= 180.0)) {
        throw CoordError("coordinate out of range: (" + std::to_string(p.lat_deg) + ", " +
                         std::to_string(p.lon_deg) + ")");
    }
}

// Great-circle distance in kilometres.
inline double haversine_km(const LatLon& a, const LatLon& b) {
    check_coordinate(a);
    check_coordinate(b);
    constexpr double rad = std::numbers::pi / 180.0;
    const double dlat = (b.lat_deg - a.lat_deg) * rad;
    const double dlon = (b.lon_deg - a.lon_deg) * rad;
    const double s = std::sin(dlat / 2.0);
    const double t = std::sin(dlon / 2.0);
    const double h = s * s + std::cos(a.lat_deg * rad) * std::cos(b.lat_deg * rad) * t * t;
    return 2.0 * kEarthRadiusKm * std::asin(std::sqrt(std::min(1.0, h)));
}

// Shared by the Gaussian graph and external checks: population standard
// deviation of all N(N-1)/2 pairwise distances.
inline double pairwise_distance_std(const std::vector<double>& dist, std::size_t n) {
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            sum += dist[i * n + j];
            ++pairs;
        }
    }
    const double mean = sum / static_cast<double>(pairs);
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double d = dist[i * n + j] - mean;
            sq += d * d;
        }
    }
    return std::sqrt(sq / static_cast<double>(pairs));
}

// Kernel over a precomputed symmetric distance matrix (km).
inline AdjacencyMatrix gaussian_threshold_graph(const std::vector<double>& dist, std::size_t n, double r = 0.5) {
    if (n < 2) {
        throw DegenerateGraphError("a distance graph needs at least two sensors");
    }
    if (!(r >= 0.0 && r < 1.0)) {
        throw ConfigError("threshold r must lie in [0, 1)");
    }
    const double sigma = pairwise_distance_std(dist, n);
    double max_dist = 0.0;
    for (const double d : dist) {
        max_dist = std::max(max_dist, d);
    }
    if (max_dist == 0.0) {
        throw DegenerateGraphError("all pairwise distances are zero");
    }
    AdjacencyMatrix a{GraphKind::gaussian, n, std::vector<double>(n * n, 0.0)};
    if (sigma == 0.0) {
        // Equidistant sensors: the kernel exp(-d^2 / 0) vanishes everywhere
        // except where d = 0, which is excluded above.
        return a;
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) {
                continue;
            }
            const double d = dist[i * n + j];
            const double w = std::exp(-(d * d) / (sigma * sigma));
            a(i, j) = w >= r ? w : 0.0;
        }
    }
    return a;
}

inline AdjacencyMatrix gaussian_threshold_graph(std::span<const LatLon> coords, double r = 0.5) {
    const std::size_t n = coords.size();
    std::vector<double> dist(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            dist[i * n + j] = dist[j * n + i] = haversine_km(coords[i], coords[j]);
        }
    }
    return gaussian_threshold_graph(dist, n, r);
}

inline AdjacencyMatrix moore_grid_graph(int width, int height) {
    if (width < 1 || height < 1) {
        throw ConfigError("grid dimensions must be positive");
    }
    const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    AdjacencyMatrix a{GraphKind::moore, n, std::vector<double>(n * n, 0.0)};
    for (std::size_t i = 0; i < n; ++i) {
        const int ui = static_cast<int>(i % static_cast<std::size_t>(width));
        const int vi = static_cast<int>(i / static_cast<std::size_t>(width));
        for (std::size_t j = 0; j < n; ++j) {
            const int uj = static_cast<int>(j % static_cast<std::size_t>(width));
            const int vj = static_cast<int>(j / static_cast<std::size_t>(width));
            if (i != j && std::abs(ui - uj) <= 1 && std::abs(vi - vj) <= 1) {
                a(i, j) = 1.0;
            }
        }
    }
    return a;
}

// Builds the graph matching the dataset's spatial format.
inline AdjacencyMatrix build_graph(const SpatioTemporalTensor& x, GraphKind kind, double r = 0.5) {
    if (kind == GraphKind::moore) {
        if (x.format != SpatialFormat::grid) {
            throw ConfigError("a Moore graph needs grid data");
        }
        return moore_grid_graph(x.grid_width, x.grid_height);
    }
    if (x.format != SpatialFormat::sensor) {
        throw ConfigError("a Gaussian distance graph needs sensor coordinates");
    }
    return gaussian_threshold_graph(std::span<const LatLon>(x.sensor_coords), r);
}

inline constexpr const char* kAdjacencyDescriptor = "adjacency.txt";
inline constexpr const char* kAdjacencyWeights = "weights.f32le";

inline void save_adjacency(const AdjacencyMatrix& a, const std::filesystem::path& dir, double r) {
    std::filesystem::create_directories(dir);
    KeyValueText d;
    d.add("kind", std::string(to_string(a.kind)));
    d.add("nodes", a.nodes);
    d.add("threshold", r);
    d.write_file(dir / kAdjacencyDescriptor, "urbanst adjacency v1");
    const auto blob = detail::encode_f32le(a.weights);
    detail::write_bytes(dir / kAdjacencyWeights, blob.data(), blob.size());
}

inline AdjacencyMatrix load_adjacency(const std::filesystem::path& dir) {
    const auto d = KeyValueText::read_file(dir / kAdjacencyDescriptor);
    AdjacencyMatrix a;
    const auto kind = d.get<std::string>("kind");
    if (kind == "gaussian") {
        a.kind = GraphKind::gaussian;
    } else if (kind == "moore") {
        a.kind = GraphKind::moore;
    } else {
        throw FormatError("unknown adjacency kind `" + kind + "`");
    }
    a.nodes = d.get<std::size_t>("nodes");
    const auto blob = detail::read_bytes(dir / kAdjacencyWeights);
    if (blob.size() != a.nodes * a.nodes * 4) {
        throw FormatError("adjacency blob size does not match nodes^2");
    }
    const auto w = detail::decode_f32le(blob);
    a.weights.assign(w.begin(), w.end());
    return a;
}

} // namespace urbanst
