#pragma once

// Canonical spatio-temporal data model, on-disk container, CSV ingestion and
// the curation pipeline (resampling, static-node removal, 3-sigma clipping,
// short-gap pre-completion).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "urbanst/errors.hpp"
#include "urbanst/kv_text.hpp"

namespace urbanst {

enum class SpatialFormat { sensor, grid };

inline const char* to_string(SpatialFormat f) { return f == SpatialFormat::sensor ? "sensor" : "grid"; }

inline SpatialFormat parse_spatial_format(const std::string& s) {
    if (s == "sensor") {
        return SpatialFormat::sensor;
    }
    if (s == "grid") {
        return SpatialFormat::grid;
    }
    throw FormatError("unknown spatial format `" + s + "`");
}

struct LatLon {
    double lat_deg = 0.0;
    double lon_deg = 0.0;
    friend bool operator==(const LatLon&, const LatLon&) = default;
};

struct GridCell {
    int idx = 0;
    int idy = 0;
    friend bool operator==(const GridCell&, const GridCell&) = default;
};

// Third-order observation tensor [nodes][steps][channels], node-major.
struct SpatioTemporalTensor {
    std::string name;
    SpatialFormat format = SpatialFormat::sensor;
    std::size_t nodes = 0;
    std::size_t steps = 0;
    std::size_t channels = 0;
    int dt_minutes = 5;
    std::int64_t start_epoch_s = 0;
    std::vector<LatLon> sensor_coords; // sensor format: one per node
    int grid_width = 0;                // grid format: W x H lattice, row-major
    int grid_height = 0;
    std::vector<double> values;

    std::size_t size() const { return nodes * steps * channels; }
    std::size_t offset(std::size_t n, std::size_t t, std::size_t c) const {
        return (n * steps + t) * channels + c;
    }
    double& at(std::size_t n, std::size_t t, std::size_t c) { return values[offset(n, t, c)]; }
    double at(std::size_t n, std::size_t t, std::size_t c) const { return values[offset(n, t, c)]; }

    GridCell grid_cell(std::size_t n) const {
        return {static_cast<int>(n % static_cast<std::size_t>(grid_width)),
                static_cast<int>(n / static_cast<std::size_t>(grid_width))};
    }

    static SpatioTemporalTensor zeros(std::size_t n, std::size_t t, std::size_t c) {
        SpatioTemporalTensor x;
        x.nodes = n;
        x.steps = t;
        x.channels = c;
        x.values.assign(n * t * c, 0.0);
        x.sensor_coords.assign(n, LatLon{});
        return x;
    }

    // Same metadata, different step count and zeroed values.
    SpatioTemporalTensor with_steps(std::size_t new_steps) const {
        SpatioTemporalTensor y = *this;
        y.steps = new_steps;
        y.values.assign(nodes * new_steps * channels, 0.0);
        return y;
    }

    // Copy of steps [begin, begin + count).
    SpatioTemporalTensor slice_steps(std::size_t begin, std::size_t count) const {
        SpatioTemporalTensor y = with_steps(count);
        y.start_epoch_s = start_epoch_s + static_cast<std::int64_t>(begin) * dt_minutes * 60;
        for (std::size_t n = 0; n < nodes; ++n) {
            std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset(n, begin, 0)), count * channels,
                        y.values.begin() + static_cast<std::ptrdiff_t>(y.offset(n, 0, 0)));
        }
        return y;
    }
};

struct ObservationMask {
    std::size_t nodes = 0;
    std::size_t steps = 0;
    std::size_t channels = 0;
    std::vector<std::uint8_t> bits; // 1 = observed

    static ObservationMask filled(std::size_t n, std::size_t t, std::size_t c, bool observed) {
        return {n, t, c, std::vector<std::uint8_t>(n * t * c, observed ? 1 : 0)};
    }
    static ObservationMask all_observed(const SpatioTemporalTensor& x) {
        return filled(x.nodes, x.steps, x.channels, true);
    }

    std::size_t size() const { return bits.size(); }
    std::size_t offset(std::size_t n, std::size_t t, std::size_t c) const {
        return (n * steps + t) * channels + c;
    }
    bool observed(std::size_t n, std::size_t t, std::size_t c) const { return bits[offset(n, t, c)] != 0; }
    void set(std::size_t n, std::size_t t, std::size_t c, bool v) { bits[offset(n, t, c)] = v ? 1 : 0; }
    std::size_t count_observed() const {
        return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
    }
    bool same_shape(const SpatioTemporalTensor& x) const {
        return nodes == x.nodes && steps == x.steps && channels == x.channels && bits.size() == x.size();
    }

    ObservationMask slice_steps(std::size_t begin, std::size_t count) const {
        ObservationMask y{nodes, count, channels, std::vector<std::uint8_t>(nodes * count * channels)};
        for (std::size_t n = 0; n < nodes; ++n) {
            std::copy_n(bits.begin() + static_cast<std::ptrdiff_t>(offset(n, begin, 0)), count * channels,
                        y.bits.begin() + static_cast<std::ptrdiff_t>(y.offset(n, 0, 0)));
        }
        return y;
    }
};

struct Dataset {
    SpatioTemporalTensor x;
    ObservationMask mask;

    Dataset slice_steps(std::size_t begin, std::size_t count) const {
        return {x.slice_steps(begin, count), mask.slice_steps(begin, count)};
    }
};

// Per node/channel population statistics, laid out [node][channel].
struct NodeStats {
    std::size_t nodes = 0;
    std::size_t channels = 0;
    std::vector<double> mean;
    std::vector<double> std;

    double variance(std::size_t n, std::size_t c) const {
        const double s = std[n * channels + c];
        return s * s;
    }
};

// Statistics over observed entries only; slices without observations report
// mean 0 and std 0.
inline NodeStats node_stats(const SpatioTemporalTensor& x, const ObservationMask* mask = nullptr) {
    NodeStats s{x.nodes, x.channels, std::vector<double>(x.nodes * x.channels, 0.0),
                std::vector<double>(x.nodes * x.channels, 0.0)};
    for (std::size_t n = 0; n < x.nodes; ++n) {
        for (std::size_t c = 0; c < x.channels; ++c) {
            double sum = 0.0;
            std::size_t count = 0;
            for (std::size_t t = 0; t < x.steps; ++t) {
                if (mask == nullptr || mask->observed(n, t, c)) {
                    sum += x.at(n, t, c);
                    ++count;
                }
            }
            if (count == 0) {
                continue;
            }
            const double mu = sum / static_cast<double>(count);
            double sq = 0.0;
            for (std::size_t t = 0; t < x.steps; ++t) {
                if (mask == nullptr || mask->observed(n, t, c)) {
                    const double d = x.at(n, t, c) - mu;
                    sq += d * d;
                }
            }
            s.mean[n * x.channels + c] = mu;
            s.std[n * x.channels + c] = std::sqrt(sq / static_cast<double>(count));
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// On-disk container: descriptor.txt + values.f32le (+ optional mask.u8)
// ---------------------------------------------------------------------------

inline constexpr const char* kDescriptorFile = "descriptor.txt";
inline constexpr const char* kValuesFile = "values.f32le";
inline constexpr const char* kMaskFile = "mask.u8";

namespace detail {

inline std::vector<char> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const void* data, std::size_t size) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) {
        throw IoError("short write to " + path.string());
    }
}

inline std::uint32_t to_little_endian(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
    }
    return v;
}

inline std::vector<float> decode_f32le(const std::vector<char>& bytes) {
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t raw = 0;
        std::memcpy(&raw, bytes.data() + 4 * i, 4);
        out[i] = std::bit_cast<float>(to_little_endian(raw));
    }
    return out;
}

template <class Range>
std::vector<char> encode_f32le(const Range& values) {
    std::vector<char> out(values.size() * 4);
    std::size_t i = 0;
    for (const auto v : values) {
        const std::uint32_t raw = to_little_endian(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        std::memcpy(out.data() + 4 * i, &raw, 4);
        ++i;
    }
    return out;
}

inline std::pair<double, double> parse_pair(const std::string& text) {
    std::istringstream in(text);
    double a = 0.0;
    double b = 0.0;
    if (!(in >> a >> b)) {
        throw FormatError("expected two numbers, got `" + text + "`");
    }
    return {a, b};
}

} // namespace detail

inline Dataset load_dataset(const std::filesystem::path& dir) {
    const auto desc = KeyValueText::read_file(dir / kDescriptorFile);
    SpatioTemporalTensor x;
    x.name = desc.get_or<std::string>("name", dir.filename().string());
    x.format = parse_spatial_format(desc.get<std::string>("format"));
    x.nodes = desc.get<std::size_t>("nodes");
    x.steps = desc.get<std::size_t>("steps");
    x.channels = desc.get<std::size_t>("channels");
    x.dt_minutes = desc.get<int>("dt_minutes");
    x.start_epoch_s = desc.get_or<std::int64_t>("start_epoch_s", 0);
    if (x.nodes == 0 || x.steps == 0 || x.channels == 0) {
        throw FormatError("descriptor declares an empty tensor");
    }
    if (x.dt_minutes <= 0) {
        throw FormatError("dt_minutes must be positive");
    }
    if (x.format == SpatialFormat::grid) {
        x.grid_width = desc.get<int>("width");
        x.grid_height = desc.get<int>("height");
        if (x.grid_width <= 0 || x.grid_height <= 0 ||
            static_cast<std::size_t>(x.grid_width) * static_cast<std::size_t>(x.grid_height) != x.nodes) {
            throw FormatError("grid descriptor: nodes = " + std::to_string(x.nodes) + " but width x height = " +
                              std::to_string(x.grid_width) + " x " + std::to_string(x.grid_height));
        }
    } else {
        const auto coords = desc.all("coord");
        if (coords.size() != x.nodes) {
            throw FormatError("sensor descriptor lists " + std::to_string(coords.size()) + " coords for " +
                              std::to_string(x.nodes) + " nodes");
        }
        x.sensor_coords.reserve(x.nodes);
        for (const auto& c : coords) {
            const auto [lat, lon] = detail::parse_pair(c);
            x.sensor_coords.push_back({lat, lon});
        }
    }

    const auto blob = detail::read_bytes(dir / kValuesFile);
    if (blob.size() != x.size() * 4) {
        throw FormatError("values blob has " + std::to_string(blob.size()) + " bytes, descriptor implies " +
                          std::to_string(x.size() * 4));
    }
    const auto floats = detail::decode_f32le(blob);
    x.values.assign(floats.begin(), floats.end());

    ObservationMask mask = ObservationMask::all_observed(x);
    if (std::filesystem::exists(dir / kMaskFile)) {
        const auto mbytes = detail::read_bytes(dir / kMaskFile);
        if (mbytes.size() != x.size()) {
            throw FormatError("mask blob has " + std::to_string(mbytes.size()) + " bytes, expected " +
                              std::to_string(x.size()));
        }
        for (std::size_t i = 0; i < mbytes.size(); ++i) {
            const auto b = static_cast<std::uint8_t>(mbytes[i]);
            if (b > 1) {
                throw FormatError("mask entries must be 0 or 1");
            }
            mask.bits[i] = b;
        }
    }
    for (std::size_t i = 0; i < x.values.size(); ++i) {
        if (!std::isfinite(x.values[i])) {
            if (mask.bits[i] != 0) {
                throw DataError("non-finite value at flat index " + std::to_string(i) + " is marked observed");
            }
            x.values[i] = 0.0;
        }
    }
    return {std::move(x), std::move(mask)};
}

inline KeyValueText describe(const SpatioTemporalTensor& x) {
    KeyValueText d;
    d.add("name", x.name);
    d.add("format", std::string(to_string(x.format)));
    d.add("nodes", x.nodes);
    d.add("steps", x.steps);
    d.add("channels", x.channels);
    d.add("dt_minutes", x.dt_minutes);
    d.add("start_epoch_s", x.start_epoch_s);
    if (x.format == SpatialFormat::grid) {
        d.add("width", x.grid_width);
        d.add("height", x.grid_height);
    } else {
        for (const auto& c : x.sensor_coords) {
            std::ostringstream s;
            s.precision(17);
            s << c.lat_deg << ' ' << c.lon_deg;
            d.add("coord", s.str());
        }
    }
    return d;
}

// The mask file is written only when some entry is missing, so an
// all-observed dataset round-trips to an identical directory.
inline void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    describe(data.x).write_file(dir / kDescriptorFile, "urbanst dataset v1");
    const auto blob = detail::encode_f32le(data.x.values);
    detail::write_bytes(dir / kValuesFile, blob.data(), blob.size());
    const bool complete = data.mask.count_observed() == data.mask.size();
    if (complete) {
        std::filesystem::remove(dir / kMaskFile);
    } else {
        detail::write_bytes(dir / kMaskFile, data.mask.bits.data(), data.mask.bits.size());
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion: first column = epoch seconds, one column per node, one file
// per channel. Empty cells are missing.
// ---------------------------------------------------------------------------

struct CsvChannel {
    std::vector<std::string> node_names;
    std::vector<std::int64_t> timestamps;
    std::vector<double> values;        // [step][node]
    std::vector<std::uint8_t> observed; // [step][node]
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    for (const char ch : line) {
        if (ch == ',') {
            cells.emplace_back(KeyValueText::trim(cell));
            cell.clear();
        } else if (ch != '\r') {
            cell.push_back(ch);
        }
    }
    cells.emplace_back(KeyValueText::trim(cell));
    return cells;
}

} // namespace detail

inline CsvChannel read_csv_channel(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    CsvChannel out;
    std::string line;
    if (!std::getline(in, line)) {
        throw FormatError(path.string() + ": empty CSV");
    }
    auto header = detail::split_csv_line(line);
    if (header.size() < 2) {
        throw FormatError(path.string() + ": need a timestamp column and at least one node column");
    }
    out.node_names.assign(header.begin() + 1, header.end());
    const std::size_t n = out.node_names.size();
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (KeyValueText::trim(line).empty()) {
            continue;
        }
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != n + 1) {
            throw FormatError(path.string() + ":" + std::to_string(row) + ": expected " + std::to_string(n + 1) +
                              " cells, got " + std::to_string(cells.size()));
        }
        out.timestamps.push_back(KeyValueText::convert<std::int64_t>(cells[0], "timestamp"));
        for (std::size_t j = 0; j < n; ++j) {
            if (cells[j + 1].empty()) {
                out.values.push_back(0.0);
                out.observed.push_back(0);
                continue;
            }
            const double v = KeyValueText::convert<double>(cells[j + 1], out.node_names[j]);
            if (!std::isfinite(v)) {
                throw DataError(path.string() + ":" + std::to_string(row) + ": non-finite value");
            }
            out.values.push_back(v);
            out.observed.push_back(1);
        }
    }
    if (out.timestamps.empty()) {
        throw FormatError(path.string() + ": no data rows");
    }
    return out;
}

// Stacks per-channel CSV tables into one dataset. Timestamps must be uniformly
// spaced and identical across channels.
inline Dataset dataset_from_csv(const std::vector<CsvChannel>& channels, std::string name) {
    if (channels.empty()) {
        throw FormatError("no CSV channels given");
    }
    const auto& first = channels.front();
    for (const auto& ch : channels) {
        if (ch.node_names != first.node_names || ch.timestamps != first.timestamps) {
            throw FormatError("CSV channels disagree on node columns or timestamps");
        }
    }
    const std::size_t steps = first.timestamps.size();
    int dt_minutes = 5;
    if (steps >= 2) {
        const std::int64_t delta = first.timestamps[1] - first.timestamps[0];
        for (std::size_t t = 1; t < steps; ++t) {
            if (first.timestamps[t] - first.timestamps[t - 1] != delta) {
                throw FormatError("CSV timestamps are not uniformly spaced");
            }
        }
        if (delta <= 0 || delta % 60 != 0) {
            throw FormatError("CSV timestamp spacing must be a positive whole number of minutes");
        }
        dt_minutes = static_cast<int>(delta / 60);
    }
    auto x = SpatioTemporalTensor::zeros(first.node_names.size(), steps, channels.size());
    x.name = std::move(name);
    x.dt_minutes = dt_minutes;
    x.start_epoch_s = first.timestamps.front();
    auto mask = ObservationMask::all_observed(x);
    for (std::size_t c = 0; c < channels.size(); ++c) {
        for (std::size_t t = 0; t < steps; ++t) {
            for (std::size_t n = 0; n < x.nodes; ++n) {
                x.at(n, t, c) = channels[c].values[t * x.nodes + n];
                mask.set(n, t, c, channels[c].observed[t * x.nodes + n] != 0);
            }
        }
    }
    return {std::move(x), std::move(mask)};
}

// ---------------------------------------------------------------------------
// Frequency synchronization
// ---------------------------------------------------------------------------

enum class Aggregation { mean, sum };

inline Aggregation parse_aggregation(const std::string& s) {
    if (s == "mean") {
        return Aggregation::mean;
    }
    if (s == "sum") {
        return Aggregation::sum;
    }
    throw ConfigError("unknown aggregation `" + s + "`");
}

// Downsampling aggregates non-overlapping windows (trailing remainder
// dropped); upsampling interpolates linearly between consecutive samples.
// With a mask: a mean window is observed if any member is, a sum window only
// if all are, and an interpolated step only if both anchors are.
inline Dataset resample(const Dataset& in, int target_dt, Aggregation agg) {
    const auto& x = in.x;
    if (target_dt <= 0 || x.dt_minutes <= 0) {
        throw ResampleError("sampling intervals must be positive");
    }
    if (target_dt == x.dt_minutes) {
        return in;
    }
    if (target_dt > x.dt_minutes) {
        if (target_dt % x.dt_minutes != 0) {
            throw ResampleError("target interval " + std::to_string(target_dt) + " is not a multiple of " +
                                std::to_string(x.dt_minutes));
        }
        const std::size_t k = static_cast<std::size_t>(target_dt / x.dt_minutes);
        const std::size_t out_steps = x.steps / k;
        if (out_steps < 1) {
            throw ResampleError("series too short for a window of " + std::to_string(k) + " steps");
        }
        Dataset out{x.with_steps(out_steps), ObservationMask::filled(x.nodes, out_steps, x.channels, false)};
        out.x.dt_minutes = target_dt;
        for (std::size_t n = 0; n < x.nodes; ++n) {
            for (std::size_t c = 0; c < x.channels; ++c) {
                for (std::size_t w = 0; w < out_steps; ++w) {
                    double sum = 0.0;
                    std::size_t seen = 0;
                    for (std::size_t j = 0; j < k; ++j) {
                        const std::size_t t = w * k + j;
                        if (in.mask.observed(n, t, c)) {
                            sum += x.at(n, t, c);
                            ++seen;
                        }
                    }
                    if (agg == Aggregation::mean) {
                        out.x.at(n, w, c) = seen > 0 ? sum / static_cast<double>(seen) : 0.0;
                        out.mask.set(n, w, c, seen > 0);
                    } else {
                        out.x.at(n, w, c) = seen == k ? sum : 0.0;
                        out.mask.set(n, w, c, seen == k);
                    }
                }
            }
        }
        return out;
    }
    if (x.dt_minutes % target_dt != 0) {
        throw ResampleError("interval " + std::to_string(x.dt_minutes) + " is not a multiple of target " +
                            std::to_string(target_dt));
    }
    const std::size_t k = static_cast<std::size_t>(x.dt_minutes / target_dt);
    const std::size_t out_steps = (x.steps - 1) * k + 1;
    Dataset out{x.with_steps(out_steps), ObservationMask::filled(x.nodes, out_steps, x.channels, false)};
    out.x.dt_minutes = target_dt;
    for (std::size_t n = 0; n < x.nodes; ++n) {
        for (std::size_t c = 0; c < x.channels; ++c) {
            for (std::size_t t = 0; t < out_steps; ++t) {
                const std::size_t j = t / k;
                const std::size_t r = t % k;
                if (r == 0) {
                    out.x.at(n, t, c) = x.at(n, j, c);
                    out.mask.set(n, t, c, in.mask.observed(n, j, c));
                    continue;
                }
                const double w = static_cast<double>(r) / static_cast<double>(k);
                out.x.at(n, t, c) = (1.0 - w) * x.at(n, j, c) + w * x.at(n, j + 1, c);
                out.mask.set(n, t, c, in.mask.observed(n, j, c) && in.mask.observed(n, j + 1, c));
            }
        }
    }
    return out;
}

inline SpatioTemporalTensor resample(const SpatioTemporalTensor& x, int target_dt, Aggregation agg) {
    return resample(Dataset{x, ObservationMask::all_observed(x)}, target_dt, agg).x;
}

// ---------------------------------------------------------------------------
// Quality control
// ---------------------------------------------------------------------------

struct StaticNodeRemoval {
    Dataset data;
    std::vector<std::size_t> kept;
};

inline std::vector<std::size_t> non_static_nodes(const SpatioTemporalTensor& x, const ObservationMask* mask,
                                                 double eps) {
    const auto stats = node_stats(x, mask);
    std::vector<std::size_t> kept;
    for (std::size_t n = 0; n < x.nodes; ++n) {
        double max_var = 0.0;
        for (std::size_t c = 0; c < x.channels; ++c) {
            max_var = std::max(max_var, stats.variance(n, c));
        }
        if (max_var > eps) {
            kept.push_back(n);
        }
    }
    return kept;
}

// Drops nodes whose largest per-channel variance is not strictly above eps.
// Grid data cannot lose cells without breaking its lattice; use
// mask_static_cells there.
inline StaticNodeRemoval remove_static_nodes(const Dataset& in, double eps = 1e-8) {
    if (eps < 0.0) {
        throw ConfigError("eps must be non-negative");
    }
    if (in.x.format == SpatialFormat::grid) {
        throw FormatError("static-node removal would break the grid lattice; mask the cells instead");
    }
    auto kept = non_static_nodes(in.x, &in.mask, eps);
    if (kept.empty()) {
        throw EmptyDatasetError("every node is static at eps = " + std::to_string(eps));
    }
    const auto& x = in.x;
    Dataset out{x, ObservationMask{kept.size(), x.steps, x.channels, {}}};
    out.x.nodes = kept.size();
    out.x.values.clear();
    out.x.sensor_coords.clear();
    for (const auto n : kept) {
        const auto begin = static_cast<std::ptrdiff_t>(x.offset(n, 0, 0));
        const auto len = static_cast<std::ptrdiff_t>(x.steps * x.channels);
        out.x.values.insert(out.x.values.end(), x.values.begin() + begin, x.values.begin() + begin + len);
        out.mask.bits.insert(out.mask.bits.end(), in.mask.bits.begin() + begin, in.mask.bits.begin() + begin + len);
        out.x.sensor_coords.push_back(x.sensor_coords[n]);
    }
    return {std::move(out), std::move(kept)};
}

inline std::pair<SpatioTemporalTensor, std::vector<std::size_t>> remove_static_nodes(const SpatioTemporalTensor& x,
                                                                                    double eps = 1e-8) {
    auto r = remove_static_nodes(Dataset{x, ObservationMask::all_observed(x)}, eps);
    return {std::move(r.data.x), std::move(r.kept)};
}

// Grid counterpart of static-node removal: static cells stay in the lattice
// but every entry is marked missing. Returns the masked cell indices.
inline std::vector<std::size_t> mask_static_cells(Dataset& data, double eps = 1e-8) {
    const auto keep = non_static_nodes(data.x, &data.mask, eps);
    std::vector<std::size_t> masked;
    std::size_t k = 0;
    for (std::size_t n = 0; n < data.x.nodes; ++n) {
        if (k < keep.size() && keep[k] == n) {
            ++k;
            continue;
        }
        masked.push_back(n);
        for (std::size_t t = 0; t < data.x.steps; ++t) {
            for (std::size_t c = 0; c < data.x.channels; ++c) {
                data.mask.set(n, t, c, false);
            }
        }
    }
    return masked;
}

// One pass of the 3-sigma rule with statistics from the unclipped input.
inline Dataset clip_outliers(const Dataset& in) {
    Dataset out = in;
    const auto stats = node_stats(in.x, &in.mask);
    for (std::size_t n = 0; n < in.x.nodes; ++n) {
        for (std::size_t c = 0; c < in.x.channels; ++c) {
            const double mu = stats.mean[n * in.x.channels + c];
            const double sigma = stats.std[n * in.x.channels + c];
            const double lo = mu - 3.0 * sigma;
            const double hi = mu + 3.0 * sigma;
            for (std::size_t t = 0; t < in.x.steps; ++t) {
                if (!in.mask.observed(n, t, c)) {
                    continue;
                }
                double& v = out.x.at(n, t, c);
                v = std::clamp(v, lo, hi);
            }
        }
    }
    return out;
}

inline SpatioTemporalTensor clip_outliers(const SpatioTemporalTensor& x) {
    return clip_outliers(Dataset{x, ObservationMask::all_observed(x)}).x;
}

struct PrecompletionResult {
    Dataset data;
    // (node, channel) slices with no observation at all; left untouched.
    std::vector<std::pair<std::size_t, std::size_t>> unobserved_slices;
};

// Fills missing runs of at most max_gap steps: interior runs by linear
// interpolation between the bracketing observations, leading and trailing
// runs by repeating the nearest observation.
inline PrecompletionResult precomplete(const Dataset& in, std::size_t max_gap = 6) {
    if (max_gap < 1) {
        throw ConfigError("max_gap must be at least 1");
    }
    PrecompletionResult r{in, {}};
    auto& x = r.data.x;
    auto& m = r.data.mask;
    const std::size_t steps = x.steps;
    for (std::size_t n = 0; n < x.nodes; ++n) {
        for (std::size_t c = 0; c < x.channels; ++c) {
            std::size_t t = 0;
            bool any = false;
            for (std::size_t s = 0; s < steps; ++s) {
                any = any || in.mask.observed(n, s, c);
            }
            if (!any) {
                r.unobserved_slices.emplace_back(n, c);
                continue;
            }
            while (t < steps) {
                if (in.mask.observed(n, t, c)) {
                    ++t;
                    continue;
                }
                const std::size_t begin = t;
                while (t < steps && !in.mask.observed(n, t, c)) {
                    ++t;
                }
                const std::size_t end = t; // exclusive
                const std::size_t len = end - begin;
                if (len > max_gap) {
                    continue;
                }
                const bool has_left = begin > 0;
                const bool has_right = end < steps;
                for (std::size_t s = begin; s < end; ++s) {
                    double v = 0.0;
                    if (has_left && has_right) {
                        const double a = in.x.at(n, begin - 1, c);
                        const double b = in.x.at(n, end, c);
                        const double w = static_cast<double>(s - (begin - 1)) / static_cast<double>(end - (begin - 1));
                        v = a + w * (b - a);
                    } else if (has_left) {
                        v = in.x.at(n, begin - 1, c);
                    } else {
                        v = in.x.at(n, end, c);
                    }
                    x.at(n, s, c) = v;
                    m.set(n, s, c, true);
                }
            }
        }
    }
    return r;
}

} // namespace urbanst
