#pragma once

// Seeded synthetic sensor datasets: nodes evenly spaced on a ring with
// smoothly varying phase, carrying superposed daily/weekly sinusoids or
// random walks plus Gaussian noise.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "urbanst/dataset.hpp"
#include "urbanst/errors.hpp"
#include "urbanst/random.hpp"

namespace urbanst {

enum class SynthKind { sinusoid, random_walk };

inline SynthKind parse_synth_kind(const std::string& s) {
    if (s == "sinusoid") {
        return SynthKind::sinusoid;
    }
    if (s == "random_walk") {
        return SynthKind::random_walk;
    }
    throw ConfigError("unknown synthetic kind `" + s + "` (expected sinusoid or random_walk)");
}

struct SynthSpec {
    SynthKind kind = SynthKind::sinusoid;
    std::size_t nodes = 32;
    std::size_t steps = 4000;
    std::size_t channels = 1;
    int dt_minutes = 60;
    double short_period = 24.0;
    double long_period = 168.0;
    double short_amplitude = 1.0;
    double long_amplitude = 0.5;
    double offset = 2.0;
    double noise_std = 0.1;
    double ring_radius_deg = 0.05;
    double center_lat = 40.75;
    double center_lon = -73.98;
    std::uint64_t seed = 0;
    std::string name = "synthetic";
};

// Distribution shift used by few-shot checks: larger weekly component,
// different level and phase, more noise.
inline SynthSpec shifted(SynthSpec s) {
    s.short_amplitude = 0.6;
    s.long_amplitude = 1.4;
    s.offset = 5.0;
    s.noise_std = 0.15;
    s.name += "_shifted";
    s.seed ^= 0x5eed5eedULL;
    return s;
}

inline Dataset make_synthetic(const SynthSpec& spec) {
    if (spec.nodes == 0 || spec.steps == 0 || spec.channels == 0) {
        throw ConfigError("synthetic dataset needs positive nodes, steps and channels");
    }
    if (spec.short_period <= 0.0 || spec.long_period <= 0.0 || spec.noise_std < 0.0 || spec.dt_minutes <= 0) {
        throw ConfigError("synthetic periods and dt must be positive, noise non-negative");
    }
    Rng rng(spec.seed);
    auto x = SpatioTemporalTensor::zeros(spec.nodes, spec.steps, spec.channels);
    x.name = spec.name;
    x.format = SpatialFormat::sensor;
    x.dt_minutes = spec.dt_minutes;
    x.start_epoch_s = 1'700'000'000;
    constexpr double two_pi = 2.0 * std::numbers::pi;
    const double phase0 = rng.uniform(0.0, two_pi);
    for (std::size_t n = 0; n < spec.nodes; ++n) {
        const double theta = two_pi * static_cast<double>(n) / static_cast<double>(spec.nodes);
        x.sensor_coords[n] = {spec.center_lat + spec.ring_radius_deg * std::sin(theta),
                              spec.center_lon + spec.ring_radius_deg * std::cos(theta)};
        for (std::size_t c = 0; c < spec.channels; ++c) {
            const double a1 = spec.short_amplitude * rng.uniform(0.8, 1.2);
            const double a2 = spec.long_amplitude * rng.uniform(0.8, 1.2);
            const double base = spec.offset + rng.uniform(-0.5, 0.5);
            const double phase = phase0 + theta + 0.5 * static_cast<double>(c);
            double walk = 0.0;
            for (std::size_t t = 0; t < spec.steps; ++t) {
                const double tt = static_cast<double>(t);
                double v = 0.0;
                if (spec.kind == SynthKind::sinusoid) {
                    v = base + a1 * std::sin(two_pi * tt / spec.short_period + phase) +
                        a2 * std::sin(two_pi * tt / spec.long_period + 0.5 * phase);
                } else {
                    walk += rng.normal(0.0, 0.1 * spec.short_amplitude);
                    v = base + walk;
                }
                x.at(n, t, c) = v + rng.normal(0.0, spec.noise_std);
            }
        }
    }
    Dataset d{std::move(x), {}};
    d.mask = ObservationMask::all_observed(d.x);
    return d;
}

} // namespace urbanst
