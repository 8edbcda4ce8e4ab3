#pragma once

// Synthetic missing-data patterns: independent point dropout and per-sensor
// block outages.

#include <cstdint>
#include <string>

#include "urbanst/dataset.hpp"
#include "urbanst/errors.hpp"
#include "urbanst/random.hpp"

namespace urbanst {

inline constexpr double kPointMissingRatio = 0.25;
inline constexpr double kBlockDropRate = 0.05;
inline constexpr std::size_t kBlockMinLength = 4;
inline constexpr std::size_t kBlockMaxLength = 12;

// Each entry independently missing with probability `ratio`.
inline ObservationMask point_missing_mask(std::size_t nodes, std::size_t steps, std::size_t channels, double ratio,
                                          Rng& rng) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw ConfigError("point missing ratio must lie in [0, 1]");
    }
    auto mask = ObservationMask::filled(nodes, steps, channels, true);
    for (auto& bit : mask.bits) {
        bit = rng.bernoulli(ratio) ? 0 : 1;
    }
    return mask;
}

inline ObservationMask point_missing_mask(std::size_t nodes, std::size_t steps, std::size_t channels, double ratio,
                                          std::uint64_t seed) {
    Rng rng(seed);
    return point_missing_mask(nodes, steps, channels, ratio, rng);
}

// Outages start per sensor and step with probability
// drop_rate / E[length] and cover a uniform length in [min_len, max_len]
// across every channel; overlapping outages merge.
inline ObservationMask block_missing_mask(std::size_t nodes, std::size_t steps, std::size_t channels,
                                          double drop_rate, std::size_t min_len, std::size_t max_len, Rng& rng) {
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
        throw ConfigError("block drop rate must lie in [0, 1)");
    }
    if (min_len < 1 || max_len < min_len) {
        throw ConfigError("block length range [" + std::to_string(min_len) + ", " + std::to_string(max_len) +
                          "] is invalid");
    }
    const double expected_len = 0.5 * static_cast<double>(min_len + max_len);
    const double p_start = drop_rate / expected_len;
    auto mask = ObservationMask::filled(nodes, steps, channels, true);
    for (std::size_t n = 0; n < nodes; ++n) {
        for (std::size_t t = 0; t < steps; ++t) {
            if (!rng.bernoulli(p_start)) {
                continue;
            }
            const auto len = static_cast<std::size_t>(
                rng.integer(static_cast<long long>(min_len), static_cast<long long>(max_len)));
            for (std::size_t u = t; u < std::min(steps, t + len); ++u) {
                for (std::size_t c = 0; c < channels; ++c) {
                    mask.set(n, u, c, false);
                }
            }
        }
    }
    return mask;
}

inline ObservationMask block_missing_mask(std::size_t nodes, std::size_t steps, std::size_t channels,
                                          double drop_rate, std::uint64_t seed,
                                          std::size_t min_len = kBlockMinLength,
                                          std::size_t max_len = kBlockMaxLength) {
    Rng rng(seed);
    return block_missing_mask(nodes, steps, channels, drop_rate, min_len, max_len, rng);
}

inline double missing_fraction(const ObservationMask& mask) {
    if (mask.size() == 0) {
        return 0.0;
    }
    return 1.0 - static_cast<double>(mask.count_observed()) / static_cast<double>(mask.size());
}

} // namespace urbanst
