#pragma once

// Reversible instance normalization over patch batches. Statistics are taken
// per (patch, slot, channel) over the context steps only; every step of the
// slot, context or target, is normalized with those same statistics.

#include <cmath>
#include <cstdint>
#include <vector>

#include "urbanst/errors.hpp"
#include "urbanst/tokenizer.hpp"

namespace urbanst {

inline constexpr double kRevinEps = 1e-5;

struct RevinStats {
    std::size_t batch = 0;
    std::size_t slots = 0;
    std::size_t channels = 0;
    std::vector<double> mean; // [batch][slot][channel]
    std::vector<double> std;
    std::vector<std::size_t> context_count;
    double eps = kRevinEps;

    std::size_t index(std::size_t b, std::size_t s, std::size_t c) const { return (b * slots + s) * channels + c; }
    double scale(std::size_t i) const { return std[i] + eps; }
};

// `context` has the batch data layout; nonzero marks a context entry. With
// `strict`, a valid slot/channel without context is a RevinError; otherwise
// it falls back to mean 0, std 1.
inline RevinStats revin_stats(const PatchBatch& batch, const std::vector<std::uint8_t>& context, bool strict = true,
                              double eps = kRevinEps) {
    if (context.size() != batch.data.size()) {
        throw ShapeError("context mask does not match the batch");
    }
    RevinStats st{batch.batch,
                  batch.slots,
                  batch.channels,
                  std::vector<double>(batch.batch * batch.slots * batch.channels, 0.0),
                  std::vector<double>(batch.batch * batch.slots * batch.channels, 1.0),
                  std::vector<std::size_t>(batch.batch * batch.slots * batch.channels, 0),
                  eps};
    for (std::size_t b = 0; b < batch.batch; ++b) {
        for (std::size_t s = 0; s < batch.slots; ++s) {
            if (!batch.slot_valid(b, s)) {
                continue;
            }
            for (std::size_t c = 0; c < batch.channels; ++c) {
                double sum = 0.0;
                std::size_t n = 0;
                for (std::size_t t = 0; t < batch.steps; ++t) {
                    const auto i = batch.index(b, s, t, c);
                    if (context[i] != 0) {
                        sum += batch.data[i];
                        ++n;
                    }
                }
                const auto k = st.index(b, s, c);
                st.context_count[k] = n;
                if (n == 0) {
                    if (strict) {
                        throw RevinError("patch " + std::to_string(b) + " slot " + std::to_string(s) +
                                         " has no unmasked context");
                    }
                    continue;
                }
                const double mu = sum / static_cast<double>(n);
                double sq = 0.0;
                for (std::size_t t = 0; t < batch.steps; ++t) {
                    const auto i = batch.index(b, s, t, c);
                    if (context[i] != 0) {
                        sq += (batch.data[i] - mu) * (batch.data[i] - mu);
                    }
                }
                st.mean[k] = mu;
                st.std[k] = std::sqrt(sq / static_cast<double>(n));
            }
        }
    }
    return st;
}

// z = (x - mean) / (std + eps). Invalid slots come out as zeros.
inline std::pair<PatchBatch, RevinStats> revin_normalize(const PatchBatch& batch,
                                                         const std::vector<std::uint8_t>& context,
                                                         bool strict = true) {
    auto stats = revin_stats(batch, context, strict);
    PatchBatch z = batch;
    for (std::size_t b = 0; b < batch.batch; ++b) {
        for (std::size_t s = 0; s < batch.slots; ++s) {
            const bool valid = batch.slot_valid(b, s);
            for (std::size_t t = 0; t < batch.steps; ++t) {
                for (std::size_t c = 0; c < batch.channels; ++c) {
                    const auto i = batch.index(b, s, t, c);
                    const auto k = stats.index(b, s, c);
                    z.data[i] = valid ? (batch.data[i] - stats.mean[k]) / stats.scale(k) : 0.0;
                }
            }
        }
    }
    return {std::move(z), std::move(stats)};
}

// Exact inverse of revin_normalize, applied in place to a batch-shaped
// buffer.
template <class Range>
void revin_denormalize(Range& y, const RevinStats& stats, std::size_t steps) {
    for (std::size_t b = 0; b < stats.batch; ++b) {
        for (std::size_t s = 0; s < stats.slots; ++s) {
            for (std::size_t t = 0; t < steps; ++t) {
                for (std::size_t c = 0; c < stats.channels; ++c) {
                    const auto k = stats.index(b, s, c);
                    auto& v = y[((b * stats.slots + s) * steps + t) * stats.channels + c];
                    v = v * stats.scale(k) + stats.mean[k];
                }
            }
        }
    }
}

// Gradient of sum(dz * z) with respect to the raw batch values, including
// the paths through the context mean and standard deviation.
inline std::vector<double> revin_normalize_backward(const PatchBatch& batch, const std::vector<std::uint8_t>& context,
                                                    const RevinStats& stats, const std::vector<double>& dz) {
    std::vector<double> dx(batch.data.size(), 0.0);
    for (std::size_t b = 0; b < batch.batch; ++b) {
        for (std::size_t s = 0; s < batch.slots; ++s) {
            if (!batch.slot_valid(b, s)) {
                continue;
            }
            for (std::size_t c = 0; c < batch.channels; ++c) {
                const auto k = stats.index(b, s, c);
                const double mu = stats.mean[k];
                const double sigma = stats.std[k];
                const double scale = stats.scale(k);
                const auto n = static_cast<double>(stats.context_count[k]);
                double sum_dz = 0.0;
                double sum_dz_centered = 0.0;
                for (std::size_t t = 0; t < batch.steps; ++t) {
                    const auto i = batch.index(b, s, t, c);
                    dx[i] = dz[i] / scale;
                    sum_dz += dz[i];
                    sum_dz_centered += dz[i] * (batch.data[i] - mu);
                }
                if (n == 0.0) {
                    continue;
                }
                for (std::size_t t = 0; t < batch.steps; ++t) {
                    const auto i = batch.index(b, s, t, c);
                    if (context[i] == 0) {
                        continue;
                    }
                    dx[i] -= sum_dz / (scale * n);
                    if (sigma > 0.0) {
                        dx[i] -= sum_dz_centered * (batch.data[i] - mu) / (scale * scale * n * sigma);
                    }
                }
            }
        }
    }
    return dx;
}

} // namespace urbanst
