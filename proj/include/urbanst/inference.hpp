#pragma once

// Forecasting and imputation with a trained model. Both are the same masked
// reconstruction: forecasting masks the future steps of each patch,
// imputation masks the unobserved entries.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "urbanst/dataset.hpp"
#include "urbanst/errors.hpp"
#include "urbanst/model.hpp"
#include "urbanst/tokenizer.hpp"

namespace urbanst {

inline constexpr std::size_t kInferenceChunk = 64; // patches per forward call

namespace detail {

// Accumulates per-entry reconstructions from overlapping patches.
struct Accumulator {
    std::size_t nodes = 0;
    std::size_t steps = 0;
    std::size_t channels = 0;
    std::vector<double> sum;
    std::vector<std::uint32_t> count;

    Accumulator(std::size_t n, std::size_t t, std::size_t c)
        : nodes(n), steps(t), channels(c), sum(n * t * c, 0.0), count(n * t * c, 0) {}

    std::size_t offset(std::size_t n, std::size_t t, std::size_t c) const { return (n * steps + t) * channels + c; }

    void add(std::size_t n, std::size_t t, std::size_t c, double v) {
        sum[offset(n, t, c)] += v;
        ++count[offset(n, t, c)];
    }
    bool has(std::size_t n, std::size_t t, std::size_t c) const { return count[offset(n, t, c)] > 0; }
    double mean(std::size_t n, std::size_t t, std::size_t c) const {
        return sum[offset(n, t, c)] / static_cast<double>(count[offset(n, t, c)]);
    }
};

// Runs every (cluster, start) patch of `data` through the model in chunks;
// `objective_of` marks the masked entries of a gathered batch and
// `consume` receives each valid slot entry of the reconstruction.
template <class T, class ObjectiveFn, class ConsumeFn>
void run_patches(const ModelState<T>& model, const Dataset& data, const ClusterPlan& plan,
                 const std::vector<std::size_t>& starts, ObjectiveFn objective_of, ConsumeFn consume) {
    const auto& cfg = model.config;
    std::vector<std::pair<std::size_t, std::size_t>> jobs;
    for (std::size_t start : starts) {
        for (std::size_t k = 0; k < plan.clusters.size(); ++k) {
            jobs.emplace_back(k, start);
        }
    }
    for (std::size_t j0 = 0; j0 < jobs.size(); j0 += kInferenceChunk) {
        const std::size_t nb = std::min(kInferenceChunk, jobs.size() - j0);
        PatchBatch batch(nb, cfg.patch_slots, cfg.patch_steps, cfg.channels);
        for (std::size_t b = 0; b < nb; ++b) {
            gather_patch(data, plan, jobs[j0 + b].first, jobs[j0 + b].second, batch, b);
        }
        const std::vector<std::uint8_t> objective = objective_of(batch);
        const auto recon = forward(model, batch, objective);
        for (std::size_t b = 0; b < nb; ++b) {
            const auto& slots = plan.clusters[batch.origin[b].cluster];
            for (std::size_t s = 0; s < batch.slots; ++s) {
                if (!batch.slot_valid(b, s)) {
                    continue;
                }
                const auto node = static_cast<std::size_t>(slots[s].node);
                for (std::size_t t = 0; t < batch.steps; ++t) {
                    for (std::size_t c = 0; c < batch.channels; ++c) {
                        const auto i = batch.index(b, s, t, c);
                        consume(node, batch.origin[b].start + t, c, recon[i], objective[i] != 0);
                    }
                }
            }
        }
    }
}

inline void check_plan(const ModelConfig& cfg, const ClusterPlan& plan, const SpatioTemporalTensor& x) {
    if (plan.capacity != cfg.patch_slots) {
        throw ConfigError("cluster capacity " + std::to_string(plan.capacity) + " does not match model S_p " +
                          std::to_string(cfg.patch_slots));
    }
    if (x.channels != cfg.channels) {
        throw ShapeError("dataset has " + std::to_string(x.channels) + " channels, model expects " +
                         std::to_string(cfg.channels));
    }
    for (const auto& cluster : plan.clusters) {
        for (const auto& slot : cluster) {
            if (slot.valid && static_cast<std::size_t>(slot.node) >= x.nodes) {
                throw ShapeError("cluster plan references node " + std::to_string(slot.node) + " beyond the dataset");
            }
        }
    }
}

} // namespace detail

// Predicts the T_f steps that follow `history` ([N x T_h x C] plus mask).
// Each pass reconstructs up to T_p - T_h masked future steps; longer
// horizons roll forward, feeding predictions back as context. A node in
// several clusters gets the mean of its reconstructions.
template <class T>
SpatioTemporalTensor forecast(const Dataset& history, std::size_t horizon, const ModelState<T>& model,
                              const ClusterPlan& plan) {
    const auto& cfg = model.config;
    const std::size_t th = history.x.steps;
    if (th < 1) {
        throw WindowError("forecast needs at least one history step");
    }
    if (th >= cfg.patch_steps) {
        throw WindowError("history of " + std::to_string(th) + " steps leaves no room in a " +
                          std::to_string(cfg.patch_steps) + "-step patch");
    }
    detail::check_plan(cfg, plan, history.x);
    const auto& shape = history.x;
    SpatioTemporalTensor out = shape.with_steps(horizon);
    out.start_epoch_s = shape.start_epoch_s + static_cast<std::int64_t>(th) * shape.dt_minutes * 60;
    const std::size_t per_pass = cfg.patch_steps - th;

    Dataset context = history;
    std::size_t produced = 0;
    while (produced < horizon) {
        const std::size_t step = std::min(per_pass, horizon - produced);
        Dataset window{shape.with_steps(cfg.patch_steps),
                       ObservationMask::filled(shape.nodes, cfg.patch_steps, shape.channels, false)};
        for (std::size_t n = 0; n < shape.nodes; ++n) {
            for (std::size_t t = 0; t < th; ++t) {
                for (std::size_t c = 0; c < shape.channels; ++c) {
                    window.x.at(n, t, c) = context.x.at(n, t, c);
                    window.mask.set(n, t, c, context.mask.observed(n, t, c));
                }
            }
        }
        detail::Accumulator acc(shape.nodes, cfg.patch_steps, shape.channels);
        detail::run_patches(
            model, window, plan, {0},
            [&](const PatchBatch& batch) {
                std::vector<std::uint8_t> objective(batch.data.size(), 0);
                for (std::size_t i = 0; i < objective.size(); ++i) {
                    objective[i] = (i / batch.channels) % batch.steps >= th ? 1 : 0;
                }
                return objective;
            },
            [&](std::size_t n, std::size_t t, std::size_t c, double v, bool masked) {
                if (masked) {
                    acc.add(n, t, c, v);
                }
            });
        for (std::size_t n = 0; n < shape.nodes; ++n) {
            for (std::size_t k = 0; k < step; ++k) {
                for (std::size_t c = 0; c < shape.channels; ++c) {
                    out.at(n, produced + k, c) = acc.has(n, th + k, c) ? acc.mean(n, th + k, c) : 0.0;
                }
            }
        }
        produced += step;
        if (produced < horizon) {
            // New context = last T_h steps of (old context ++ this pass).
            Dataset next{shape.with_steps(th), ObservationMask::filled(shape.nodes, th, shape.channels, true)};
            for (std::size_t n = 0; n < shape.nodes; ++n) {
                for (std::size_t t = 0; t < th; ++t) {
                    const std::size_t src = t + step; // index into old context ++ pass
                    for (std::size_t c = 0; c < shape.channels; ++c) {
                        if (src < th) {
                            next.x.at(n, t, c) = context.x.at(n, src, c);
                            next.mask.set(n, t, c, context.mask.observed(n, src, c));
                        } else {
                            next.x.at(n, t, c) = out.at(n, produced - step + (src - th), c);
                        }
                    }
                }
            }
            context = std::move(next);
        }
    }
    return out;
}

// Fills the unobserved entries of `data`. Windows of T_p steps tile the
// series with stride T_p plus one window aligned to the end; entries covered
// twice take the mean. Observed entries are returned unchanged.
template <class T>
SpatioTemporalTensor impute(const Dataset& data, const ModelState<T>& model, const ClusterPlan& plan) {
    const auto& cfg = model.config;
    detail::check_plan(cfg, plan, data.x);
    auto starts = window_starts(data.x.steps, cfg.patch_steps, cfg.patch_steps);
    const std::size_t tail = data.x.steps - cfg.patch_steps;
    if (starts.back() != tail) {
        starts.push_back(tail);
    }
    detail::Accumulator acc(data.x.nodes, data.x.steps, data.x.channels);
    detail::run_patches(
        model, data, plan, starts,
        [](const PatchBatch& batch) {
            std::vector<std::uint8_t> objective(batch.data.size(), 0);
            for (std::size_t i = 0; i < objective.size(); ++i) {
                objective[i] = batch.value_mask[i] == 0 ? 1 : 0;
            }
            return objective;
        },
        [&](std::size_t n, std::size_t t, std::size_t c, double v, bool masked) {
            if (masked) {
                acc.add(n, t, c, v);
            }
        });
    SpatioTemporalTensor out = data.x;
    for (std::size_t n = 0; n < out.nodes; ++n) {
        for (std::size_t t = 0; t < out.steps; ++t) {
            for (std::size_t c = 0; c < out.channels; ++c) {
                if (!data.mask.observed(n, t, c)) {
                    out.at(n, t, c) = acc.has(n, t, c) ? acc.mean(n, t, c) : 0.0;
                }
            }
        }
    }
    return out;
}

} // namespace urbanst
