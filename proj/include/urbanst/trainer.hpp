#pragma once

// Chronological splits, masked-objective batch sampling, Adam pre-training
// with early stopping, and few-shot fine-tuning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "urbanst/dataset.hpp"
#include "urbanst/errors.hpp"
#include "urbanst/kv_text.hpp"
#include "urbanst/masks.hpp"
#include "urbanst/model.hpp"
#include "urbanst/random.hpp"
#include "urbanst/tokenizer.hpp"

namespace urbanst {

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct StepRange {
    std::size_t begin = 0;
    std::size_t end = 0; // exclusive

    std::size_t size() const { return end - begin; }
    bool contains(std::size_t t) const { return t >= begin && t < end; }
    friend bool operator==(const StepRange&, const StepRange&) = default;
};

struct SplitIndex {
    StepRange train;
    StepRange val;
    StepRange test;
};

// 6:2:2 with floor boundaries.
inline SplitIndex chronological_split(std::size_t steps) {
    if (steps < 5) {
        throw SplitError("a series of " + std::to_string(steps) + " steps is too short to split (need 5)");
    }
    const std::size_t a = steps * 6 / 10;
    const std::size_t b = steps * 8 / 10;
    SplitIndex s{{0, a}, {a, b}, {b, steps}};
    if (s.train.size() == 0 || s.val.size() == 0 || s.test.size() == 0) {
        throw SplitError("a series of " + std::to_string(steps) + " steps leaves an empty split");
    }
    return s;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Objective : std::uint8_t { future_mask, point_mask, block_mask };

inline const char* to_string(Objective o) {
    switch (o) {
    case Objective::future_mask:
        return "future_mask";
    case Objective::point_mask:
        return "point_mask";
    case Objective::block_mask:
        return "block_mask";
    }
    return "?";
}

struct ObjectiveMix {
    double future = 0.6;
    double point = 0.2;
    double block = 0.2;
};

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 8;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t patience = 10;
    std::uint64_t seed = 0;
    ObjectiveMix objective_mix;
    std::vector<std::size_t> context_steps{12, 24}; // T_h choices for future masks
    double point_ratio = kPointMissingRatio;
    double block_drop = kBlockDropRate;
    std::size_t steps_per_epoch = 0; // 0 = one pass over the sampling range
    std::size_t val_context = 12;
    std::size_t val_max_patches = 0; // 0 = every validation window

    void validate() const {
        if (epochs == 0 || batch_size == 0 || patience == 0) {
            throw ConfigError("epochs, batch_size and patience must be positive");
        }
        if (learning_rate < 0.0) {
            throw ConfigError("learning_rate must not be negative");
        }
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0)) {
            throw ConfigError("Adam hyper-parameters out of range");
        }
        const auto& m = objective_mix;
        if (m.future < 0.0 || m.point < 0.0 || m.block < 0.0 || std::abs(m.future + m.point + m.block - 1.0) > 1e-9) {
            throw ConfigError("objective_mix weights must be non-negative and sum to 1");
        }
        if (context_steps.empty() || std::find(context_steps.begin(), context_steps.end(), 0u) != context_steps.end()) {
            throw ConfigError("context_steps needs at least one positive entry");
        }
        if (val_context == 0) {
            throw ConfigError("val_context must be positive");
        }
    }

    // Keys absent from `t` keep their defaults; unrelated keys are ignored so
    // one file can hold both model and training settings.
    static TrainConfig from_text(const KeyValueText& t) {
        TrainConfig c;
        c.epochs = t.get_or("epochs", c.epochs);
        c.batch_size = t.get_or("batch_size", c.batch_size);
        c.learning_rate = t.get_or("learning_rate", c.learning_rate);
        c.adam_beta1 = t.get_or("adam_beta1", c.adam_beta1);
        c.adam_beta2 = t.get_or("adam_beta2", c.adam_beta2);
        c.adam_eps = t.get_or("adam_eps", c.adam_eps);
        c.patience = t.get_or("patience", c.patience);
        c.seed = t.get_or("seed", c.seed);
        c.objective_mix.future = t.get_or("mix_future", c.objective_mix.future);
        c.objective_mix.point = t.get_or("mix_point", c.objective_mix.point);
        c.objective_mix.block = t.get_or("mix_block", c.objective_mix.block);
        if (t.contains("context_steps")) {
            c.context_steps.clear();
            std::istringstream in(t.raw("context_steps"));
            for (std::string item; std::getline(in, item, ',');) {
                c.context_steps.push_back(KeyValueText::convert<std::size_t>(std::string(KeyValueText::trim(item)),
                                                                             "context_steps"));
            }
        }
        c.point_ratio = t.get_or("point_ratio", c.point_ratio);
        c.block_drop = t.get_or("block_drop", c.block_drop);
        c.steps_per_epoch = t.get_or("steps_per_epoch", c.steps_per_epoch);
        c.val_context = t.get_or("val_context", c.val_context);
        c.val_max_patches = t.get_or("val_max_patches", c.val_max_patches);
        c.validate();
        return c;
    }

    KeyValueText to_text() const {
        KeyValueText t;
        t.add("epochs", epochs);
        t.add("batch_size", batch_size);
        t.add("learning_rate", learning_rate);
        t.add("adam_beta1", adam_beta1);
        t.add("adam_beta2", adam_beta2);
        t.add("adam_eps", adam_eps);
        t.add("patience", patience);
        t.add("seed", seed);
        t.add("mix_future", objective_mix.future);
        t.add("mix_point", objective_mix.point);
        t.add("mix_block", objective_mix.block);
        std::string ctx;
        for (std::size_t i = 0; i < context_steps.size(); ++i) {
            ctx += (i ? "," : "") + std::to_string(context_steps[i]);
        }
        t.add("context_steps", ctx);
        t.add("point_ratio", point_ratio);
        t.add("block_drop", block_drop);
        t.add("steps_per_epoch", steps_per_epoch);
        t.add("val_context", val_context);
        t.add("val_max_patches", val_max_patches);
        return t;
    }
};

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

// One dataset with its cluster plan and the step range windows may come from.
struct TrainSource {
    const Dataset* data = nullptr;
    const ClusterPlan* plan = nullptr;
    SplitIndex split;
    StepRange sample; // subset of split.train
};

inline TrainSource make_source(const Dataset& data, const ClusterPlan& plan, double fraction = 1.0) {
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw ConfigError("training fraction must lie in (0, 1]");
    }
    TrainSource s{&data, &plan, chronological_split(data.x.steps), {}};
    const auto len = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(s.split.train.size()) - 1e-9));
    s.sample = {s.split.train.begin, s.split.train.begin + std::max<std::size_t>(len, 1)};
    return s;
}

struct TrainingBatch {
    PatchBatch batch;
    std::vector<std::uint8_t> objective;
    std::vector<Objective> kinds; // per patch
};

namespace detail {

inline Objective draw_objective(const ObjectiveMix& mix, Rng& rng) {
    const double u = rng.uniform();
    if (u < mix.future) {
        return Objective::future_mask;
    }
    if (u < mix.future + mix.point) {
        return Objective::point_mask;
    }
    return mix.block > 0.0 ? Objective::block_mask : (mix.point > 0.0 ? Objective::point_mask : Objective::future_mask);
}

inline void mark_future(const PatchBatch& batch, std::size_t b, std::size_t context, std::vector<std::uint8_t>& obj) {
    for (std::size_t s = 0; s < batch.slots; ++s) {
        for (std::size_t t = context; t < batch.steps; ++t) {
            for (std::size_t c = 0; c < batch.channels; ++c) {
                obj[batch.index(b, s, t, c)] = 1;
            }
        }
    }
}

} // namespace detail

// Draws `count` patches with uniform window starts inside source.sample and
// uniform clusters, and one objective per patch from the mix.
inline TrainingBatch sample_training_batch(const TrainSource& src, const ModelConfig& model, const TrainConfig& cfg,
                                           std::size_t count, Rng& rng) {
    const std::size_t tp = model.patch_steps;
    if (src.sample.size() < tp) {
        throw WindowError("sampling range of " + std::to_string(src.sample.size()) +
                          " steps is shorter than the patch length " + std::to_string(tp));
    }
    for (auto th : cfg.context_steps) {
        if (th >= tp) {
            throw WindowError("context of " + std::to_string(th) + " steps leaves no future in a " +
                              std::to_string(tp) + "-step patch");
        }
    }
    TrainingBatch out{PatchBatch(count, model.patch_slots, tp, model.channels), {}, {}};
    auto& batch = out.batch;
    out.objective.assign(batch.data.size(), 0);
    const std::size_t positions = src.sample.size() - tp + 1;
    for (std::size_t b = 0; b < count; ++b) {
        const std::size_t cluster = rng.index(src.plan->clusters.size());
        const std::size_t start = src.sample.begin + rng.index(positions);
        gather_patch(*src.data, *src.plan, cluster, start, batch, b);
        const Objective kind = detail::draw_objective(cfg.objective_mix, rng);
        out.kinds.push_back(kind);
        switch (kind) {
        case Objective::future_mask:
            detail::mark_future(batch, b, cfg.context_steps[rng.index(cfg.context_steps.size())], out.objective);
            break;
        case Objective::point_mask: {
            const auto m = point_missing_mask(batch.slots, tp, batch.channels, cfg.point_ratio, rng);
            for (std::size_t i = 0; i < m.size(); ++i) {
                out.objective[b * batch.patch_size() + i] = m.bits[i] ? 0 : 1;
            }
            break;
        }
        case Objective::block_mask: {
            const auto m = block_missing_mask(batch.slots, tp, batch.channels, cfg.block_drop, kBlockMinLength,
                                              kBlockMaxLength, rng);
            for (std::size_t i = 0; i < m.size(); ++i) {
                out.objective[b * batch.patch_size() + i] = m.bits[i] ? 0 : 1;
            }
            break;
        }
        }
    }
    return out;
}

// Deterministic future-mask windows (stride T_p) over `range`, every
// cluster, in (window, cluster) order.
inline TrainingBatch validation_batch(const Dataset& data, const ClusterPlan& plan, StepRange range,
                                      const ModelConfig& model, std::size_t context, std::size_t max_patches = 0) {
    if (range.size() < model.patch_steps) {
        throw WindowError("validation range of " + std::to_string(range.size()) +
                          " steps is shorter than the patch length");
    }
    const auto starts = window_starts(range.size(), model.patch_steps, model.patch_steps);
    std::size_t total = starts.size() * plan.clusters.size();
    if (max_patches > 0) {
        total = std::min(total, max_patches);
    }
    TrainingBatch out{PatchBatch(total, model.patch_slots, model.patch_steps, model.channels), {}, {}};
    out.objective.assign(out.batch.data.size(), 0);
    std::size_t b = 0;
    for (std::size_t w = 0; w < starts.size() && b < total; ++w) {
        for (std::size_t k = 0; k < plan.clusters.size() && b < total; ++k, ++b) {
            gather_patch(data, plan, k, range.begin + starts[w], out.batch, b);
            detail::mark_future(out.batch, b, context, out.objective);
            out.kinds.push_back(Objective::future_mask);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <class T>
class Adam {
public:
    Adam(const ModelState<T>& model, double lr, double beta1, double beta2, double eps)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : model.params) {
            m_.emplace_back(p.value.size(), 0.0);
            v_.emplace_back(p.value.size(), 0.0);
        }
    }

    std::size_t steps() const { return t_; }

    void step(ModelState<T>& model) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            auto w = model.params[i].value.values();
            const auto g = model.params[i].grad.values();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = static_cast<double>(g[j]);
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
                const double update = lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
                w[j] = static_cast<T>(static_cast<double>(w[j]) - update);
            }
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochRecord {
    std::size_t epoch = 0; // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    std::size_t steps = 0; // optimizer steps taken so far
};

template <class T>
struct TrainResult {
    ModelState<T> model; // best-validation parameters
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    bool stopped_early = false;
};

// Mean masked MAE over each source's validation windows, weighted by the
// number of targets.
template <class T>
double validation_loss(ModelState<T>& model, const std::vector<TrainSource>& sources, const TrainConfig& cfg) {
    double total = 0.0;
    std::size_t targets = 0;
    for (const auto& src : sources) {
        const auto vb =
            validation_batch(*src.data, *src.plan, src.split.val, model.config, cfg.val_context, cfg.val_max_patches);
        for (std::size_t b0 = 0; b0 < vb.batch.batch; b0 += cfg.batch_size) {
            TrainingBatch chunk{PatchBatch(), {}, {}};
            const std::size_t nb = std::min(cfg.batch_size, vb.batch.batch - b0);
            chunk.batch = PatchBatch(nb, vb.batch.slots, vb.batch.steps, vb.batch.channels);
            const std::size_t ps = vb.batch.patch_size();
            std::copy_n(vb.batch.data.begin() + static_cast<std::ptrdiff_t>(b0 * ps), nb * ps, chunk.batch.data.begin());
            std::copy_n(vb.batch.value_mask.begin() + static_cast<std::ptrdiff_t>(b0 * ps), nb * ps,
                        chunk.batch.value_mask.begin());
            std::copy_n(vb.batch.slot_mask.begin() + static_cast<std::ptrdiff_t>(b0 * vb.batch.slots),
                        nb * vb.batch.slots, chunk.batch.slot_mask.begin());
            chunk.objective.assign(vb.objective.begin() + static_cast<std::ptrdiff_t>(b0 * ps),
                                   vb.objective.begin() + static_cast<std::ptrdiff_t>((b0 + nb) * ps));
            const auto l = masked_mae(model, chunk.batch, chunk.objective, false);
            total += static_cast<double>(l.loss) * static_cast<double>(l.targets);
            targets += l.targets;
        }
    }
    return targets == 0 ? 0.0 : total / static_cast<double>(targets);
}

inline std::size_t auto_steps_per_epoch(const TrainSource& src, const ModelConfig& model, const TrainConfig& cfg) {
    if (cfg.steps_per_epoch > 0) {
        return cfg.steps_per_epoch;
    }
    const std::size_t windows = std::max<std::size_t>(1, src.sample.size() / model.patch_steps);
    const std::size_t patches = windows * src.plan->clusters.size();
    return std::max<std::size_t>(1, (patches + cfg.batch_size - 1) / cfg.batch_size);
}

// Pre-trains on several sources. Each epoch visits the sources in a freshly
// shuffled order and takes that source's steps on its own batches.
template <class T>
TrainResult<T> train_corpus(const ModelState<T>& initial, const std::vector<TrainSource>& sources,
                            const TrainConfig& cfg) {
    cfg.validate();
    if (sources.empty()) {
        throw EmptyDatasetError("training needs at least one dataset");
    }
    for (const auto& src : sources) {
        if (src.plan->capacity != initial.config.patch_slots) {
            throw ConfigError("cluster capacity does not match model S_p");
        }
        if (src.data->x.channels != initial.config.channels) {
            throw ShapeError("dataset channels do not match the model");
        }
    }
    TrainResult<T> result{initial, {}, 0, std::numeric_limits<double>::infinity(), false};
    ModelState<T> model = initial;
    Adam<T> opt(model, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    Rng rng(cfg.seed);
    Rng noise = rng.fork(0x6e6f697365);
    std::vector<std::size_t> order(sources.size());
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = i;
        }
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[rng.index(i)]);
        }
        double loss_sum = 0.0;
        std::size_t loss_batches = 0;
        for (std::size_t si : order) {
            const auto& src = sources[si];
            const std::size_t steps = auto_steps_per_epoch(src, model.config, cfg);
            for (std::size_t k = 0; k < steps; ++k) {
                const auto tb = sample_training_batch(src, model.config, cfg, cfg.batch_size, rng);
                model.zero_grad();
                const auto l = masked_mae(model, tb.batch, tb.objective, true, &noise);
                const double loss = static_cast<double>(l.loss);
                if (!std::isfinite(loss)) {
                    throw DivergenceError("non-finite training loss at step " + std::to_string(opt.steps() + 1));
                }
                opt.step(model);
                loss_sum += loss;
                ++loss_batches;
            }
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_batches ? loss_sum / static_cast<double>(loss_batches) : 0.0;
        rec.val_loss = validation_loss(model, sources, cfg);
        rec.steps = opt.steps();
        if (!std::isfinite(rec.val_loss)) {
            throw DivergenceError("non-finite validation loss after step " + std::to_string(opt.steps()));
        }
        result.history.push_back(rec);
        if (rec.val_loss < result.best_val_loss) {
            result.best_val_loss = rec.val_loss;
            result.best_epoch = epoch;
            result.model = model;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            result.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    return result;
}

template <class T>
TrainResult<T> train(const ModelState<T>& initial, const Dataset& data, const ClusterPlan& plan,
                     const TrainConfig& cfg) {
    return train_corpus(initial, {make_source(data, plan)}, cfg);
}

inline constexpr double kFewShotFraction = 0.10;
inline constexpr std::size_t kFineTuneEpochs = 10;

// Fine-tunes on the first ceil(fraction * train_len) steps of the train
// range for a fixed 10 epochs; validation still uses the full val range.
template <class T>
TrainResult<T> finetune_fewshot(const ModelState<T>& model, const Dataset& data, const ClusterPlan& plan,
                                double fraction, TrainConfig cfg) {
    const auto src = make_source(data, plan, fraction);
    if (src.sample.size() < model.config.patch_steps) {
        throw WindowError("few-shot range of " + std::to_string(src.sample.size()) +
                          " steps is shorter than the patch length " + std::to_string(model.config.patch_steps));
    }
    cfg.epochs = kFineTuneEpochs;
    return train_corpus(model, {src}, cfg);
}

inline void write_loss_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& file) {
    std::ofstream out(file);
    if (!out) {
        throw IoError("cannot write " + file.string());
    }
    out << "epoch,train_loss,val_loss\n";
    out.precision(9);
    for (const auto& r : history) {
        out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << '\n';
    }
}

} // namespace urbanst
