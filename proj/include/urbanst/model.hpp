#pragma once

// Factorized spatio-temporal transformer. A patch [S_p slots x T_p steps x C]
// is embedded per entry, passed through alternating temporal blocks
// (attention along time within each slot, rotary positions = step index) and
// spatial blocks (attention across slots at each step, rotary positions =
// slot order), and projected back to C channels. Reversible instance
// normalization wraps the backbone; masked entries enter as `mask_value`.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "urbanst/errors.hpp"
#include "urbanst/kv_text.hpp"
#include "urbanst/layers.hpp"
#include "urbanst/random.hpp"
#include "urbanst/revin.hpp"
#include "urbanst/rope.hpp"
#include "urbanst/tensor.hpp"
#include "urbanst/tokenizer.hpp"

namespace urbanst {

enum class BlockAxis { temporal, spatial };

struct ModelConfig {
    std::size_t d_model = 128;
    std::size_t n_heads = 8;
    std::size_t n_temporal_layers = 4;
    std::size_t n_spatial_layers = 4;
    std::size_t ffn_mult = 4;
    double rope_base = 10000.0;
    std::size_t patch_slots = 16; // S_p
    std::size_t patch_steps = 48; // T_p
    std::size_t channels = 1;
    double mask_value = 0.0;
    bool temporal_rope = true;
    bool spatial_rope = true;
    double context_noise_std = 0.0;

    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t ffn_dim() const { return d_model * ffn_mult; }

    void validate() const {
        if (d_model == 0 || n_heads == 0 || ffn_mult == 0 || patch_slots == 0 || patch_steps == 0 || channels == 0) {
            throw ConfigError("model dimensions must be positive");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " +
                              std::to_string(n_heads) + " heads");
        }
        if (head_dim() % 2 != 0) {
            throw ConfigError("head dimension " + std::to_string(head_dim()) + " must be even for rotary encoding");
        }
        if (rope_base <= 0.0) {
            throw ConfigError("rope_base must be positive");
        }
    }

    // Temporal first, alternating while both kinds remain, then the rest.
    std::vector<BlockAxis> block_order() const {
        std::vector<BlockAxis> order;
        const std::size_t pairs = std::min(n_temporal_layers, n_spatial_layers);
        for (std::size_t i = 0; i < pairs; ++i) {
            order.push_back(BlockAxis::temporal);
            order.push_back(BlockAxis::spatial);
        }
        for (std::size_t i = pairs; i < n_temporal_layers; ++i) {
            order.push_back(BlockAxis::temporal);
        }
        for (std::size_t i = pairs; i < n_spatial_layers; ++i) {
            order.push_back(BlockAxis::spatial);
        }
        return order;
    }

    KeyValueText to_text() const {
        KeyValueText t;
        t.add("d_model", d_model);
        t.add("n_heads", n_heads);
        t.add("n_temporal_layers", n_temporal_layers);
        t.add("n_spatial_layers", n_spatial_layers);
        t.add("ffn_mult", ffn_mult);
        t.add("rope_base", rope_base);
        t.add("patch_slots", patch_slots);
        t.add("patch_steps", patch_steps);
        t.add("channels", channels);
        t.add("mask_value", mask_value);
        t.add("temporal_rope", std::string(temporal_rope ? "true" : "false"));
        t.add("spatial_rope", std::string(spatial_rope ? "true" : "false"));
        t.add("context_noise_std", context_noise_std);
        return t;
    }

    // Missing keys keep their defaults.
    static ModelConfig from_text(const KeyValueText& t) {
        ModelConfig c;
        c.d_model = t.get_or("d_model", c.d_model);
        c.n_heads = t.get_or("n_heads", c.n_heads);
        c.n_temporal_layers = t.get_or("n_temporal_layers", c.n_temporal_layers);
        c.n_spatial_layers = t.get_or("n_spatial_layers", c.n_spatial_layers);
        c.ffn_mult = t.get_or("ffn_mult", c.ffn_mult);
        c.rope_base = t.get_or("rope_base", c.rope_base);
        c.patch_slots = t.get_or("patch_slots", c.patch_slots);
        c.patch_steps = t.get_or("patch_steps", c.patch_steps);
        c.channels = t.get_or("channels", c.channels);
        c.mask_value = t.get_or("mask_value", c.mask_value);
        c.temporal_rope = t.get_or("temporal_rope", c.temporal_rope);
        c.spatial_rope = t.get_or("spatial_rope", c.spatial_rope);
        c.context_noise_std = t.get_or("context_noise_std", c.context_noise_std);
        c.validate();
        return c;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
class ModelState {
public:
    struct LinearIds {
        std::size_t weight = 0;
        std::size_t bias = 0;
    };
    struct NormIds {
        std::size_t gain = 0;
        std::size_t bias = 0;
    };
    struct BlockIds {
        BlockAxis axis = BlockAxis::temporal;
        NormIds attn_norm;
        LinearIds q, k, v, o;
        NormIds ffn_norm;
        LinearIds up, down;
    };

    ModelConfig config;
    std::vector<Parameter<T>> params;
    LinearIds input;
    std::vector<BlockIds> blocks;
    NormIds final_norm;
    LinearIds output;

    ModelState() = default;

    // Allocates every parameter; weights start at zero until initialize().
    explicit ModelState(const ModelConfig& cfg) : config(cfg) {
        config.validate();
        const std::size_t d = config.d_model;
        input = add_linear("input", config.channels, d);
        const auto order = config.block_order();
        for (std::size_t i = 0; i < order.size(); ++i) {
            const std::string p = "blocks." + std::to_string(i) + ".";
            BlockIds b;
            b.axis = order[i];
            b.attn_norm = add_norm(p + "attn_norm", d);
            b.q = add_linear(p + "attn.q", d, d);
            b.k = add_linear(p + "attn.k", d, d);
            b.v = add_linear(p + "attn.v", d, d);
            b.o = add_linear(p + "attn.o", d, d);
            b.ffn_norm = add_norm(p + "ffn_norm", d);
            b.up = add_linear(p + "ffn.up", d, config.ffn_dim());
            b.down = add_linear(p + "ffn.down", config.ffn_dim(), d);
            blocks.push_back(b);
        }
        final_norm = add_norm("final_norm", d);
        output = add_linear("output", d, config.channels);
        rebuild_rope();
    }

    // Scaled-uniform projections, zero attention/feed-forward output
    // projections, unit norm gains, zero biases.
    void initialize(std::uint64_t seed) {
        Rng rng(seed);
        for (auto& p : params) {
            p.value.fill(T{});
            p.zero_grad();
        }
        for (auto& n : all_norms()) {
            params[n.gain].value.fill(T(1));
        }
        auto glorot = [&](const LinearIds& ids) {
            auto& w = params[ids.weight].value;
            const double limit = std::sqrt(6.0 / static_cast<double>(w.dim(0) + w.dim(1)));
            for (auto& v : w.values()) {
                v = static_cast<T>(rng.uniform(-limit, limit));
            }
        };
        glorot(input);
        for (const auto& b : blocks) {
            glorot(b.q);
            glorot(b.k);
            glorot(b.v);
            glorot(b.up);
        }
        glorot(output);
    }

    static ModelState create(const ModelConfig& cfg, std::uint64_t seed) {
        ModelState m(cfg);
        m.initialize(seed);
        return m;
    }

    Parameter<T>& p(std::size_t id) { return params[id]; }
    const Parameter<T>& p(std::size_t id) const { return params[id]; }

    void zero_grad() {
        for (auto& p : params) {
            p.zero_grad();
        }
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params) {
            n += p.value.size();
        }
        return n;
    }

    const RopeTable<T>& temporal_rope() const { return temporal_rope_; }
    const RopeTable<T>& spatial_rope() const { return spatial_rope_; }

    template <class U>
    ModelState<U> cast() const {
        ModelState<U> out(config);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto dst = out.params[i].value.values();
            const auto src = params[i].value.values();
            for (std::size_t j = 0; j < src.size(); ++j) {
                dst[j] = static_cast<U>(src[j]);
            }
        }
        return out;
    }

    void rebuild_rope() {
        temporal_rope_ = RopeTable<T>(config.head_dim(), config.patch_steps, config.rope_base);
        spatial_rope_ = RopeTable<T>(config.head_dim(), config.patch_slots, config.rope_base);
    }

private:
    LinearIds add_linear(const std::string& name, std::size_t in, std::size_t out) {
        LinearIds ids{params.size(), params.size() + 1};
        params.emplace_back(name + ".weight", typename Tensor<T>::Shape{in, out});
        params.emplace_back(name + ".bias", typename Tensor<T>::Shape{1, out});
        return ids;
    }
    NormIds add_norm(const std::string& name, std::size_t d) {
        NormIds ids{params.size(), params.size() + 1};
        params.emplace_back(name + ".gain", typename Tensor<T>::Shape{1, d});
        params.emplace_back(name + ".bias", typename Tensor<T>::Shape{1, d});
        return ids;
    }
    std::vector<NormIds> all_norms() const {
        std::vector<NormIds> out{final_norm};
        for (const auto& b : blocks) {
            out.push_back(b.attn_norm);
            out.push_back(b.ffn_norm);
        }
        return out;
    }

    RopeTable<T> temporal_rope_;
    RopeTable<T> spatial_rope_;
};

// ---------------------------------------------------------------------------
// Per-patch backbone
// ---------------------------------------------------------------------------

template <class T>
struct AttentionCache {
    layers::NormCache<T> norm;
    Matrix<T> normed, q, k, v, qr, kr, heads;
    std::vector<Matrix<T>> probs; // [group * n_heads + head]
};

template <class T>
struct FeedForwardCache {
    layers::NormCache<T> norm;
    Matrix<T> normed, pre, act;
};

template <class T>
struct PatchCache {
    Matrix<T> input;
    std::vector<AttentionCache<T>> attention;
    std::vector<FeedForwardCache<T>> feed_forward;
    layers::NormCache<T> final_norm;
    Matrix<T> final_normed;
};

// Rows are laid out slot-major: row = slot * steps + step.
struct PatchLayout {
    std::size_t slots = 0;
    std::size_t steps = 0;
    std::vector<std::uint8_t> slot_valid;

    std::size_t rows() const { return slots * steps; }
    std::size_t valid_slots() const {
        return static_cast<std::size_t>(std::count(slot_valid.begin(), slot_valid.end(), std::uint8_t{1}));
    }

    // Row groups that attend to each other along `axis`.
    std::vector<std::vector<Eigen::Index>> groups(BlockAxis axis) const {
        std::vector<std::vector<Eigen::Index>> out;
        if (axis == BlockAxis::temporal) {
            for (std::size_t s = 0; s < slots; ++s) {
                if (!slot_valid[s]) {
                    continue;
                }
                std::vector<Eigen::Index> rows(steps);
                for (std::size_t t = 0; t < steps; ++t) {
                    rows[t] = static_cast<Eigen::Index>(s * steps + t);
                }
                out.push_back(std::move(rows));
            }
        } else {
            if (valid_slots() == 0) {
                throw AttentionMaskError("spatial attention needs at least one valid slot");
            }
            for (std::size_t t = 0; t < steps; ++t) {
                std::vector<Eigen::Index> rows;
                for (std::size_t s = 0; s < slots; ++s) {
                    if (slot_valid[s]) {
                        rows.push_back(static_cast<Eigen::Index>(s * steps + t));
                    }
                }
                out.push_back(std::move(rows));
            }
        }
        return out;
    }

    std::vector<std::size_t> positions(BlockAxis axis) const {
        std::vector<std::size_t> pos(rows());
        for (std::size_t r = 0; r < rows(); ++r) {
            pos[r] = axis == BlockAxis::temporal ? r % steps : r / steps;
        }
        return pos;
    }

    template <class T>
    void zero_invalid(Matrix<T>& m) const {
        for (std::size_t s = 0; s < slots; ++s) {
            if (!slot_valid[s]) {
                m.middleRows(static_cast<Eigen::Index>(s * steps), static_cast<Eigen::Index>(steps)).setZero();
            }
        }
    }
};

namespace detail {

template <class T>
void rotate_heads(const ModelState<T>& model, BlockAxis axis, const PatchLayout& layout, Matrix<T>& m,
                  bool inverse) {
    const bool enabled = axis == BlockAxis::temporal ? model.config.temporal_rope : model.config.spatial_rope;
    if (!enabled) {
        return;
    }
    const auto& table = axis == BlockAxis::temporal ? model.temporal_rope() : model.spatial_rope();
    const auto pos = layout.positions(axis);
    const auto dh = static_cast<Eigen::Index>(model.config.head_dim());
    for (std::size_t h = 0; h < model.config.n_heads; ++h) {
        auto block = m.middleCols(static_cast<Eigen::Index>(h) * dh, dh);
        table.rotate(block, pos, inverse);
    }
}

} // namespace detail

// Pre-norm multi-head attention sublayer with residual: h + Attn(LN(h)).
template <class T>
Matrix<T> attention_forward(const ModelState<T>& model, std::size_t block, const PatchLayout& layout,
                            const Matrix<T>& h, AttentionCache<T>& c) {
    const auto& ids = model.blocks[block];
    const auto dh = static_cast<Eigen::Index>(model.config.head_dim());
    c.normed = layers::layer_norm(h, model.p(ids.attn_norm.gain), model.p(ids.attn_norm.bias), c.norm);
    c.q = layers::linear(c.normed, model.p(ids.q.weight), model.p(ids.q.bias));
    c.k = layers::linear(c.normed, model.p(ids.k.weight), model.p(ids.k.bias));
    c.v = layers::linear(c.normed, model.p(ids.v.weight), model.p(ids.v.bias));
    c.qr = c.q;
    c.kr = c.k;
    detail::rotate_heads(model, ids.axis, layout, c.qr, false);
    detail::rotate_heads(model, ids.axis, layout, c.kr, false);
    c.heads = Matrix<T>::Zero(h.rows(), h.cols());
    const auto groups = layout.groups(ids.axis);
    c.probs.assign(groups.size() * model.config.n_heads, Matrix<T>());
    Matrix<T> out;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto& rows = groups[g];
        for (std::size_t head = 0; head < model.config.n_heads; ++head) {
            const auto cols = Eigen::seqN(static_cast<Eigen::Index>(head) * dh, dh);
            const Matrix<T> qg = c.qr(rows, cols);
            const Matrix<T> kg = c.kr(rows, cols);
            const Matrix<T> vg = c.v(rows, cols);
            kernels::attention<T>(qg, kg, vg, nullptr, c.probs[g * model.config.n_heads + head], out);
            c.heads(rows, cols) = out;
        }
    }
    Matrix<T> a = layers::linear(c.heads, model.p(ids.o.weight), model.p(ids.o.bias));
    layout.zero_invalid(a);
    return h + a;
}

template <class T>
Matrix<T> attention_backward(ModelState<T>& model, std::size_t block, const PatchLayout& layout,
                             const AttentionCache<T>& c, const Matrix<T>& dout) {
    const auto& ids = model.blocks[block];
    const auto dh = static_cast<Eigen::Index>(model.config.head_dim());
    Matrix<T> da = dout;
    layout.zero_invalid(da);
    const Matrix<T> dheads = layers::linear_backward(c.heads, da, model.p(ids.o.weight), model.p(ids.o.bias));
    Matrix<T> dqr = Matrix<T>::Zero(dout.rows(), dout.cols());
    Matrix<T> dkr = Matrix<T>::Zero(dout.rows(), dout.cols());
    Matrix<T> dv = Matrix<T>::Zero(dout.rows(), dout.cols());
    const auto groups = layout.groups(ids.axis);
    Matrix<T> dq;
    Matrix<T> dk;
    Matrix<T> dvg;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto& rows = groups[g];
        for (std::size_t head = 0; head < model.config.n_heads; ++head) {
            const auto cols = Eigen::seqN(static_cast<Eigen::Index>(head) * dh, dh);
            const Matrix<T> qg = c.qr(rows, cols);
            const Matrix<T> kg = c.kr(rows, cols);
            const Matrix<T> vg = c.v(rows, cols);
            const Matrix<T> dog = dheads(rows, cols);
            kernels::attention_backward<T>(qg, kg, vg, c.probs[g * model.config.n_heads + head], dog, dq, dk, dvg);
            dqr(rows, cols) = dq;
            dkr(rows, cols) = dk;
            dv(rows, cols) = dvg;
        }
    }
    detail::rotate_heads(model, ids.axis, layout, dqr, true);
    detail::rotate_heads(model, ids.axis, layout, dkr, true);
    Matrix<T> dnormed = layers::linear_backward(c.normed, dqr, model.p(ids.q.weight), model.p(ids.q.bias));
    dnormed += layers::linear_backward(c.normed, dkr, model.p(ids.k.weight), model.p(ids.k.bias));
    dnormed += layers::linear_backward(c.normed, dv, model.p(ids.v.weight), model.p(ids.v.bias));
    return dout + layers::layer_norm_backward(c.norm, dnormed, model.p(ids.attn_norm.gain),
                                              model.p(ids.attn_norm.bias));
}

// Pre-norm feed-forward sublayer with residual: h + W2 gelu(W1 LN(h)).
template <class T>
Matrix<T> feed_forward(const ModelState<T>& model, std::size_t block, const PatchLayout& layout, const Matrix<T>& h,
                       FeedForwardCache<T>& c) {
    const auto& ids = model.blocks[block];
    c.normed = layers::layer_norm(h, model.p(ids.ffn_norm.gain), model.p(ids.ffn_norm.bias), c.norm);
    c.pre = layers::linear(c.normed, model.p(ids.up.weight), model.p(ids.up.bias));
    c.act = c.pre.unaryExpr([](T x) { return layers::gelu(x); });
    Matrix<T> f = layers::linear(c.act, model.p(ids.down.weight), model.p(ids.down.bias));
    layout.zero_invalid(f);
    return h + f;
}

template <class T>
Matrix<T> feed_forward_backward(ModelState<T>& model, std::size_t block, const PatchLayout& layout,
                                const FeedForwardCache<T>& c, const Matrix<T>& dout) {
    const auto& ids = model.blocks[block];
    Matrix<T> df = dout;
    layout.zero_invalid(df);
    const Matrix<T> dact = layers::linear_backward(c.act, df, model.p(ids.down.weight), model.p(ids.down.bias));
    const Matrix<T> dpre = dact.cwiseProduct(c.pre.unaryExpr([](T x) { return layers::gelu_grad(x); }));
    const Matrix<T> dnormed = layers::linear_backward(c.normed, dpre, model.p(ids.up.weight), model.p(ids.up.bias));
    return dout + layers::layer_norm_backward(c.norm, dnormed, model.p(ids.ffn_norm.gain), model.p(ids.ffn_norm.bias));
}

// One full block (attention then feed-forward) on hidden states [rows x D].
template <class T>
Matrix<T> block_forward(const ModelState<T>& model, std::size_t block, const PatchLayout& layout,
                        const Matrix<T>& h) {
    AttentionCache<T> ac;
    FeedForwardCache<T> fc;
    const Matrix<T> mid = attention_forward(model, block, layout, h, ac);
    return feed_forward(model, block, layout, mid, fc);
}

// Normalized, masked input [rows x C] -> normalized reconstruction [rows x C].
template <class T>
Matrix<T> patch_forward(const ModelState<T>& model, const PatchLayout& layout, const Matrix<T>& input,
                        PatchCache<T>& cache) {
    const std::size_t nb = model.blocks.size();
    cache.input = input;
    cache.attention.resize(nb);
    cache.feed_forward.resize(nb);
    Matrix<T> h = layers::linear(input, model.p(model.input.weight), model.p(model.input.bias));
    layout.zero_invalid(h);
    for (std::size_t b = 0; b < nb; ++b) {
        h = attention_forward(model, b, layout, h, cache.attention[b]);
        h = feed_forward(model, b, layout, h, cache.feed_forward[b]);
    }
    cache.final_normed =
        layers::layer_norm(h, model.p(model.final_norm.gain), model.p(model.final_norm.bias), cache.final_norm);
    Matrix<T> y = layers::linear(cache.final_normed, model.p(model.output.weight), model.p(model.output.bias));
    layout.zero_invalid(y);
    return y;
}

template <class T>
void patch_backward(ModelState<T>& model, const PatchLayout& layout, const PatchCache<T>& cache,
                    const Matrix<T>& dy_in) {
    Matrix<T> dy = dy_in;
    layout.zero_invalid(dy);
    const Matrix<T> dnormed =
        layers::linear_backward(cache.final_normed, dy, model.p(model.output.weight), model.p(model.output.bias));
    Matrix<T> dh = layers::layer_norm_backward(cache.final_norm, dnormed, model.p(model.final_norm.gain),
                                               model.p(model.final_norm.bias));
    for (std::size_t b = model.blocks.size(); b-- > 0;) {
        dh = feed_forward_backward(model, b, layout, cache.feed_forward[b], dh);
        dh = attention_backward(model, b, layout, cache.attention[b], dh);
    }
    layout.zero_invalid(dh);
    layers::linear_backward(cache.input, dh, model.p(model.input.weight), model.p(model.input.bias));
}

// ---------------------------------------------------------------------------
// Batch-level forward and masked reconstruction loss
// ---------------------------------------------------------------------------

namespace detail {

inline void check_batch(const ModelConfig& cfg, const PatchBatch& batch, const std::vector<std::uint8_t>& objective) {
    if (batch.slots != cfg.patch_slots || batch.steps != cfg.patch_steps || batch.channels != cfg.channels) {
        throw ShapeError("batch shape [" + std::to_string(batch.slots) + " x " + std::to_string(batch.steps) + " x " +
                         std::to_string(batch.channels) + "] does not match the model configuration");
    }
    if (objective.size() != batch.data.size()) {
        throw ShapeError("objective mask does not match the batch");
    }
}

// Context = observed, valid and not an objective target.
inline std::vector<std::uint8_t> context_mask(const PatchBatch& batch, const std::vector<std::uint8_t>& objective) {
    std::vector<std::uint8_t> ctx(batch.data.size(), 0);
    for (std::size_t b = 0; b < batch.batch; ++b) {
        for (std::size_t s = 0; s < batch.slots; ++s) {
            if (!batch.slot_valid(b, s)) {
                continue;
            }
            for (std::size_t t = 0; t < batch.steps; ++t) {
                for (std::size_t c = 0; c < batch.channels; ++c) {
                    const auto i = batch.index(b, s, t, c);
                    ctx[i] = batch.value_mask[i] != 0 && objective[i] == 0 ? 1 : 0;
                }
            }
        }
    }
    return ctx;
}

struct PreparedBatch {
    RevinStats stats;
    std::vector<double> model_input; // normalized, non-context set to mask_value
};

inline PreparedBatch prepare(const ModelConfig& cfg, const PatchBatch& batch, const std::vector<std::uint8_t>& objective,
                             Rng* noise) {
    const auto ctx = context_mask(batch, objective);
    auto [normed, stats] = revin_normalize(batch, ctx, false);
    for (std::size_t i = 0; i < normed.data.size(); ++i) {
        if (ctx[i] == 0) {
            normed.data[i] = cfg.mask_value;
        } else if (noise != nullptr && cfg.context_noise_std > 0.0) {
            normed.data[i] += noise->normal(0.0, cfg.context_noise_std);
        }
    }
    return {std::move(stats), std::move(normed.data)};
}

template <class T>
Matrix<T> patch_input(const PatchBatch& batch, const std::vector<double>& values, std::size_t b) {
    const auto rows = static_cast<Eigen::Index>(batch.slots * batch.steps);
    const auto cols = static_cast<Eigen::Index>(batch.channels);
    Matrix<T> m(rows, cols);
    const std::size_t base = b * batch.patch_size();
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            m(r, c) = static_cast<T>(values[base + static_cast<std::size_t>(r * cols + c)]);
        }
    }
    return m;
}

inline PatchLayout layout_of(const PatchBatch& batch, std::size_t b) {
    PatchLayout l{batch.slots, batch.steps, {}};
    l.slot_valid.assign(batch.slot_mask.begin() + static_cast<std::ptrdiff_t>(b * batch.slots),
                        batch.slot_mask.begin() + static_cast<std::ptrdiff_t>((b + 1) * batch.slots));
    return l;
}

} // namespace detail

// Reconstruction of every entry in the original scale, batch layout. Loss
// consumers read only the objective positions.
template <class T>
std::vector<double> forward(const ModelState<T>& model, const PatchBatch& batch,
                            const std::vector<std::uint8_t>& objective, Rng* noise = nullptr) {
    detail::check_batch(model.config, batch, objective);
    const auto prepared = detail::prepare(model.config, batch, objective, noise);
    std::vector<double> out(batch.data.size(), 0.0);
    PatchCache<T> cache;
    for (std::size_t b = 0; b < batch.batch; ++b) {
        const auto layout = detail::layout_of(batch, b);
        const Matrix<T> y = patch_forward(model, layout, detail::patch_input<T>(batch, prepared.model_input, b), cache);
        const std::size_t base = b * batch.patch_size();
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            for (Eigen::Index c = 0; c < y.cols(); ++c) {
                out[base + static_cast<std::size_t>(r * y.cols() + c)] = static_cast<double>(y(r, c));
            }
        }
    }
    revin_denormalize(out, prepared.stats, batch.steps);
    for (std::size_t b = 0; b < batch.batch; ++b) {
        for (std::size_t s = 0; s < batch.slots; ++s) {
            if (!batch.slot_valid(b, s)) {
                std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(batch.index(b, s, 0, 0)),
                            batch.steps * batch.channels, 0.0);
            }
        }
    }
    return out;
}

// Entries that count toward the loss: objective, originally observed, valid.
inline std::vector<std::uint8_t> loss_targets(const PatchBatch& batch, const std::vector<std::uint8_t>& objective) {
    std::vector<std::uint8_t> targets(batch.data.size(), 0);
    for (std::size_t b = 0; b < batch.batch; ++b) {
        for (std::size_t s = 0; s < batch.slots; ++s) {
            if (!batch.slot_valid(b, s)) {
                continue;
            }
            for (std::size_t t = 0; t < batch.steps; ++t) {
                for (std::size_t c = 0; c < batch.channels; ++c) {
                    const auto i = batch.index(b, s, t, c);
                    targets[i] = objective[i] != 0 && batch.value_mask[i] != 0 ? 1 : 0;
                }
            }
        }
    }
    return targets;
}

// `R` is at least double; wider when the model runs in extended precision.
template <class R>
struct LossValue {
    R loss = 0;              // mean absolute error over targets
    std::size_t targets = 0;
};

// Masked MAE of the reconstruction; with `accumulate`, adds its gradient to
// every parameter's grad.
template <class T>
LossValue<std::common_type_t<T, double>> masked_mae(ModelState<T>& model, const PatchBatch& batch, const std::vector<std::uint8_t>& objective,
                     bool accumulate, Rng* noise = nullptr) {
    detail::check_batch(model.config, batch, objective);
    const auto targets = loss_targets(batch, objective);
    const auto count = static_cast<std::size_t>(std::count(targets.begin(), targets.end(), std::uint8_t{1}));
    using R = std::common_type_t<T, double>;
    LossValue<R> result{R(0), count};
    if (count == 0) {
        return result;
    }
    const auto prepared = detail::prepare(model.config, batch, objective, noise);
    const auto& st = prepared.stats;
    PatchCache<T> cache;
    R total = 0;
    for (std::size_t b = 0; b < batch.batch; ++b) {
        const auto layout = detail::layout_of(batch, b);
        const Matrix<T> y = patch_forward(model, layout, detail::patch_input<T>(batch, prepared.model_input, b), cache);
        Matrix<T> dy = Matrix<T>::Zero(y.rows(), y.cols());
        bool any = false;
        for (std::size_t s = 0; s < batch.slots; ++s) {
            for (std::size_t t = 0; t < batch.steps; ++t) {
                for (std::size_t c = 0; c < batch.channels; ++c) {
                    const auto i = batch.index(b, s, t, c);
                    if (targets[i] == 0) {
                        continue;
                    }
                    const auto r = static_cast<Eigen::Index>(s * batch.steps + t);
                    const auto k = st.index(b, s, c);
                    const R yhat = static_cast<R>(y(r, static_cast<Eigen::Index>(c))) * static_cast<R>(st.scale(k)) +
                                   static_cast<R>(st.mean[k]);
                    const R diff = yhat - static_cast<R>(batch.data[i]);
                    total += std::abs(diff);
                    const double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
                    dy(r, static_cast<Eigen::Index>(c)) =
                        static_cast<T>(sign * st.scale(k) / static_cast<double>(count));
                    any = true;
                }
            }
        }
        if (accumulate && any) {
            patch_backward(model, layout, cache, dy);
        }
    }
    result.loss = total / static_cast<R>(count);
    return result;
}

} // namespace urbanst
