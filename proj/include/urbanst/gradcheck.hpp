#pragma once

// Central finite-difference verification of analytic gradients, plus the
// standard suite covering every backward pass in the library.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "urbanst/layers.hpp"
#include "urbanst/model.hpp"
#include "urbanst/random.hpp"
#include "urbanst/revin.hpp"
#include "urbanst/rope.hpp"
#include "urbanst/tensor.hpp"

namespace urbanst {

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckFloor = 1e-8;

struct GradCheckReport {
    std::string name;
    bool passed = true;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    double seconds = 0.0;
};

template <class R>
double grad_rel_error(R analytic, R numeric) {
    return static_cast<double>(std::abs(analytic - numeric) /
                               std::max({std::abs(analytic), std::abs(numeric), static_cast<R>(kGradCheckFloor)}));
}

// `loss` reads the current contents of `inputs`; `analytic[i][j]` is the
// claimed d loss / d inputs[i][j]. Each entry is perturbed by +-h in turn and
// restored. `R` is double for every primitive and may be wider for deep
// composites whose near-zero gradients sit below double round-off.
template <class R = double>
GradCheckReport grad_check(std::string name, const std::type_identity_t<std::vector<std::span<R>>>& inputs,
                           const std::type_identity_t<std::vector<std::vector<R>>>& analytic,
                           const std::type_identity_t<std::function<R()>>& loss, double tol,
                           std::type_identity_t<R> h = static_cast<R>(kGradCheckStep)) {
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckReport r;
    r.name = std::move(name);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto x = inputs[i];
        if (analytic.at(i).size() != x.size()) {
            throw ShapeError("analytic gradient " + std::to_string(i) + " has the wrong length");
        }
        for (std::size_t j = 0; j < x.size(); ++j) {
            const R saved = x[j];
            x[j] = saved + h;
            const R up = loss();
            x[j] = saved - h;
            const R down = loss();
            x[j] = saved;
            const R numeric = (up - down) / (R(2) * h);
            const double err = grad_rel_error(analytic[i][j], numeric);
            ++r.checked;
            if (!(err <= r.max_rel_error)) {
                r.max_rel_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
                r.worst_input = i;
                r.worst_index = j;
                r.worst_analytic = static_cast<double>(analytic[i][j]);
                r.worst_numeric = static_cast<double>(numeric);
            }
        }
    }
    r.passed = r.max_rel_error <= tol;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

namespace gradcheck_cases {

inline Tensor<double> random_tensor(Rng& rng, typename Tensor<double>::Shape shape, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.values()) {
        v = rng.normal(0.0, scale);
    }
    return t;
}

template <class R>
std::vector<R> to_vector(const Tensor<R>& t) {
    return {t.values().begin(), t.values().end()};
}

inline double weighted_sum(const Tensor<double>& y, const Tensor<double>& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        s += y[i] * w[i];
    }
    return s;
}

// Optional multiplier applied to the first analytic gradient entry, used to
// confirm the checker detects a wrong backward pass.
struct Corruption {
    double factor = 1.0;
    void apply(std::vector<double>& g) const {
        if (!g.empty()) {
            g[0] *= factor;
        }
    }
};

inline GradCheckReport matmul_case(Rng& rng, double tol, Corruption bad = {}) {
    auto a = random_tensor(rng, {3, 4});
    auto b = random_tensor(rng, {4, 2});
    const auto w = random_tensor(rng, {3, 2});
    const auto g = matmul_backward(a, b, w);
    std::vector<std::vector<double>> analytic{to_vector(g.da), to_vector(g.db)};
    bad.apply(analytic[0]);
    return grad_check("matmul", {a.values(), b.values()}, analytic,
                      [&] { return weighted_sum(matmul(a, b), w); }, tol);
}

inline GradCheckReport softmax_case(Rng& rng, double tol) {
    auto x = random_tensor(rng, {3, 5, 2});
    const auto w = random_tensor(rng, {3, 5, 2});
    const auto y = softmax(x, 1);
    return grad_check("softmax", {x.values()}, {to_vector(softmax_backward(y, w, 1))},
                      [&] { return weighted_sum(softmax(x, 1), w); }, tol);
}

inline GradCheckReport attention_case(Rng& rng, double tol, bool masked) {
    auto q = random_tensor(rng, {4, 8});
    auto k = random_tensor(rng, {5, 8});
    auto v = random_tensor(rng, {5, 3});
    const auto w = random_tensor(rng, {4, 3});
    AttentionMask mask(4 * 5, 1);
    for (std::size_t i = 0; i < 4; ++i) {
        mask[i * 5 + (i + 1) % 5] = 0;
    }
    const AttentionMask* mp = masked ? &mask : nullptr;
    const auto fwd = scaled_dot_attention(q, k, v, mp);
    const auto g = scaled_dot_attention_backward(q, k, v, fwd.probs, w);
    return grad_check(masked ? "attention_masked" : "attention", {q.values(), k.values(), v.values()},
                      {to_vector(g.dq), to_vector(g.dk), to_vector(g.dv)},
                      [&] { return weighted_sum(scaled_dot_attention(q, k, v, mp).out, w); }, tol);
}

inline GradCheckReport rope_attention_case(Rng& rng, double tol) {
    const std::size_t len = 6;
    const std::size_t d = 8;
    auto q = random_tensor(rng, {len, d});
    auto k = random_tensor(rng, {len, d});
    auto v = random_tensor(rng, {len, 4});
    const auto w = random_tensor(rng, {len, 4});
    std::vector<std::size_t> pos(len);
    for (std::size_t i = 0; i < len; ++i) {
        pos[i] = 3 * i + 1;
    }
    auto run = [&] {
        return scaled_dot_attention(rope_apply(q, pos), rope_apply(k, pos), v);
    };
    const auto qr = rope_apply(q, pos);
    const auto kr = rope_apply(k, pos);
    const auto fwd = scaled_dot_attention(qr, kr, v);
    const auto g = scaled_dot_attention_backward(qr, kr, v, fwd.probs, w);
    return grad_check("rope_attention", {q.values(), k.values(), v.values()},
                      {to_vector(rope_backward(g.dq, pos)), to_vector(rope_backward(g.dk, pos)), to_vector(g.dv)},
                      [&] { return weighted_sum(run().out, w); }, tol);
}

inline GradCheckReport layer_norm_case(Rng& rng, double tol) {
    auto x = random_tensor(rng, {4, 6});
    Parameter<double> gain("gain", {1, 6});
    Parameter<double> bias("bias", {1, 6});
    for (auto& g : gain.value.values()) {
        g = rng.uniform(0.5, 1.5);
    }
    for (auto& b : bias.value.values()) {
        b = rng.normal(0.0, 0.1);
    }
    const auto w = random_tensor(rng, {4, 6});
    layers::NormCache<double> cache;
    layers::layer_norm<double>(x.matrix(), gain, bias, cache);
    const Matrix<double> dx = layers::layer_norm_backward<double>(cache, w.matrix(), gain, bias);
    auto loss = [&] {
        layers::NormCache<double> c;
        const Matrix<double> y = layers::layer_norm<double>(x.matrix(), gain, bias, c);
        return (y.array() * w.matrix().array()).sum();
    };
    return grad_check("layer_norm", {x.values(), gain.value.values(), bias.value.values()},
                      {to_vector(Tensor<double>::from_matrix(dx)), to_vector(gain.grad), to_vector(bias.grad)}, loss,
                      tol);
}

inline GradCheckReport linear_gelu_case(Rng& rng, double tol) {
    auto x = random_tensor(rng, {3, 5});
    Parameter<double> weight("weight", {5, 4});
    Parameter<double> bias("bias", {1, 4});
    for (auto& v : weight.value.values()) {
        v = rng.normal(0.0, 0.5);
    }
    for (auto& v : bias.value.values()) {
        v = rng.normal(0.0, 0.5);
    }
    const auto w = random_tensor(rng, {3, 4});
    const Matrix<double> pre = layers::linear<double>(x.matrix(), weight, bias);
    const Matrix<double> dpre =
        w.matrix().cwiseProduct(pre.unaryExpr([](double v) { return layers::gelu_grad(v); }));
    const Matrix<double> dx = layers::linear_backward<double>(x.matrix(), dpre, weight, bias);
    auto loss = [&] {
        const Matrix<double> y =
            layers::linear<double>(x.matrix(), weight, bias).unaryExpr([](double v) { return layers::gelu(v); });
        return (y.array() * w.matrix().array()).sum();
    };
    return grad_check("linear_gelu", {x.values(), weight.value.values(), bias.value.values()},
                      {to_vector(Tensor<double>::from_matrix(dx)), to_vector(weight.grad), to_vector(bias.grad)},
                      loss, tol);
}

inline GradCheckReport revin_case(Rng& rng, double tol) {
    PatchBatch batch(2, 3, 6, 2);
    for (auto& v : batch.data) {
        v = rng.normal(1.0, 2.0);
    }
    std::fill(batch.slot_mask.begin(), batch.slot_mask.end(), std::uint8_t{1});
    batch.slot_mask[4] = 0;
    std::fill(batch.value_mask.begin(), batch.value_mask.end(), std::uint8_t{1});
    std::vector<std::uint8_t> context(batch.data.size(), 0);
    for (std::size_t i = 0; i < context.size(); ++i) {
        context[i] = (i / batch.channels) % batch.steps < 4 ? 1 : 0;
    }
    std::vector<double> w(batch.data.size());
    for (auto& v : w) {
        v = rng.normal(0.0, 1.0);
    }
    const auto [z, stats] = revin_normalize(batch, context);
    const auto dx = revin_normalize_backward(batch, context, stats, w);
    auto loss = [&] {
        const auto zz = revin_normalize(batch, context).first;
        double s = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            s += zz.data[i] * w[i];
        }
        return s;
    };
    return grad_check("revin", {std::span<double>(batch.data)}, {dx}, loss, tol);
}

inline ModelConfig tiny_model_config() {
    ModelConfig c;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_temporal_layers = 1;
    c.n_spatial_layers = 1;
    c.ffn_mult = 2;
    c.patch_slots = 3;
    c.patch_steps = 5;
    c.channels = 2;
    return c;
}

// Full forward + masked MAE against every parameter, over two patches
// (the second with a padded slot). Evaluated in extended precision: some
// parameters (e.g. key biases, nearly softmax-invariant) carry gradients near
// 1e-8 that central differences in double cannot resolve at h = 1e-5.
inline GradCheckReport model_case(Rng& rng, double tol, const ModelConfig& cfg = tiny_model_config()) {
    using R = long double;
    auto model = ModelState<R>::create(cfg, rng.next());
    for (auto& p : model.params) {
        for (auto& v : p.value.values()) {
            v += static_cast<R>(rng.normal(0.0, 0.3));
        }
    }
    PatchBatch batch(2, cfg.patch_slots, cfg.patch_steps, cfg.channels);
    for (auto& v : batch.data) {
        v = rng.normal(0.0, 1.0);
    }
    std::fill(batch.slot_mask.begin(), batch.slot_mask.end(), std::uint8_t{1});
    batch.slot_mask.back() = 0;
    std::fill(batch.value_mask.begin(), batch.value_mask.end(), std::uint8_t{1});
    std::vector<std::uint8_t> objective(batch.data.size(), 0);
    for (std::size_t b = 0; b < batch.batch; ++b) {
        for (std::size_t s = 0; s < batch.slots; ++s) {
            for (std::size_t t = 2; t < batch.steps; ++t) {
                for (std::size_t c = 0; c < batch.channels; ++c) {
                    objective[batch.index(b, s, t, c)] = 1;
                }
            }
        }
    }
    model.zero_grad();
    masked_mae(model, batch, objective, true);
    std::vector<std::span<R>> inputs;
    std::vector<std::vector<R>> analytic;
    for (auto& p : model.params) {
        inputs.push_back(p.value.values());
        analytic.push_back(to_vector(p.grad));
    }
    return grad_check<R>("model_masked_mae", inputs, analytic,
                         [&] { return masked_mae(model, batch, objective, false).loss; }, tol);
}

} // namespace gradcheck_cases

// Runs every case with a fixed seed. 64-bit throughout.
inline std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed = 0, double tol = 1e-4) {
    Rng rng(seed);
    std::vector<GradCheckReport> out;
    out.push_back(gradcheck_cases::matmul_case(rng, tol));
    out.push_back(gradcheck_cases::softmax_case(rng, tol));
    out.push_back(gradcheck_cases::attention_case(rng, tol, false));
    out.push_back(gradcheck_cases::attention_case(rng, tol, true));
    out.push_back(gradcheck_cases::rope_attention_case(rng, tol));
    out.push_back(gradcheck_cases::layer_norm_case(rng, tol));
    out.push_back(gradcheck_cases::linear_gelu_case(rng, tol));
    out.push_back(gradcheck_cases::revin_case(rng, tol));
    out.push_back(gradcheck_cases::model_case(rng, tol));
    return out;
}

} // namespace urbanst
