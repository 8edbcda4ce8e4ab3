#pragma once

// Row-wise transformer building blocks over [rows x features] matrices. Each
// forward fills a small cache; each backward accumulates parameter gradients
// and returns the input gradient.

#include <cmath>
#include <numbers>

#include "urbanst/tensor.hpp"

namespace urbanst::layers {

template <class T>
Matrix<T> linear(const Matrix<T>& x, const Parameter<T>& weight, const Parameter<T>& bias) {
    Matrix<T> y = x * weight.w();
    y.rowwise() += bias.w().row(0);
    return y;
}

template <class T>
Matrix<T> linear_backward(const Matrix<T>& x, const Matrix<T>& dy, Parameter<T>& weight, Parameter<T>& bias) {
    weight.g().noalias() += x.transpose() * dy;
    bias.g().row(0) += dy.colwise().sum();
    return dy * weight.w().transpose();
}

template <class T>
struct NormCache {
    Matrix<T> xhat;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
Matrix<T> layer_norm(const Matrix<T>& x, const Parameter<T>& gain, const Parameter<T>& bias, NormCache<T>& cache) {
    const auto cols = static_cast<T>(x.cols());
    const Eigen::Matrix<T, Eigen::Dynamic, 1> mean = x.rowwise().sum() / cols;
    cache.xhat = x.colwise() - mean;
    const Eigen::Matrix<T, Eigen::Dynamic, 1> var = cache.xhat.cwiseAbs2().rowwise().sum() / cols;
    cache.rstd = (var.array() + static_cast<T>(kLayerNormEps)).rsqrt().matrix();
    cache.xhat = cache.xhat.array().colwise() * cache.rstd.array();
    Matrix<T> y = cache.xhat.array().rowwise() * gain.w().row(0).array();
    y.rowwise() += bias.w().row(0);
    return y;
}

template <class T>
Matrix<T> layer_norm_backward(const NormCache<T>& cache, const Matrix<T>& dy, Parameter<T>& gain,
                              Parameter<T>& bias) {
    gain.g().row(0) += dy.cwiseProduct(cache.xhat).colwise().sum();
    bias.g().row(0) += dy.colwise().sum();
    const Matrix<T> dxhat = dy.array().rowwise() * gain.w().row(0).array();
    const auto cols = static_cast<T>(dy.cols());
    const Eigen::Matrix<T, Eigen::Dynamic, 1> mean_d = dxhat.rowwise().sum() / cols;
    const Eigen::Matrix<T, Eigen::Dynamic, 1> mean_dx = dxhat.cwiseProduct(cache.xhat).rowwise().sum() / cols;
    Matrix<T> dx = dxhat.colwise() - mean_d;
    dx -= (cache.xhat.array().colwise() * mean_dx.array()).matrix();
    dx = dx.array().colwise() * cache.rstd.array();
    return dx;
}

// Exact GELU, x * Phi(x).
template <class T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    return cdf + x * pdf;
}

} // namespace urbanst::layers
