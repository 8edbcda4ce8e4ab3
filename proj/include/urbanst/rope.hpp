#pragma once

// Rotary position encoding. Dimension pair (2i, 2i+1) of a row at position m
// is rotated by m * base^(-2i/d). Queries and keys are rotated, values never.

#include <cmath>
#include <span>
#include <vector>

#include "urbanst/errors.hpp"
#include "urbanst/tensor.hpp"

namespace urbanst {

template <class T>
class RopeTable {
public:
    RopeTable() = default;

    RopeTable(std::size_t head_dim, std::size_t max_position, double base) : head_dim_(head_dim) {
        if (head_dim % 2 != 0 || head_dim == 0) {
            throw ConfigError("rotary encoding needs an even, non-zero head dimension");
        }
        const std::size_t pairs = head_dim / 2;
        cos_.resize(max_position * pairs);
        sin_.resize(max_position * pairs);
        for (std::size_t m = 0; m < max_position; ++m) {
            for (std::size_t i = 0; i < pairs; ++i) {
                const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
                const double angle = static_cast<double>(m) * freq;
                cos_[m * pairs + i] = static_cast<T>(std::cos(angle));
                sin_[m * pairs + i] = static_cast<T>(std::sin(angle));
            }
        }
    }

    std::size_t head_dim() const { return head_dim_; }
    std::size_t max_position() const { return head_dim_ == 0 ? 0 : cos_.size() / (head_dim_ / 2); }

    // Rotates every row in place; row r sits at positions[r]. `inverse`
    // applies the transpose rotation, which is also the backward pass.
    template <class Derived>
    void rotate(Eigen::MatrixBase<Derived>& x, std::span<const std::size_t> positions, bool inverse = false) const {
        if (static_cast<std::size_t>(x.cols()) != head_dim_) {
            throw ShapeError("rotary table built for a different head dimension");
        }
        const std::size_t pairs = head_dim_ / 2;
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            const std::size_t m = positions[static_cast<std::size_t>(r)];
            if (m >= max_position()) {
                throw ShapeError("rotary position beyond table");
            }
            for (std::size_t i = 0; i < pairs; ++i) {
                const T c = cos_[m * pairs + i];
                const T s = inverse ? -sin_[m * pairs + i] : sin_[m * pairs + i];
                const auto a = static_cast<Eigen::Index>(2 * i);
                const T x0 = x(r, a);
                const T x1 = x(r, a + 1);
                x(r, a) = x0 * c - x1 * s;
                x(r, a + 1) = x0 * s + x1 * c;
            }
        }
    }

private:
    std::size_t head_dim_ = 0;
    std::vector<T> cos_;
    std::vector<T> sin_;
};

namespace detail {

template <class T>
Tensor<T> rotate_direct(const Tensor<T>& x, std::span<const std::size_t> positions, double base, bool inverse) {
    if (x.rank() != 2 || positions.size() != x.dim(0)) {
        throw ShapeError("rotary encoding needs [L x d] input and L positions");
    }
    const std::size_t d = x.dim(1);
    if (d % 2 != 0) {
        throw ConfigError("rotary encoding needs an even head dimension");
    }
    Tensor<T> y = x;
    for (std::size_t r = 0; r < x.dim(0); ++r) {
        for (std::size_t i = 0; i < d / 2; ++i) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
            const double angle = static_cast<double>(positions[r]) * freq;
            const T c = static_cast<T>(std::cos(angle));
            const T s = static_cast<T>(inverse ? -std::sin(angle) : std::sin(angle));
            const T x0 = x(r, 2 * i);
            const T x1 = x(r, 2 * i + 1);
            y(r, 2 * i) = x0 * c - x1 * s;
            y(r, 2 * i + 1) = x0 * s + x1 * c;
        }
    }
    return y;
}

} // namespace detail

template <class T>
Tensor<T> rope_apply(const Tensor<T>& x, std::span<const std::size_t> positions, double base = 10000.0) {
    return detail::rotate_direct(x, positions, base, false);
}

// Backward of rope_apply: rotate the incoming gradient back.
template <class T>
Tensor<T> rope_backward(const Tensor<T>& dy, std::span<const std::size_t> positions, double base = 10000.0) {
    return detail::rotate_direct(dy, positions, base, true);
}

} // namespace urbanst
