#pragma once

// Minimal dense tensor layer with hand-written backward passes. Dense matrix
// products go through Eigen; everything else is plain loops.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <new>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "urbanst/errors.hpp"

namespace urbanst {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Additive score bias for disallowed attention positions. A finite constant
// keeps exp() away from inf - inf = NaN.
inline constexpr double kMaskBias = -1e9;

// Fixed 64-byte alignment for tensor storage. Eigen picks its vectorized
// reduction order from the runtime address of mapped data, so storage with
// varying alignment would make identical computations round differently.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

template <class T>
class Tensor {
public:
    using Shape = std::vector<std::size_t>;
    using Storage = std::vector<T, AlignedAllocator<T>>;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(count(shape_), fill) {}

    Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        if (data_.size() != count(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape");
        }
    }

    static Tensor from_matrix(const Matrix<T>& m) {
        Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
        Eigen::Map<Matrix<T>>(t.data_.data(), m.rows(), m.cols()) = m;
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    Storage& storage() { return data_; }
    const Storage& storage() const { return data_; }
    std::vector<T> to_vector() const { return {data_.begin(), data_.end()}; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    // Rank-2 view; a rank-1 tensor is viewed as a single row.
    Eigen::Map<Matrix<T>> matrix() { return {data_.data(), rows(), cols()}; }
    Eigen::Map<const Matrix<T>> matrix() const { return {data_.data(), rows(), cols()}; }

    friend bool operator==(const Tensor&, const Tensor&) = default;

    static std::size_t count(const Shape& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
    }

private:
    Eigen::Index rows() const {
        check_matrix();
        return shape_.size() == 1 ? 1 : static_cast<Eigen::Index>(shape_[0]);
    }
    Eigen::Index cols() const {
        check_matrix();
        return static_cast<Eigen::Index>(shape_.back());
    }
    void check_matrix() const {
        if (shape_.empty() || shape_.size() > 2) {
            throw ShapeError("matrix view needs a rank-1 or rank-2 tensor");
        }
    }

    Shape shape_;
    Storage data_;
};

template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string n, typename Tensor<T>::Shape shape)
        : name(std::move(n)), value(shape), grad(std::move(shape)) {}

    void zero_grad() { grad.fill(T{}); }
    auto w() { return value.matrix(); }
    auto w() const { return value.matrix(); }
    auto g() { return grad.matrix(); }
};

// ---------------------------------------------------------------------------
// Matrix kernels shared by the tensor ops and the model
// ---------------------------------------------------------------------------
namespace kernels {

// In-place numerically stable softmax over each row.
template <class Derived>
void softmax_rows(Eigen::MatrixBase<Derived>& s) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        auto row = s.row(i);
        const auto mx = row.maxCoeff();
        row = (row.array() - mx).exp().matrix();
        row /= row.sum();
    }
}

// dS = P * (dP - rowsum(dP * P))
template <class T>
Matrix<T> softmax_rows_backward(const Matrix<T>& p, const Matrix<T>& dp) {
    Matrix<T> ds = p.cwiseProduct(dp);
    const Eigen::Matrix<T, Eigen::Dynamic, 1> dot = ds.rowwise().sum();
    ds -= p.cwiseProduct(dot.replicate(1, p.cols()));
    return ds;
}

// softmax(Q K^T * scale + bias) V. `allowed` is an optional row-major
// [L x L'] byte mask (nonzero = may attend).
template <class T>
void attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const std::uint8_t* allowed,
               Matrix<T>& probs, Matrix<T>& out) {
    const T scale = T(1) / std::sqrt(static_cast<T>(q.cols()));
    probs.noalias() = (q * k.transpose()) * scale;
    if (allowed != nullptr) {
        for (Eigen::Index i = 0; i < probs.rows(); ++i) {
            bool any = false;
            for (Eigen::Index j = 0; j < probs.cols(); ++j) {
                if (allowed[i * probs.cols() + j] == 0) {
                    probs(i, j) += static_cast<T>(kMaskBias);
                } else {
                    any = true;
                }
            }
            if (!any) {
                throw AttentionMaskError("query row " + std::to_string(i) + " has every key masked");
            }
        }
    }
    softmax_rows(probs);
    out.noalias() = probs * v;
}

template <class T>
void attention_backward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const Matrix<T>& probs,
                        const Matrix<T>& dout, Matrix<T>& dq, Matrix<T>& dk, Matrix<T>& dv) {
    const T scale = T(1) / std::sqrt(static_cast<T>(q.cols()));
    dv.noalias() = probs.transpose() * dout;
    const Matrix<T> dp = dout * v.transpose();
    const Matrix<T> ds = softmax_rows_backward<T>(probs, dp);
    dq.noalias() = (ds * k) * scale;
    dk.noalias() = (ds.transpose() * q) * scale;
}

} // namespace kernels

// ---------------------------------------------------------------------------
// Tensor operations
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul needs [m x k] * [k x n]");
    }
    Tensor<T> out({a.dim(0), b.dim(1)});
    out.matrix().noalias() = a.matrix() * b.matrix();
    return out;
}

template <class T>
struct MatmulGrad {
    Tensor<T> da;
    Tensor<T> db;
};

template <class T>
MatmulGrad<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dout) {
    MatmulGrad<T> g{Tensor<T>(a.shape()), Tensor<T>(b.shape())};
    g.da.matrix().noalias() = dout.matrix() * b.matrix().transpose();
    g.db.matrix().noalias() = a.matrix().transpose() * dout.matrix();
    return g;
}

namespace detail {

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t length = 1;
    std::size_t inner = 1;
};

template <class T>
AxisSplit split_axis(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range");
    }
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) {
        s.outer *= x.dim(i);
    }
    s.length = x.dim(axis);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) {
        s.inner *= x.dim(i);
    }
    return s;
}

} // namespace detail

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    const auto s = detail::split_axis(x, axis);
    Tensor<T> y(x.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            auto at = [&](std::size_t j) { return (o * s.length + j) * s.inner + i; };
            T mx = x[at(0)];
            for (std::size_t j = 1; j < s.length; ++j) {
                mx = std::max(mx, x[at(j)]);
            }
            T sum = 0;
            for (std::size_t j = 0; j < s.length; ++j) {
                y[at(j)] = std::exp(x[at(j)] - mx);
                sum += y[at(j)];
            }
            for (std::size_t j = 0; j < s.length; ++j) {
                y[at(j)] /= sum;
            }
        }
    }
    return y;
}

// Vector-Jacobian product: dx = y * (dy - sum(dy * y)).
template <class T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& dy, std::size_t axis) {
    const auto s = detail::split_axis(y, axis);
    Tensor<T> dx(y.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            auto at = [&](std::size_t j) { return (o * s.length + j) * s.inner + i; };
            T dot = 0;
            for (std::size_t j = 0; j < s.length; ++j) {
                dot += dy[at(j)] * y[at(j)];
            }
            for (std::size_t j = 0; j < s.length; ++j) {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    return dx;
}

template <class T>
struct AttentionResult {
    Tensor<T> out;
    Tensor<T> probs;
};

// Row-major [L x L'] mask, nonzero = allowed.
using AttentionMask = std::vector<std::uint8_t>;

template <class T>
AttentionResult<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                        const AttentionMask* mask = nullptr) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0) ||
        q.dim(1) == 0) {
        throw ShapeError("attention needs Q [L x d], K [L' x d], V [L' x dv] with d > 0");
    }
    if (mask != nullptr && mask->size() != q.dim(0) * k.dim(0)) {
        throw ShapeError("attention mask must be [L x L']");
    }
    const Matrix<T> qm = q.matrix();
    const Matrix<T> km = k.matrix();
    const Matrix<T> vm = v.matrix();
    Matrix<T> probs;
    Matrix<T> out;
    kernels::attention<T>(qm, km, vm, mask != nullptr ? mask->data() : nullptr, probs, out);
    return {Tensor<T>::from_matrix(out), Tensor<T>::from_matrix(probs)};
}

template <class T>
struct AttentionGrad {
    Tensor<T> dq;
    Tensor<T> dk;
    Tensor<T> dv;
};

template <class T>
AttentionGrad<T> scaled_dot_attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                               const Tensor<T>& probs, const Tensor<T>& dout) {
    Matrix<T> dq;
    Matrix<T> dk;
    Matrix<T> dv;
    kernels::attention_backward<T>(q.matrix(), k.matrix(), v.matrix(), probs.matrix(), dout.matrix(), dq, dk, dv);
    return {Tensor<T>::from_matrix(dq), Tensor<T>::from_matrix(dk), Tensor<T>::from_matrix(dv)};
}

template <class T>
struct InstanceStats {
    Tensor<T> mean;
    Tensor<T> std; // population estimator
};

// Mean and population standard deviation along `axis`; the axis is removed
// from the result shape.
template <class T>
InstanceStats<T> instance_stats(const Tensor<T>& x, std::size_t axis) {
    const auto s = detail::split_axis(x, axis);
    if (s.length < 1) {
        throw ShapeError("instance statistics need a non-empty axis");
    }
    auto shape = x.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (shape.empty()) {
        shape.push_back(1);
    }
    InstanceStats<T> r{Tensor<T>(shape), Tensor<T>(shape)};
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            T sum = 0;
            for (std::size_t j = 0; j < s.length; ++j) {
                sum += x[(o * s.length + j) * s.inner + i];
            }
            const T mu = sum / static_cast<T>(s.length);
            T sq = 0;
            for (std::size_t j = 0; j < s.length; ++j) {
                const T d = x[(o * s.length + j) * s.inner + i] - mu;
                sq += d * d;
            }
            r.mean[o * s.inner + i] = mu;
            r.std[o * s.inner + i] = std::sqrt(sq / static_cast<T>(s.length));
        }
    }
    return r;
}

} // namespace urbanst
