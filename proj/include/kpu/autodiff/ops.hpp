#pragma once

#include <vector>

#include "kpu/autodiff/tensor.hpp"

// Differentiable operators. An op records a tape node when a tape is active on
// this thread and at least one input requires grad; otherwise it just computes.
// All reductions run sequentially in index order.

namespace kpu {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kCosineNormEps = 1e-8;

/// a[..., k] x b[k, n] -> [..., n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// Rank-2 transpose.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s);
/// Multiplies every element by a one-element tensor (a learnable gate, a weight).
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s);
/// Leading-axis expansion: target = [lead..., a.shape...].
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& target);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);
/// Mean over every axis but the last: [..., D] -> [D].
template <typename T>
Tensor<T> mean_leading(const Tensor<T>& a);

/// Concatenate along axis 0 or the last axis.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
/// Half-open [begin, end) slice along axis 0 or the last axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <typename T>
Tensor<T> softmax(const Tensor<T>& a);
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);
template <typename T>
Tensor<T> relu(const Tensor<T>& a);
template <typename T>
Tensor<T> sqrt(const Tensor<T>& a);
template <typename T>
Tensor<T> square(const Tensor<T>& a);
/// Normalizes over the last axis, no affine, eps = 1e-5.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a);

/// Cross-correlation of x[C,H,W] with w[Co,C,k,k] plus b[Co].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                 std::size_t pad);
/// Corner-aligned bilinear resize of grid[H,W,D] to [out_h,out_w,D].
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& grid, std::size_t out_h, std::size_t out_w);

/// Cosine similarity per row over the last axis -> [rows]. Rows where either
/// side has norm below eps yield 0 and pass no gradient.
template <typename T>
Tensor<T> row_cosine(const Tensor<T>& a, const Tensor<T>& b, T eps = T(kCosineNormEps));
/// Mean elementwise smooth-L1 (Huber with threshold beta) -> scalar.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& a, const Tensor<T>& b, T beta);

// Operator sugar.
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

} // namespace kpu
