#pragma once

#include <cstddef>
#include <span>

// Dense inner loops used by the autodiff ops. Each kernel has a serial
// reference in kernels::reference and an OpenMP version here. Both sum every
// output element in the same index order, so results are bit-identical for
// any thread count.

namespace kpu::kernels {

/// Threads used by the parallel kernels. Initialized from KPU_THREADS (default 1).
int num_threads();
void set_num_threads(int n);

struct Conv2dGeometry {
    std::size_t channels, height, width;
    std::size_t out_channels, kernel, stride, pad;

    std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
    std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

// c[m x n] = a[m x k] * b[k x n]
template <typename T>
void gemm(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
          std::size_t n);
// c[m x n] = a[m x k] * b[n x k]^T
template <typename T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n);
// c[m x n] = a[k x m]^T * b[k x n]
template <typename T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n);

// out[Co x Ho x Wo] = bias + sum over (ci, ky, kx) of w * x (zero padded).
template <typename T>
void conv2d_forward(std::span<const T> input, std::span<const T> weight, std::span<const T> bias,
                    std::span<T> out, const Conv2dGeometry& g);
// grad_in[C x H x W] = sum over (co, ky, kx) of grad_out * w, overwritten.
template <typename T>
void conv2d_backward_input(std::span<const T> grad_out, std::span<const T> weight, std::span<T> grad_in,
                           const Conv2dGeometry& g);
// grad_w[Co x C x k x k] = sum over (oy, ox) of grad_out * x; grad_b[Co] = sum of grad_out. Overwritten.
template <typename T>
void conv2d_backward_weight(std::span<const T> grad_out, std::span<const T> input, std::span<T> grad_w,
                            std::span<T> grad_b, const Conv2dGeometry& g);

namespace reference {

template <typename T>
void gemm(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
          std::size_t n);
template <typename T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n);
template <typename T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n);
template <typename T>
void conv2d_forward(std::span<const T> input, std::span<const T> weight, std::span<const T> bias,
                    std::span<T> out, const Conv2dGeometry& g);
template <typename T>
void conv2d_backward_input(std::span<const T> grad_out, std::span<const T> weight, std::span<T> grad_in,
                           const Conv2dGeometry& g);
template <typename T>
void conv2d_backward_weight(std::span<const T> grad_out, std::span<const T> input, std::span<T> grad_w,
                            std::span<T> grad_b, const Conv2dGeometry& g);

} // namespace reference

} // namespace kpu::kernels
