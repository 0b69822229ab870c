#include "kpu/kernels/kernels.hpp"

namespace kpu::kernels::reference {

template <typename T>
void gemm(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
          std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
    }
}

template <typename T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
            c[i * n + j] = acc;
        }
    }
}

template <typename T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
            c[i * n + j] = acc;
        }
    }
}

template <typename T>
void conv2d_forward(std::span<const T> input, std::span<const T> weight, std::span<const T> bias,
                    std::span<T> out, const Conv2dGeometry& g) {
    const std::size_t ho = g.out_height(), wo = g.out_width(), kk = g.kernel;
    for (std::size_t co = 0; co < g.out_channels; ++co) {
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
                T acc = bias[co];
                for (std::size_t ci = 0; ci < g.channels; ++ci) {
                    for (std::size_t ky = 0; ky < kk; ++ky) {
                        for (std::size_t kx = 0; kx < kk; ++kx) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                            static_cast<std::ptrdiff_t>(g.pad);
                            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                            static_cast<std::ptrdiff_t>(g.pad);
                            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                                ix < static_cast<std::ptrdiff_t>(g.width);
                            const T x = inside ? input[(ci * g.height + iy) * g.width + ix] : T(0);
                            acc += weight[((co * g.channels + ci) * kk + ky) * kk + kx] * x;
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
}

template <typename T>
void conv2d_backward_input(std::span<const T> grad_out, std::span<const T> weight, std::span<T> grad_in,
                           const Conv2dGeometry& g) {
    const std::size_t ho = g.out_height(), wo = g.out_width(), kk = g.kernel;
    for (std::size_t ci = 0; ci < g.channels; ++ci) {
        for (std::size_t iy = 0; iy < g.height; ++iy) {
            for (std::size_t ix = 0; ix < g.width; ++ix) {
                T acc = T(0);
                for (std::size_t co = 0; co < g.out_channels; ++co) {
                    for (std::size_t ky = 0; ky < kk; ++ky) {
                        for (std::size_t kx = 0; kx < kk; ++kx) {
                            const auto ny = static_cast<std::ptrdiff_t>(iy + g.pad) - static_cast<std::ptrdiff_t>(ky);
                            const auto nx = static_cast<std::ptrdiff_t>(ix + g.pad) - static_cast<std::ptrdiff_t>(kx);
                            if (ny < 0 || nx < 0) continue;
                            if (ny % static_cast<std::ptrdiff_t>(g.stride) || nx % static_cast<std::ptrdiff_t>(g.stride)) continue;
                            const std::size_t oy = static_cast<std::size_t>(ny) / g.stride;
                            const std::size_t ox = static_cast<std::size_t>(nx) / g.stride;
                            if (oy >= ho || ox >= wo) continue;
                            acc += grad_out[(co * ho + oy) * wo + ox] *
                                   weight[((co * g.channels + ci) * kk + ky) * kk + kx];
                        }
                    }
                }
                grad_in[(ci * g.height + iy) * g.width + ix] = acc;
            }
        }
    }
}

template <typename T>
void conv2d_backward_weight(std::span<const T> grad_out, std::span<const T> input, std::span<T> grad_w,
                            std::span<T> grad_b, const Conv2dGeometry& g) {
    const std::size_t ho = g.out_height(), wo = g.out_width(), kk = g.kernel;
    for (std::size_t co = 0; co < g.out_channels; ++co) {
        T bacc = T(0);
        for (std::size_t p = 0; p < ho * wo; ++p) bacc += grad_out[co * ho * wo + p];
        grad_b[co] = bacc;
        for (std::size_t ci = 0; ci < g.channels; ++ci) {
            for (std::size_t ky = 0; ky < kk; ++ky) {
                for (std::size_t kx = 0; kx < kk; ++kx) {
                    T acc = T(0);
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                            static_cast<std::ptrdiff_t>(g.pad);
                            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                            static_cast<std::ptrdiff_t>(g.pad);
                            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                                ix >= static_cast<std::ptrdiff_t>(g.width))
                                continue;
                            acc += grad_out[(co * ho + oy) * wo + ox] * input[(ci * g.height + iy) * g.width + ix];
                        }
                    }
                    grad_w[((co * g.channels + ci) * kk + ky) * kk + kx] = acc;
                }
            }
        }
    }
}

#define KPU_INSTANTIATE(T)                                                                                   \
    template void gemm<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t,   \
                          std::size_t);                                                                      \
    template void gemm_nt<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t, \
                             std::size_t);                                                                   \
    template void gemm_tn<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t, \
                             std::size_t);                                                                   \
    template void conv2d_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>, std::span<T>, \
                                    const Conv2dGeometry&);                                                  \
    template void conv2d_backward_input<T>(std::span<const T>, std::span<const T>, std::span<T>,             \
                                           const Conv2dGeometry&);                                           \
    template void conv2d_backward_weight<T>(std::span<const T>, std::span<const T>, std::span<T>,            \
                                            std::span<T>, const Conv2dGeometry&);

KPU_INSTANTIATE(float)
KPU_INSTANTIATE(double)
#undef KPU_INSTANTIATE

} // namespace kpu::kernels::reference
