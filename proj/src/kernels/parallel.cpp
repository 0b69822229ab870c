#include "kpu/kernels/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace kpu::kernels {

namespace {

int threads_from_env() {
    if (const char* env = std::getenv("KPU_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 1;
}

std::atomic<int> g_threads{threads_from_env()};

using idx = std::ptrdiff_t;

} // namespace

int num_threads() { return g_threads; }
void set_num_threads(int n) { g_threads = std::max(1, n); }

template <typename T>
void gemm(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
          std::size_t n) {
    const int nt = num_threads();
#pragma omp parallel for num_threads(nt) schedule(static) if (nt > 1)
    for (idx i = 0; i < static_cast<idx>(m); ++i) {
        T* row = c.data() + i * n;
        std::fill(row, row + n, T(0));
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a[i * k + p];
            const T* brow = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
        }
    }
}

template <typename T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n) {
    const int nt = num_threads();
#pragma omp parallel for num_threads(nt) schedule(static) if (nt > 1)
    for (idx i = 0; i < static_cast<idx>(m); ++i) {
        const T* arow = a.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b.data() + j * k;
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] = acc;
        }
    }
}

template <typename T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n) {
    const int nt = num_threads();
#pragma omp parallel for num_threads(nt) schedule(static) if (nt > 1)
    for (idx i = 0; i < static_cast<idx>(m); ++i) {
        T* row = c.data() + i * n;
        std::fill(row, row + n, T(0));
        for (std::size_t p = 0; p < k; ++p) {
            const T api = a[p * m + i];
            const T* brow = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += api * brow[j];
        }
    }
}

template <typename T>
void conv2d_forward(std::span<const T> input, std::span<const T> weight, std::span<const T> bias,
                    std::span<T> out, const Conv2dGeometry& g) {
    const std::size_t ho = g.out_height(), wo = g.out_width(), kk = g.kernel;
    const idx h = static_cast<idx>(g.height), w = static_cast<idx>(g.width);
    const int nt = num_threads();
#pragma omp parallel for num_threads(nt) schedule(static) if (nt > 1)
    for (idx co = 0; co < static_cast<idx>(g.out_channels); ++co) {
        T* plane = out.data() + co * ho * wo;
        std::fill(plane, plane + ho * wo, bias[co]);
        for (std::size_t ci = 0; ci < g.channels; ++ci) {
            const T* in = input.data() + ci * g.height * g.width;
            for (std::size_t ky = 0; ky < kk; ++ky) {
                for (std::size_t kx = 0; kx < kk; ++kx) {
                    const T wv = weight[((co * g.channels + ci) * kk + ky) * kk + kx];
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        const idx iy = static_cast<idx>(oy * g.stride + ky) - static_cast<idx>(g.pad);
                        const bool row_in = iy >= 0 && iy < h;
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const idx ix = static_cast<idx>(ox * g.stride + kx) - static_cast<idx>(g.pad);
                            const T x = (row_in && ix >= 0 && ix < w) ? in[iy * w + ix] : T(0);
                            plane[oy * wo + ox] += wv * x;
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward_input(std::span<const T> grad_out, std::span<const T> weight, std::span<T> grad_in,
                           const Conv2dGeometry& g) {
    const std::size_t ho = g.out_height(), wo = g.out_width(), kk = g.kernel;
    const idx h = static_cast<idx>(g.height), w = static_cast<idx>(g.width);
    const int nt = num_threads();
#pragma omp parallel for num_threads(nt) schedule(static) if (nt > 1)
    for (idx ci = 0; ci < static_cast<idx>(g.channels); ++ci) {
        T* plane = grad_in.data() + ci * g.height * g.width;
        std::fill(plane, plane + g.height * g.width, T(0));
        for (std::size_t co = 0; co < g.out_channels; ++co) {
            const T* go = grad_out.data() + co * ho * wo;
            for (std::size_t ky = 0; ky < kk; ++ky) {
                for (std::size_t kx = 0; kx < kk; ++kx) {
                    const T wv = weight[((co * g.channels + ci) * kk + ky) * kk + kx];
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        const idx iy = static_cast<idx>(oy * g.stride + ky) - static_cast<idx>(g.pad);
                        if (iy < 0 || iy >= h) continue;
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const idx ix = static_cast<idx>(ox * g.stride + kx) - static_cast<idx>(g.pad);
                            if (ix < 0 || ix >= w) continue;
                            plane[iy * w + ix] += go[oy * wo + ox] * wv;
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward_weight(std::span<const T> grad_out, std::span<const T> input, std::span<T> grad_w,
                            std::span<T> grad_b, const Conv2dGeometry& g) {
    const std::size_t ho = g.out_height(), wo = g.out_width(), kk = g.kernel;
    const idx h = static_cast<idx>(g.height), w = static_cast<idx>(g.width);
    const int nt = num_threads();
#pragma omp parallel for num_threads(nt) schedule(static) if (nt > 1)
    for (idx co = 0; co < static_cast<idx>(g.out_channels); ++co) {
        const T* go = grad_out.data() + co * ho * wo;
        T bacc = T(0);
        for (std::size_t p = 0; p < ho * wo; ++p) bacc += go[p];
        grad_b[co] = bacc;
        for (std::size_t ci = 0; ci < g.channels; ++ci) {
            const T* in = input.data() + ci * g.height * g.width;
            for (std::size_t ky = 0; ky < kk; ++ky) {
                for (std::size_t kx = 0; kx < kk; ++kx) {
                    T acc = T(0);
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        const idx iy = static_cast<idx>(oy * g.stride + ky) - static_cast<idx>(g.pad);
                        if (iy < 0 || iy >= h) continue;
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const idx ix = static_cast<idx>(ox * g.stride + kx) - static_cast<idx>(g.pad);
                            if (ix < 0 || ix >= w) continue;
                            acc += go[oy * wo + ox] * in[iy * w + ix];
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

} // namespace kpu::kernels
