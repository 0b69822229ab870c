#include "kpu/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "kpu/kernels/kernels.hpp"

namespace kpu {

namespace {

template <typename T>
using Record = typename Tape<T>::Record;

template <typename T>
using Backward = std::function<void(const Record<T>&)>;

template <typename T>
void check_finite(const char* op, const std::vector<Tensor<T>>& inputs) {
    if (!nonfinite_guard()) return;
    for (const auto& t : inputs) {
        for (T v : t.data()) {
            if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": non-finite input value");
        }
    }
}

template <typename T>
Tensor<T> make_output(const char* op, Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                      Backward<T> backward) {
    check_finite(op, inputs);
    Tape<T>* tape = active_tape<T>();
    const bool track = tape != nullptr &&
                       std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
    Tensor<T> out(std::move(shape), std::move(data), track);
    if (track) {
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        nodes.reserve(inputs.size());
        for (const auto& t : inputs) nodes.push_back(t.node());
        tape->record(Record<T>{op, std::move(nodes), out.node(), std::move(backward)});
    }
    return out;
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

template <typename T>
void add_into(TensorNode<T>& node, const std::vector<T>& delta) {
    T* g = grad_buffer(node);
    if (!g) return;
    for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

template <typename T>
void require_same(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) shape_mismatch(op, a.shape(), b.shape());
}

template <typename T>
std::size_t last_dim(const Tensor<T>& a) {
    return a.shape().back();
}

} // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() != 2 || last_dim(a) != b.dim(0)) shape_mismatch("matmul", a.shape(), b.shape());
    const std::size_t k = b.dim(0), n = b.dim(1), m = a.size() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<T> out(m * n);
    kernels::gemm<T>(a.data(), b.data(), out, m, k, n);
    return make_output<T>("matmul", std::move(out_shape), std::move(out), {a, b}, [m, k, n](const Record<T>& r) {
        auto& A = *r.inputs[0];
        auto& B = *r.inputs[1];
        const auto& gc = r.output->grad;
        if (A.requires_grad) {
            std::vector<T> ga(m * k);
            kernels::gemm_nt<T>(gc, B.data, ga, m, n, k);
            add_into(A, ga);
        }
        if (B.requires_grad) {
            std::vector<T> gb(k * n);
            kernels::gemm_tn<T>(A.data, gc, gb, k, m, n);
            add_into(B, gb);
        }
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expects rank 2, got " + to_string(a.shape()));
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<T> out(r * c);
    const auto in = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
    return make_output<T>("transpose", Shape{c, r}, std::move(out), {a}, [r, c](const Record<T>& rec) {
        T* g = grad_buffer(*rec.inputs[0]);
        if (!g) return;
        const auto& go = rec.output->grad;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += go[j * r + i];
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same("add", a, b);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_output<T>("add", a.shape(), std::move(out), {a, b}, [](const Record<T>& r) {
        add_into(*r.inputs[0], r.output->grad);
        add_into(*r.inputs[1], r.output->grad);
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same("sub", a, b);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return make_output<T>("sub", a.shape(), std::move(out), {a, b}, [](const Record<T>& r) {
        add_into(*r.inputs[0], r.output->grad);
        if (T* g = grad_buffer(*r.inputs[1])) {
            const auto& go = r.output->grad;
            for (std::size_t i = 0; i < go.size(); ++i) g[i] -= go[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same("mul", a, b);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_output<T>("mul", a.shape(), std::move(out), {a, b}, [](const Record<T>& r) {
        auto& A = *r.inputs[0];
        auto& B = *r.inputs[1];
        const auto& go = r.output->grad;
        if (T* g = grad_buffer(A))
            for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * B.data[i];
        if (T* g = grad_buffer(B))
            for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * A.data[i];
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return make_output<T>("scale", a.shape(), std::move(out), {a}, [s](const Record<T>& r) {
        T* g = grad_buffer(*r.inputs[0]);
        if (!g) return;
        const auto& go = r.output->grad;
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * s;
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
    return make_output<T>("add_scalar", a.shape(), std::move(out), {a},
                          [](const Record<T>& r) { add_into(*r.inputs[0], r.output->grad); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
    if (s.size() != 1) throw ShapeError("mul_scalar: scale must have one element, got " + to_string(s.shape()));
    const T sv = s[0];
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * sv;
    return make_output<T>("mul_scalar", a.shape(), std::move(out), {a, s}, [](const Record<T>& r) {
        auto& A = *r.inputs[0];
        auto& S = *r.inputs[1];
        const auto& go = r.output->grad;
        if (T* g = grad_buffer(A))
            for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * S.data[0];
        if (T* g = grad_buffer(S)) {
            T acc = T(0);
            for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * A.data[i];
            g[0] += acc;
        }
    });
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& target) {
    const Shape& s = a.shape();
    if (target.size() < s.size() || !std::equal(s.begin(), s.end(), target.end() - s.size()))
        shape_mismatch("broadcast", s, target);
    const std::size_t inner = a.size(), reps = numel(target) / inner;
    std::vector<T> out(reps * inner);
    for (std::size_t r = 0; r < reps; ++r) std::copy(a.data().begin(), a.data().end(), out.begin() + r * inner);
    return make_output<T>("broadcast", target, std::move(out), {a}, [inner, reps](const Record<T>& rec) {
        T* g = grad_buffer(*rec.inputs[0]);
        if (!g) return;
        const auto& go = rec.output->grad;
        for (std::size_t r = 0; r < reps; ++r)
            for (std::size_t i = 0; i < inner; ++i) g[i] += go[r * inner + i];
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (T v : a.data()) acc += v;
    return make_output<T>("sum", Shape{1}, {acc}, {a}, [](const Record<T>& r) {
        T* g = grad_buffer(*r.inputs[0]);
        if (!g) return;
        const T go = r.output->grad[0];
        for (std::size_t i = 0; i < r.inputs[0]->data.size(); ++i) g[i] += go;
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    T acc = T(0);
    for (T v : a.data()) acc += v;
    const T n = static_cast<T>(a.size());
    return make_output<T>("mean", Shape{1}, {acc / n}, {a}, [n](const Record<T>& r) {
        T* g = grad_buffer(*r.inputs[0]);
        if (!g) return;
        const T go = r.output->grad[0] / n;
        for (std::size_t i = 0; i < r.inputs[0]->data.size(); ++i) g[i] += go;
    });
}

template <typename T>
Tensor<T> mean_leading(const Tensor<T>& a) {
    const std::size_t d = last_dim(a), rows = a.size() / d;
    std::vector<T> out(d, T(0));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) out[j] += a[r * d + j];
    const T n = static_cast<T>(rows);
    for (T& v : out) v /= n;
    return make_output<T>("mean_leading", Shape{d}, std::move(out), {a}, [d, rows, n](const Record<T>& rec) {
        T* g = grad_buffer(*rec.inputs[0]);
        if (!g) return;
        const auto& go = rec.output->grad;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += go[j] / n;
    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts.front().shape();
    const std::size_t rank = first.size();
    if (axis != 0 && axis != rank - 1) throw ShapeError("concat: axis must be 0 or last");
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) shape_mismatch("concat", first, p.shape());
        for (std::size_t ax = 0; ax < rank; ++ax)
            if (ax != axis && p.dim(ax) != first[ax]) shape_mismatch("concat", first, p.shape());
        out_shape[axis] += p.dim(axis);
    }
    // Treat every tensor as [outer x width_i] blocks along the concat axis.
    const std::size_t outer = axis == 0 ? 1 : numel(first) / first.back();
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.size() / outer);
    const std::size_t total_width = numel(out_shape) / outer;
    std::vector<T> out(numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const auto src = parts[pi].data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(src.begin() + o * widths[pi], widths[pi], out.begin() + o * total_width + offset);
        offset += widths[pi];
    }
    return make_output<T>("concat", std::move(out_shape), std::move(out), parts,
                          [outer, widths, total_width](const Record<T>& r) {
                              std::size_t off = 0;
                              const auto& go = r.output->grad;
                              for (std::size_t pi = 0; pi < r.inputs.size(); ++pi) {
                                  if (T* g = grad_buffer(*r.inputs[pi])) {
                                      for (std::size_t o = 0; o < outer; ++o)
                                          for (std::size_t i = 0; i < widths[pi]; ++i)
                                              g[o * widths[pi] + i] += go[o * total_width + off + i];
                                  }
                                  off += widths[pi];
                              }
                          });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
    const std::size_t rank = a.rank();
    if (axis != 0 && axis != rank - 1) throw ShapeError("slice: axis must be 0 or last");
    if (begin >= end || end > a.dim(axis))
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of bounds for " +
                         to_string(a.shape()));
    Shape out_shape = a.shape();
    out_shape[axis] = end - begin;
    const std::size_t outer = axis == 0 ? 1 : a.size() / a.shape().back();
    const std::size_t in_width = a.size() / outer;
    const std::size_t unit = in_width / a.dim(axis); // contiguous elements per index on this axis
    const std::size_t width = (end - begin) * unit, start = begin * unit;
    std::vector<T> out(outer * width);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(a.data().begin() + o * in_width + start, width, out.begin() + o * width);
    return make_output<T>("slice", std::move(out_shape), std::move(out), {a},
                          [outer, in_width, width, start](const Record<T>& r) {
                              T* g = grad_buffer(*r.inputs[0]);
                              if (!g) return;
                              const auto& go = r.output->grad;
                              for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t i = 0; i < width; ++i) g[o * in_width + start + i] += go[o * width + i];
                          });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.size()) shape_mismatch("reshape", a.shape(), shape);
    std::vector<T> out(a.data().begin(), a.data().end());
    return make_output<T>("reshape", std::move(shape), std::move(out), {a},
                          [](const Record<T>& r) { add_into(*r.inputs[0], r.output->grad); });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
    const std::size_t d = last_dim(a), rows = a.size() / d;
    std::vector<T> out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a.data().data() + r * d;
        T* y = out.data() + r * d;
        T mx = x[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
        T z = T(0);
        for (std::size_t j = 0; j < d; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (std::size_t j = 0; j < d; ++j) y[j] /= z;
    }
    return make_output<T>("softmax", a.shape(), std::move(out), {a}, [d, rows](const Record<T>& rec) {
        T* g = grad_buffer(*rec.inputs[0]);
        if (!g) return;
        const auto& y = rec.output->data;
        const auto& go = rec.output->grad;
        for (std::size_t r = 0; r < rows; ++r) {
            T dot = T(0);
            for (std::size_t j = 0; j < d; ++j) dot += go[r * d + j] * y[r * d + j];
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += y[r * d + j] * (go[r * d + j] - dot);
        }
    });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = a[i];
        out[i] = T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
    }
    return make_output<T>("gelu", a.shape(), std::move(out), {a}, [](const Record<T>& r) {
        auto& A = *r.inputs[0];
        T* g = grad_buffer(A);
        if (!g) return;
        const auto& go = r.output->grad;
        const T inv_sqrt_2pi = T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
        for (std::size_t i = 0; i < go.size(); ++i) {
            const T x = A.data[i];
            const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
            g[i] += go[i] * (cdf + x * pdf);
        }
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
    return make_output<T>("relu", a.shape(), std::move(out), {a}, [](const Record<T>& r) {
        auto& A = *r.inputs[0];
        T* g = grad_buffer(A);
        if (!g) return;
        const auto& go = r.output->grad;
        for (std::size_t i = 0; i < go.size(); ++i)
            if (A.data[i] > T(0)) g[i] += go[i];
    });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (a[i] < T(0)) throw Error("sqrt: negative input");
        out[i] = std::sqrt(a[i]);
    }
    return make_output<T>("sqrt", a.shape(), std::move(out), {a}, [](const Record<T>& r) {
        T* g = grad_buffer(*r.inputs[0]);
        if (!g) return;
        const auto& y = r.output->data;
        const auto& go = r.output->grad;
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * T(0.5) / y[i];
    });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * a[i];
    return make_output<T>("square", a.shape(), std::move(out), {a}, [](const Record<T>& r) {
        auto& A = *r.inputs[0];
        T* g = grad_buffer(A);
        if (!g) return;
        const auto& go = r.output->grad;
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * T(2) * A.data[i];
    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a) {
    const std::size_t d = last_dim(a), rows = a.size() / d;
    const T eps = T(kLayerNormEps);
    std::vector<T> out(a.size());
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a.data().data() + r * d;
        T mu = T(0);
        for (std::size_t j = 0; j < d; ++j) mu += x[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (x[j] - mu) * inv;
    }
    return make_output<T>("layer_norm", a.shape(), std::move(out), {a},
                          [d, rows, inv_std = std::move(inv_std)](const Record<T>& rec) {
                              T* g = grad_buffer(*rec.inputs[0]);
                              if (!g) return;
                              const auto& y = rec.output->data;
                              const auto& go = rec.output->grad;
                              const T n = static_cast<T>(d);
                              for (std::size_t r = 0; r < rows; ++r) {
                                  T mg = T(0), mgy = T(0);
                                  for (std::size_t j = 0; j < d; ++j) {
                                      mg += go[r * d + j];
                                      mgy += go[r * d + j] * y[r * d + j];
                                  }
                                  mg /= n;
                                  mgy /= n;
                                  for (std::size_t j = 0; j < d; ++j)
                                      g[r * d + j] += inv_std[r] * (go[r * d + j] - mg - y[r * d + j] * mgy);
                              }
                          });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride, std::size_t pad) {
    if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1 || w.dim(1) != x.dim(0) || w.dim(2) != w.dim(3) ||
        b.dim(0) != w.dim(0))
        throw ShapeError("conv2d: incompatible shapes input " + to_string(x.shape()) + " weight " +
                         to_string(w.shape()) + " bias " + to_string(b.shape()));
    if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
    const kernels::Conv2dGeometry g{x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(2), stride, pad};
    if (x.dim(1) + 2 * pad < g.kernel || x.dim(2) + 2 * pad < g.kernel)
        throw ShapeError("conv2d: kernel " + std::to_string(g.kernel) + " does not fit input " + to_string(x.shape()));
    Shape out_shape{g.out_channels, g.out_height(), g.out_width()};
    std::vector<T> out(numel(out_shape));
    kernels::conv2d_forward<T>(x.data(), w.data(), b.data(), out, g);
    return make_output<T>("conv2d", std::move(out_shape), std::move(out), {x, w, b}, [g](const Record<T>& r) {
        auto& X = *r.inputs[0];
        auto& W = *r.inputs[1];
        auto& B = *r.inputs[2];
        const auto& go = r.output->grad;
        if (X.requires_grad) {
            std::vector<T> gx(X.data.size());
            kernels::conv2d_backward_input<T>(go, W.data, gx, g);
            add_into(X, gx);
        }
        if (W.requires_grad || B.requires_grad) {
            std::vector<T> gw(W.data.size()), gb(B.data.size());
            kernels::conv2d_backward_weight<T>(go, X.data, gw, gb, g);
            add_into(W, gw);
            add_into(B, gb);
        }
    });
}

namespace {

struct Tap {
    std::size_t i0, i1;
    double f; // weight of i1
};

Tap corner_aligned(std::size_t out_index, std::size_t in_size, std::size_t out_size) {
    if (out_size == 1 || in_size == 1) return {0, 0, 0.0};
    const double pos = static_cast<double>(out_index) * static_cast<double>(in_size - 1) /
                       static_cast<double>(out_size - 1);
    auto i0 = static_cast<std::size_t>(std::floor(pos));
    i0 = std::min(i0, in_size - 1);
    const std::size_t i1 = std::min(i0 + 1, in_size - 1);
    return {i0, i1, pos - static_cast<double>(i0)};
}

} // namespace

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& grid, std::size_t out_h, std::size_t out_w) {
    if (grid.rank() != 3 || out_h == 0 || out_w == 0)
        throw ShapeError("bilinear_resize: expects [H,W,D] grid and positive target, got " + to_string(grid.shape()));
    const std::size_t h = grid.dim(0), w = grid.dim(1), d = grid.dim(2);
    Shape out_shape{out_h, out_w, d};
    if (h == out_h && w == out_w) {
        std::vector<T> out(grid.data().begin(), grid.data().end());
        return make_output<T>("bilinear_resize", std::move(out_shape), std::move(out), {grid},
                              [](const Record<T>& r) { add_into(*r.inputs[0], r.output->grad); });
    }
    std::vector<Tap> ty(out_h), tx(out_w);
    for (std::size_t i = 0; i < out_h; ++i) ty[i] = corner_aligned(i, h, out_h);
    for (std::size_t i = 0; i < out_w; ++i) tx[i] = corner_aligned(i, w, out_w);
    std::vector<T> out(out_h * out_w * d);
    const auto in = grid.data();
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        const T fy = static_cast<T>(ty[oy].f);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            const T fx = static_cast<T>(tx[ox].f);
            const T w00 = (T(1) - fy) * (T(1) - fx), w01 = (T(1) - fy) * fx, w10 = fy * (T(1) - fx), w11 = fy * fx;
            const T* v00 = in.data() + (ty[oy].i0 * w + tx[ox].i0) * d;
            const T* v01 = in.data() + (ty[oy].i0 * w + tx[ox].i1) * d;
            const T* v10 = in.data() + (ty[oy].i1 * w + tx[ox].i0) * d;
            const T* v11 = in.data() + (ty[oy].i1 * w + tx[ox].i1) * d;
            T* o = out.data() + (oy * out_w + ox) * d;
            for (std::size_t c = 0; c < d; ++c) o[c] = w00 * v00[c] + w01 * v01[c] + w10 * v10[c] + w11 * v11[c];
        }
    }
    return make_output<T>("bilinear_resize", std::move(out_shape), std::move(out), {grid},
                          [ty, tx, w, d, out_w](const Record<T>& r) {
                              T* g = grad_buffer(*r.inputs[0]);
                              if (!g) return;
                              const auto& go = r.output->grad;
                              for (std::size_t oy = 0; oy < ty.size(); ++oy) {
                                  const T fy = static_cast<T>(ty[oy].f);
                                  for (std::size_t ox = 0; ox < tx.size(); ++ox) {
                                      const T fx = static_cast<T>(tx[ox].f);
                                      const T w00 = (T(1) - fy) * (T(1) - fx), w01 = (T(1) - fy) * fx,
                                              w10 = fy * (T(1) - fx), w11 = fy * fx;
                                      const T* o = go.data() + (oy * out_w + ox) * d;
                                      T* g00 = g + (ty[oy].i0 * w + tx[ox].i0) * d;
                                      T* g01 = g + (ty[oy].i0 * w + tx[ox].i1) * d;
                                      T* g10 = g + (ty[oy].i1 * w + tx[ox].i0) * d;
                                      T* g11 = g + (ty[oy].i1 * w + tx[ox].i1) * d;
                                      for (std::size_t c = 0; c < d; ++c) {
                                          g00[c] += w00 * o[c];
                                          g01[c] += w01 * o[c];
                                          g10[c] += w10 * o[c];
                                          g11[c] += w11 * o[c];
                                      }
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> row_cosine(const Tensor<T>& a, const Tensor<T>& b, T eps) {
    require_same("row_cosine", a, b);
    const std::size_t d = last_dim(a), rows = a.size() / d;
    std::vector<T> out(rows), na(rows), nb(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T dot = T(0), sa = T(0), sb = T(0);
        for (std::size_t j = 0; j < d; ++j) {
            const T x = a[r * d + j], y = b[r * d + j];
            dot += x * y;
            sa += x * x;
            sb += y * y;
        }
        na[r] = std::sqrt(sa);
        nb[r] = std::sqrt(sb);
        const bool degenerate = na[r] < eps || nb[r] < eps;
        // sqrt(sa * sb) is exact for identical rows, so cos(x, x) == 1 exactly.
        T denom = std::sqrt(sa * sb);
        if (!std::isfinite(denom)) denom = na[r] * nb[r];
        out[r] = degenerate ? T(0) : dot / denom;
    }
    return make_output<T>("row_cosine", Shape{rows}, std::move(out), {a, b},
                          [d, rows, eps, na = std::move(na), nb = std::move(nb)](const Record<T>& rec) {
                              auto& A = *rec.inputs[0];
                              auto& B = *rec.inputs[1];
                              T* ga = grad_buffer(A);
                              T* gb = grad_buffer(B);
                              const auto& c = rec.output->data;
                              const auto& go = rec.output->grad;
                              for (std::size_t r = 0; r < rows; ++r) {
                                  if (na[r] < eps || nb[r] < eps) continue;
                                  const T inv_ab = T(1) / (na[r] * nb[r]);
                                  const T ca = c[r] / (na[r] * na[r]), cb = c[r] / (nb[r] * nb[r]);
                                  for (std::size_t j = 0; j < d; ++j) {
                                      const T x = A.data[r * d + j], y = B.data[r * d + j];
                                      if (ga) ga[r * d + j] += go[r] * (y * inv_ab - ca * x);
                                      if (gb) gb[r * d + j] += go[r] * (x * inv_ab - cb * y);
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& a, const Tensor<T>& b, T beta) {
    require_same("smooth_l1", a, b);
    if (!(beta > T(0))) throw Error("smooth_l1: beta must be positive");
    T acc = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T diff = a[i] - b[i];
        const T ad = std::abs(diff);
        acc += ad < beta ? T(0.5) * diff * diff / beta : ad - T(0.5) * beta;
    }
    const T n = static_cast<T>(a.size());
    return make_output<T>("smooth_l1", Shape{1}, {acc / n}, {a, b}, [beta, n](const Record<T>& r) {
        auto& A = *r.inputs[0];
        auto& B = *r.inputs[1];
        T* ga = grad_buffer(A);
        T* gb = grad_buffer(B);
        const T sign = fault_injected("smooth_l1") ? T(-1) : T(1);
        const T go = sign * r.output->grad[0] / n;
        for (std::size_t i = 0; i < A.data.size(); ++i) {
            const T diff = A.data[i] - B.data[i];
            T dd;
            if (std::abs(diff) < beta)
                dd = diff / beta;
            else
                dd = diff > T(0) ? T(1) : T(-1);
            if (ga) ga[i] += go * dd;
            if (gb) gb[i] -= go * dd;
        }
    });
}

#define KPU_INSTANTIATE(T)                                                                          \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> transpose(const Tensor<T>&);                                                 \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> scale(const Tensor<T>&, T);                                                  \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                             \
    template Tensor<T> mul_scalar(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> broadcast_to(const Tensor<T>&, const Shape&);                                \
    template Tensor<T> sum(const Tensor<T>&);                                                       \
    template Tensor<T> mean(const Tensor<T>&);                                                      \
    template Tensor<T> mean_leading(const Tensor<T>&);                                              \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                          \
    template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);              \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                            \
    template Tensor<T> softmax(const Tensor<T>&);                                                   \
    template Tensor<T> gelu(const Tensor<T>&);                                                      \
    template Tensor<T> relu(const Tensor<T>&);                                                      \
    template Tensor<T> sqrt(const Tensor<T>&);                                                      \
    template Tensor<T> square(const Tensor<T>&);                                                    \
    template Tensor<T> layer_norm(const Tensor<T>&);                                                \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,    \
                              std::size_t);                                                         \
    template Tensor<T> bilinear_resize(const Tensor<T>&, std::size_t, std::size_t);                 \
    template Tensor<T> row_cosine(const Tensor<T>&, const Tensor<T>&, T);                           \
    template Tensor<T> smooth_l1(const Tensor<T>&, const Tensor<T>&, T);

KPU_INSTANTIATE(float)
KPU_INSTANTIATE(double)
#undef KPU_INSTANTIATE

} // namespace kpu
