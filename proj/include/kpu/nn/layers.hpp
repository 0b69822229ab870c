#pragma once

#include <string>

#include "kpu/autodiff/ops.hpp"
#include "kpu/model/feature_set.hpp"
#include "kpu/rng.hpp"

namespace kpu::nn {

/// Uniform(-bound, bound) tensor drawn from `rng`.
template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, CounterRng& rng, bool requires_grad = true);

template <typename T>
void set_requires_grad(NamedTensors<T>& params, bool on) {
    for (auto& [name, t] : params) t.set_requires_grad(on);
}

template <typename T>
class Linear {
public:
    Linear() = default;
    /// PyTorch-style init: weight and bias ~ U(-1/sqrt(in), 1/sqrt(in)).
    Linear(std::size_t in_dim, std::size_t out_dim, CounterRng& rng);

    std::size_t in_dim() const { return weight_.dim(1); }
    std::size_t out_dim() const { return weight_.dim(0); }

    /// [..., in] -> [..., out]; rank-1 inputs are treated as a single row.
    Tensor<T> operator()(const Tensor<T>& x) const;

    void collect(NamedTensors<T>& out, const std::string& prefix) const;

    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }
    const Tensor<T>& weight() const { return weight_; }
    const Tensor<T>& bias() const { return bias_; }

private:
    Tensor<T> weight_; // [out x in]
    Tensor<T> bias_;   // [out]
};

/// Layer norm over the last axis with learnable gain and shift.
template <typename T>
class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim);

    Tensor<T> operator()(const Tensor<T>& x) const;
    void collect(NamedTensors<T>& out, const std::string& prefix) const;

private:
    Tensor<T> gain_;
    Tensor<T> shift_;
};

/// Two linear layers with gelu between. Hidden width defaults to max(in, out).
template <typename T>
class MlpHead {
public:
    MlpHead() = default;
    MlpHead(std::size_t in_dim, std::size_t out_dim, CounterRng& rng, std::size_t hidden_dim = 0);

    std::size_t in_dim() const { return fc1_.in_dim(); }
    std::size_t out_dim() const { return fc2_.out_dim(); }
    std::size_t hidden_dim() const { return fc1_.out_dim(); }

    Tensor<T> operator()(const Tensor<T>& x) const;

    /// Position-wise on the grid and, when present, on the global vector.
    FeatureSet<T> project(const FeatureSet<T>& fs) const;

    /// Makes the head compute (numerically) the identity: requires in == out == hidden.
    /// fc1 = I with bias +shift keeps gelu in its linear regime, fc2 = I removes the shift.
    void set_identity(T shift = T(20));

    void collect(NamedTensors<T>& out, const std::string& prefix) const;

    Linear<T>& fc1() { return fc1_; }
    Linear<T>& fc2() { return fc2_; }

private:
    Linear<T> fc1_;
    Linear<T> fc2_;
};

/// Scaled dot-product attention over already-projected q [Nq x D], k, v [Nk x D].
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads);

/// Self-attention with separate q/k/v/out projections (backbone blocks).
template <typename T>
class SelfAttention {
public:
    SelfAttention() = default;
    SelfAttention(std::size_t dim, std::size_t heads, CounterRng& rng);

    Tensor<T> operator()(const Tensor<T>& x) const;
    void collect(NamedTensors<T>& out, const std::string& prefix) const;

private:
    Linear<T> q_, k_, v_, o_;
    std::size_t heads_ = 1;
};

/// queries + gate * Out(Attn(Q(queries), K(kv), V(kv))).
template <typename T>
class CrossAttentionBlock {
public:
    CrossAttentionBlock() = default;
    CrossAttentionBlock(std::size_t dim, std::size_t heads, T gate_init, CounterRng& rng);

    Tensor<T> operator()(const Tensor<T>& queries, const Tensor<T>& keys_values) const;
    /// The attention branch without residual or gate.
    Tensor<T> attend(const Tensor<T>& queries, const Tensor<T>& keys_values) const;

    void collect(NamedTensors<T>& out, const std::string& prefix) const;

    std::size_t dim() const { return q_.in_dim(); }
    std::size_t heads() const { return heads_; }
    Tensor<T>& gate() { return gate_; }
    const Tensor<T>& gate() const { return gate_; }
    Linear<T>& q() { return q_; }
    Linear<T>& k() { return k_; }
    Linear<T>& v() { return v_; }
    Linear<T>& o() { return o_; }

private:
    Linear<T> q_, k_, v_, o_;
    std::size_t heads_ = 1;
    Tensor<T> gate_;
};

/// Strided convolution with zero padding kernel/2, so output size is ceil(H / stride) for odd kernels.
template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
           CounterRng& rng, std::optional<std::size_t> pad = std::nullopt);

    Tensor<T> operator()(const Tensor<T>& x) const;
    void collect(NamedTensors<T>& out, const std::string& prefix) const;

    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }
    std::size_t stride() const { return stride_; }

private:
    Tensor<T> weight_; // [Co x C x k x k]
    Tensor<T> bias_;
    std::size_t stride_ = 1;
    std::size_t pad_ = 0;
};

/// Non-overlapping P x P patches of a [3 x H x W] image projected to D, raster order.
template <typename T>
class PatchEmbed {
public:
    PatchEmbed() = default;
    PatchEmbed(std::size_t channels, std::size_t patch, std::size_t dim, CounterRng& rng);

    Tensor<T> operator()(const Tensor<T>& image) const; // -> [N x D]
    void collect(NamedTensors<T>& out, const std::string& prefix) const;

    std::size_t patch() const { return patch_; }
    Conv2d<T>& proj() { return proj_; }

private:
    Conv2d<T> proj_;
    std::size_t patch_ = 1;
};

/// [C x h x w] feature map -> [h*w x C] tokens, and back.
template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map);
template <typename T>
Tensor<T> tokens_to_grid(const Tensor<T>& tokens, std::size_t h, std::size_t w);

} // namespace kpu::nn
