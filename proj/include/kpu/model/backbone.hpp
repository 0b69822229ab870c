#pragma once

#include <cstdint>
#include <vector>

#include "kpu/nn/layers.hpp"

namespace kpu {

struct BackboneConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t depth = 4;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t channels = 3;
    std::size_t mlp_ratio = 4;
    bool class_token = true;

    std::size_t grid_size() const { return image_size / patch_size; }
    std::size_t tokens() const { return grid_size() * grid_size() + (class_token ? 1 : 0); }
    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

namespace nn {

/// Pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(x)).
template <typename T>
class VitBlock {
public:
    VitBlock() = default;
    VitBlock(std::size_t dim, std::size_t heads, std::size_t mlp_ratio, CounterRng& rng);

    Tensor<T> operator()(const Tensor<T>& x) const;
    void collect(NamedTensors<T>& out, const std::string& prefix) const;

private:
    LayerNorm<T> norm1_, norm2_;
    SelfAttention<T> attn_;
    Linear<T> fc1_, fc2_;
};

} // namespace nn

/// Small ViT: patch embedding, class token, learned positions, blocks, final norm.
/// Shared by the student backbone and tiny-vit teachers (including the sentinel).
template <typename T>
class Backbone {
public:
    Backbone() = default;
    Backbone(const BackboneConfig& config, std::uint64_t seed);

    const BackboneConfig& config() const { return config_; }

    /// [3 x H x W] -> [(1 + N) x D]: class token first, then patch tokens in raster order.
    Tensor<T> embed(const Tensor<T>& image) const;
    Tensor<T> block(std::size_t index, const Tensor<T>& x) const { return blocks_.at(index)(x); }
    Tensor<T> final_norm(const Tensor<T>& x) const { return norm_(x); }

    /// Splits final tokens into (class token [D], patch grid [h x w x D]).
    std::pair<Tensor<T>, Tensor<T>> split_tokens(const Tensor<T>& x) const;

    /// Plain forward pass with no adapter; grid + class token, tagged student-native.
    FeatureSet<T> forward(const Tensor<T>& image) const;

    /// Names follow backbone.<component>.<param>.
    NamedTensors<T> parameters() const;

private:
    BackboneConfig config_;
    nn::PatchEmbed<T> patch_embed_;
    Tensor<T> cls_token_;
    Tensor<T> pos_embed_;
    std::vector<nn::VitBlock<T>> blocks_;
    nn::LayerNorm<T> norm_;
};

} // namespace kpu
