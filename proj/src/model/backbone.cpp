#include "kpu/model/backbone.hpp"

namespace kpu {

void BackboneConfig::validate() const {
    if (image_size == 0 || patch_size == 0 || image_size % patch_size)
        throw ConfigError("backbone: patch_size " + std::to_string(patch_size) + " must divide image_size " +
                          std::to_string(image_size));
    if (depth == 0) throw ConfigError("backbone: depth must be >= 1");
    if (heads == 0 || dim % heads)
        throw ConfigError("backbone: heads " + std::to_string(heads) + " must divide dim " + std::to_string(dim));
    if (!class_token) throw ConfigError("backbone: class token is required");
}

namespace nn {

template <typename T>
VitBlock<T>::VitBlock(std::size_t dim, std::size_t heads, std::size_t mlp_ratio, CounterRng& rng)
    : norm1_(dim), norm2_(dim), attn_(dim, heads, rng), fc1_(dim, dim * mlp_ratio, rng),
      fc2_(dim * mlp_ratio, dim, rng) {}

template <typename T>
Tensor<T> VitBlock<T>::operator()(const Tensor<T>& x) const {
    Tensor<T> h = add(x, attn_(norm1_(x)));
    return add(h, fc2_(gelu(fc1_(norm2_(h)))));
}

template <typename T>
void VitBlock<T>::collect(NamedTensors<T>& out, const std::string& prefix) const {
    norm1_.collect(out, prefix + ".norm1");
    attn_.collect(out, prefix + ".attn");
    norm2_.collect(out, prefix + ".norm2");
    fc1_.collect(out, prefix + ".mlp.fc1");
    fc2_.collect(out, prefix + ".mlp.fc2");
}

} // namespace nn

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    CounterRng rng(mix_key(seed, fnv1a("backbone")));
    patch_embed_ = nn::PatchEmbed<T>(config.channels, config.patch_size, config.dim, rng);
    // ViT-style small init for the learned embeddings.
    cls_token_ = nn::uniform_tensor<T>({1, config.dim}, 0.035, rng);
    pos_embed_ = nn::uniform_tensor<T>({config.tokens(), config.dim}, 0.035, rng);
    for (std::size_t i = 0; i < config.depth; ++i) blocks_.emplace_back(config.dim, config.heads, config.mlp_ratio, rng);
    norm_ = nn::LayerNorm<T>(config.dim);
}

template <typename T>
Tensor<T> Backbone<T>::embed(const Tensor<T>& image) const {
    if (image.rank() != 3 || image.dim(0) != config_.channels || image.dim(1) != config_.image_size ||
        image.dim(2) != config_.image_size)
        throw ShapeError("backbone: image " + to_string(image.shape()) + " does not match configured size " +
                         std::to_string(config_.image_size));
    Tensor<T> tokens = concat<T>({cls_token_, patch_embed_(image)}, 0);
    return add(tokens, pos_embed_);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> Backbone<T>::split_tokens(const Tensor<T>& x) const {
    const std::size_t g = config_.grid_size();
    Tensor<T> cls = reshape(slice(x, 0, 0, 1), {config_.dim});
    Tensor<T> grid = nn::tokens_to_grid(slice(x, 0, 1, x.dim(0)), g, g);
    return {cls, grid};
}

template <typename T>
FeatureSet<T> Backbone<T>::forward(const Tensor<T>& image) const {
    Tensor<T> x = embed(image);
    for (const auto& b : blocks_) x = b(x);
    auto [cls, grid] = split_tokens(final_norm(x));
    return FeatureSet<T>{cls, grid, LatentSpace::student()};
}

template <typename T>
NamedTensors<T> Backbone<T>::parameters() const {
    NamedTensors<T> out;
    patch_embed_.collect(out, "backbone.embed.patch");
    out.emplace_back("backbone.embed.cls_token", cls_token_);
    out.emplace_back("backbone.embed.pos_embed", pos_embed_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, "backbone.block" + std::to_string(i));
    norm_.collect(out, "backbone.norm");
    return out;
}

template class nn::VitBlock<float>;
template class nn::VitBlock<double>;
template class Backbone<float>;
template class Backbone<double>;

} // namespace kpu
