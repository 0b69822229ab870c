#include "kpu/nn/layers.hpp"

#include <cmath>

namespace kpu {

std::string LatentSpace::str() const {
    switch (kind) {
    case Kind::student_native: return "student-native";
    case Kind::unified: return "unified";
    case Kind::teacher_native: return "teacher-native:" + teacher;
    }
    return "?";
}

bool comparable(const LatentSpace& a, const LatentSpace& b) {
    auto shared = [](const LatentSpace& s) { return s.kind != LatentSpace::Kind::teacher_native; };
    if (shared(a) && shared(b)) return true;
    return a == b;
}

} // namespace kpu

namespace kpu::nn {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, CounterRng& rng, bool requires_grad) {
    std::vector<T> data(numel(shape));
    for (T& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Linear<T>::Linear(std::size_t in_dim, std::size_t out_dim, CounterRng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    weight_ = uniform_tensor<T>({out_dim, in_dim}, bound, rng);
    bias_ = uniform_tensor<T>({out_dim}, bound, rng);
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
    if (x.shape().back() != in_dim())
        throw ShapeError("linear: input " + to_string(x.shape()) + " does not end in " + std::to_string(in_dim()));
    if (x.rank() == 1) return reshape((*this)(reshape(x, {1, x.size()})), {out_dim()});
    Tensor<T> y = matmul(x, transpose(weight_));
    return add(y, broadcast_to(bias_, y.shape()));
}

template <typename T>
void Linear<T>::collect(NamedTensors<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight_);
    out.emplace_back(prefix + ".bias", bias_);
}

template <typename T>
LayerNorm<T>::LayerNorm(std::size_t dim)
    : gain_(Tensor<T>::full({dim}, T(1), true)), shift_(Tensor<T>::zeros({dim}, true)) {}

template <typename T>
Tensor<T> LayerNorm<T>::operator()(const Tensor<T>& x) const {
    Tensor<T> n = layer_norm(x);
    return add(mul(n, broadcast_to(gain_, n.shape())), broadcast_to(shift_, n.shape()));
}

template <typename T>
void LayerNorm<T>::collect(NamedTensors<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", gain_);
    out.emplace_back(prefix + ".bias", shift_);
}

template <typename T>
MlpHead<T>::MlpHead(std::size_t in_dim, std::size_t out_dim, CounterRng& rng, std::size_t hidden_dim) {
    if (hidden_dim == 0) hidden_dim = std::max(in_dim, out_dim);
    fc1_ = Linear<T>(in_dim, hidden_dim, rng);
    fc2_ = Linear<T>(hidden_dim, out_dim, rng);
}

template <typename T>
Tensor<T> MlpHead<T>::operator()(const Tensor<T>& x) const {
    return fc2_(gelu(fc1_(x)));
}

template <typename T>
FeatureSet<T> MlpHead<T>::project(const FeatureSet<T>& fs) const {
    if (fs.channels() != in_dim())
        throw ShapeError("mlp_project: feature dim " + std::to_string(fs.channels()) + " != head input " +
                         std::to_string(in_dim()));
    FeatureSet<T> out{std::nullopt, (*this)(fs.grid), fs.space};
    if (fs.global) out.global = (*this)(*fs.global);
    return out;
}

template <typename T>
void MlpHead<T>::set_identity(T shift) {
    if (in_dim() != out_dim() || hidden_dim() != in_dim())
        throw ShapeError("mlp head: identity construction needs in == hidden == out");
    const std::size_t d = in_dim();
    for (Linear<T>* l : {&fc1_, &fc2_}) {
        auto w = l->weight().mutable_data();
        std::fill(w.begin(), w.end(), T(0));
        for (std::size_t i = 0; i < d; ++i) w[i * d + i] = T(1);
    }
    auto b1 = fc1_.bias().mutable_data();
    auto b2 = fc2_.bias().mutable_data();
    std::fill(b1.begin(), b1.end(), shift);
    std::fill(b2.begin(), b2.end(), -shift);
}

template <typename T>
void MlpHead<T>::collect(NamedTensors<T>& out, const std::string& prefix) const {
    fc1_.collect(out, prefix + ".fc1");
    fc2_.collect(out, prefix + ".fc2");
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads) {
    if (q.rank() != 2 || k.rank() != 2 || v.shape() != k.shape() || q.dim(1) != k.dim(1))
        throw ShapeError("attention: incompatible q " + to_string(q.shape()) + " k " + to_string(k.shape()) + " v " +
                         to_string(v.shape()));
    const std::size_t d = q.dim(1);
    if (heads == 0 || d % heads != 0)
        throw ShapeError("attention: " + std::to_string(heads) + " heads do not divide dim " + std::to_string(d));
    const std::size_t dh = d / heads;
    const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Tensor<T>> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor<T> qh = heads == 1 ? q : slice(q, 1, h * dh, (h + 1) * dh);
        Tensor<T> kh = heads == 1 ? k : slice(k, 1, h * dh, (h + 1) * dh);
        Tensor<T> vh = heads == 1 ? v : slice(v, 1, h * dh, (h + 1) * dh);
        Tensor<T> scores = scale(matmul(qh, transpose(kh)), scale_factor);
        outs.push_back(matmul(softmax(scores), vh));
    }
    return heads == 1 ? outs.front() : concat(outs, 1);
}

template <typename T>
SelfAttention<T>::SelfAttention(std::size_t dim, std::size_t heads, CounterRng& rng)
    : q_(dim, dim, rng), k_(dim, dim, rng), v_(dim, dim, rng), o_(dim, dim, rng), heads_(heads) {
    if (heads == 0 || dim % heads) throw ShapeError("self-attention: heads must divide dim");
}

template <typename T>
Tensor<T> SelfAttention<T>::operator()(const Tensor<T>& x) const {
    return o_(multi_head_attention(q_(x), k_(x), v_(x), heads_));
}

template <typename T>
void SelfAttention<T>::collect(NamedTensors<T>& out, const std::string& prefix) const {
    q_.collect(out, prefix + ".q");
    k_.collect(out, prefix + ".k");
    v_.collect(out, prefix + ".v");
    o_.collect(out, prefix + ".o");
}

template <typename T>
CrossAttentionBlock<T>::CrossAttentionBlock(std::size_t dim, std::size_t heads, T gate_init, CounterRng& rng)
    : q_(dim, dim, rng), k_(dim, dim, rng), v_(dim, dim, rng), o_(dim, dim, rng), heads_(heads),
      gate_(Tensor<T>::scalar(gate_init, true)) {
    if (heads == 0 || dim % heads)
        throw ShapeError("cross-attention: " + std::to_string(heads) + " heads do not divide dim " +
                         std::to_string(dim));
    if (!std::isfinite(gate_init)) throw Error("cross-attention: gate init must be finite");
}

template <typename T>
Tensor<T> CrossAttentionBlock<T>::attend(const Tensor<T>& queries, const Tensor<T>& keys_values) const {
    if (queries.rank() != 2 || keys_values.rank() != 2 || queries.dim(1) != dim() || keys_values.dim(1) != dim())
        throw ShapeError("cross-attention: inputs " + to_string(queries.shape()) + " and " +
                         to_string(keys_values.shape()) + " do not match dim " + std::to_string(dim()));
    return o_(multi_head_attention(q_(queries), k_(keys_values), v_(keys_values), heads_));
}

template <typename T>
Tensor<T> CrossAttentionBlock<T>::operator()(const Tensor<T>& queries, const Tensor<T>& keys_values) const {
    return add(queries, mul_scalar(attend(queries, keys_values), gate_));
}

template <typename T>
void CrossAttentionBlock<T>::collect(NamedTensors<T>& out, const std::string& prefix) const {
    q_.collect(out, prefix + ".q");
    k_.collect(out, prefix + ".k");
    v_.collect(out, prefix + ".v");
    o_.collect(out, prefix + ".o");
    out.emplace_back(prefix + ".gate", gate_);
}

template <typename T>
Conv2d<T>::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                  CounterRng& rng, std::optional<std::size_t> pad)
    : stride_(stride), pad_(pad.value_or(kernel / 2)) {
    if (kernel == 0 || stride == 0) throw ShapeError("conv2d: kernel and stride must be positive");
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * kernel * kernel));
    weight_ = uniform_tensor<T>({out_channels, in_channels, kernel, kernel}, bound, rng);
    bias_ = uniform_tensor<T>({out_channels}, bound, rng);
}

template <typename T>
Tensor<T> Conv2d<T>::operator()(const Tensor<T>& x) const {
    return conv2d(x, weight_, bias_, stride_, pad_);
}

template <typename T>
void Conv2d<T>::collect(NamedTensors<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight_);
    out.emplace_back(prefix + ".bias", bias_);
}

template <typename T>
PatchEmbed<T>::PatchEmbed(std::size_t channels, std::size_t patch, std::size_t dim, CounterRng& rng)
    : proj_(channels, dim, patch, patch, rng, 0), patch_(patch) {}

template <typename T>
Tensor<T> PatchEmbed<T>::operator()(const Tensor<T>& image) const {
    if (image.rank() != 3 || image.dim(1) % patch_ || image.dim(2) % patch_)
        throw ShapeError("patch_embed: patch " + std::to_string(patch_) + " does not divide image " +
                         to_string(image.shape()));
    return map_to_tokens(proj_(image));
}

template <typename T>
void PatchEmbed<T>::collect(NamedTensors<T>& out, const std::string& prefix) const {
    proj_.collect(out, prefix);
}

template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map) {
    const std::size_t c = map.dim(0), hw = map.dim(1) * map.dim(2);
    return transpose(reshape(map, {c, hw}));
}

template <typename T>
Tensor<T> tokens_to_grid(const Tensor<T>& tokens, std::size_t h, std::size_t w) {
    if (tokens.rank() != 2 || tokens.dim(0) != h * w)
        throw ShapeError("tokens_to_grid: " + to_string(tokens.shape()) + " is not " + std::to_string(h * w) +
                         " tokens");
    return reshape(tokens, {h, w, tokens.dim(1)});
}

#define KPU_INSTANTIATE(T)                                                                             \
    template Tensor<T> uniform_tensor<T>(Shape, double, CounterRng&, bool);                            \
    template class Linear<T>;                                                                          \
    template class LayerNorm<T>;                                                                       \
    template class MlpHead<T>;                                                                         \
    template class SelfAttention<T>;                                                                   \
    template class CrossAttentionBlock<T>;                                                             \
    template class Conv2d<T>;                                                                          \
    template class PatchEmbed<T>;                                                                      \
    template Tensor<T> multi_head_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t); \
    template Tensor<T> map_to_tokens(const Tensor<T>&);                                                \
    template Tensor<T> tokens_to_grid(const Tensor<T>&, std::size_t, std::size_t);

KPU_INSTANTIATE(float)
KPU_INSTANTIATE(double)
#undef KPU_INSTANTIATE

} // namespace kpu::nn
