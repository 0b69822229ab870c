#include "kpu/model/student.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace kpu {

namespace {

bool is_power_of_two(std::size_t v) { return v && !(v & (v - 1)); }

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

} // namespace

void AdapterConfig::validate() const {
    if (blocks == 0) throw ConfigError("adapter: blocks (K) must be >= 1");
    if (scales.empty()) throw ConfigError("adapter: scales must not be empty");
    if (!std::is_sorted(scales.begin(), scales.end()) ||
        std::adjacent_find(scales.begin(), scales.end()) != scales.end())
        throw ConfigError("adapter: scales must be strictly ascending");
    if (!is_power_of_two(scales.front()) || scales.front() < 2)
        throw ConfigError("adapter: first scale must be a power of two >= 2");
    for (std::size_t i = 1; i < scales.size(); ++i)
        if (scales[i] % scales[i - 1]) throw ConfigError("adapter: each scale must divide the next");
    if (!std::isfinite(gate_init)) throw ConfigError("adapter: gate_init must be finite");
    if (spm_channels == 0) throw ConfigError("adapter: spm_channels must be positive");
    if (std::find(scales.begin(), scales.end(), canonical_scale) == scales.end())
        throw ConfigError("adapter: canonical_scale " + std::to_string(canonical_scale) + " is not among the scales");
}

std::size_t select_closest_scale(const std::vector<std::size_t>& token_counts, std::size_t target) {
    if (token_counts.empty()) throw Error("select_closest_scale: no candidate grids");
    std::size_t best = 0;
    auto distance = [target](std::size_t c) { return c > target ? c - target : target - c; };
    for (std::size_t i = 1; i < token_counts.size(); ++i) {
        const std::size_t d = distance(token_counts[i]), bd = distance(token_counts[best]);
        if (d < bd || (d == bd && token_counts[i] > token_counts[best])) best = i;
    }
    return best;
}

namespace nn {

template <typename T>
SpatialPrior<T>::SpatialPrior(const AdapterConfig& config, std::size_t in_channels, std::size_t dim, CounterRng& rng) {
    const std::size_t c = config.spm_channels;
    std::size_t stride = 1, ch = in_channels;
    while (stride < config.scales.front()) {
        stem_.emplace_back(ch, c, 3, 2, rng);
        ch = c;
        stride *= 2;
    }
    for (std::size_t i = 1; i < config.scales.size(); ++i)
        down_.emplace_back(c, c, 3, config.scales[i] / config.scales[i - 1], rng);
    for (std::size_t i = 0; i < config.scales.size(); ++i) proj_.emplace_back(c, dim, 1, 1, rng, 0);
}

template <typename T>
std::vector<Tensor<T>> SpatialPrior<T>::operator()(const Tensor<T>& image) const {
    Tensor<T> f = image;
    for (const auto& conv : stem_) f = gelu(conv(f));
    std::vector<Tensor<T>> maps;
    maps.push_back(proj_[0](f));
    for (std::size_t i = 0; i < down_.size(); ++i) {
        f = gelu(down_[i](f));
        maps.push_back(proj_[i + 1](f));
    }
    return maps;
}

template <typename T>
void SpatialPrior<T>::collect(NamedTensors<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < stem_.size(); ++i) stem_[i].collect(out, prefix + ".stem" + std::to_string(i));
    for (std::size_t i = 0; i < down_.size(); ++i) down_[i].collect(out, prefix + ".down" + std::to_string(i + 1));
    for (std::size_t i = 0; i < proj_.size(); ++i) proj_[i].collect(out, prefix + ".proj" + std::to_string(i));
}

template <typename T>
InteractionBlock<T>::InteractionBlock(std::size_t dim, std::size_t heads, T gate_init, CounterRng& rng)
    : inj_norm_q_(dim), inj_norm_kv_(dim), ext_norm_q_(dim), ext_norm_kv_(dim), ffn_norm_(dim),
      injector_(dim, heads, gate_init, rng), extractor_(dim, heads, gate_init, rng),
      ffn_(dim, dim, rng, std::max<std::size_t>(1, dim / 2)) {}

template <typename T>
Tensor<T> InteractionBlock<T>::inject(const Tensor<T>& backbone_tokens, const Tensor<T>& adapter_tokens) const {
    Tensor<T> delta = injector_.attend(inj_norm_q_(backbone_tokens), inj_norm_kv_(adapter_tokens));
    return add(backbone_tokens, mul_scalar(delta, injector_.gate()));
}

template <typename T>
Tensor<T> InteractionBlock<T>::extract(const Tensor<T>& adapter_tokens, const Tensor<T>& backbone_tokens) const {
    Tensor<T> delta = extractor_.attend(ext_norm_q_(adapter_tokens), ext_norm_kv_(backbone_tokens));
    Tensor<T> c = add(adapter_tokens, mul_scalar(delta, extractor_.gate()));
    return add(c, ffn_(ffn_norm_(c)));
}

template <typename T>
void InteractionBlock<T>::collect(NamedTensors<T>& out, const std::string& prefix) const {
    injector_.collect(out, prefix + ".injector");
    inj_norm_q_.collect(out, prefix + ".injector.norm_q");
    inj_norm_kv_.collect(out, prefix + ".injector.norm_kv");
    extractor_.collect(out, prefix + ".extractor");
    ext_norm_q_.collect(out, prefix + ".extractor.norm_q");
    ext_norm_kv_.collect(out, prefix + ".extractor.norm_kv");
    ffn_norm_.collect(out, prefix + ".ffn.norm");
    ffn_.collect(out, prefix + ".ffn");
}

} // namespace nn

template <typename T>
StudentModel<T>::StudentModel(const BackboneConfig& backbone, const AdapterConfig& adapter, std::uint64_t seed)
    : backbone_(backbone, seed), adapter_config_(adapter), seed_(seed) {
    adapter.validate();
    for (std::size_t s : adapter.scales)
        if (s > backbone.image_size) throw ConfigError("adapter: scale larger than the image");
    CounterRng rng(mix_key(seed, fnv1a("adapter")));
    spm_ = nn::SpatialPrior<T>(adapter, backbone.channels, backbone.dim, rng);
    for (std::size_t i = 0; i < adapter.blocks; ++i)
        blocks_.emplace_back(backbone.dim, backbone.heads, static_cast<T>(adapter.gate_init), rng);
    out_gate_ = Tensor<T>::scalar(static_cast<T>(adapter.gate_init), true);
}

template <typename T>
void StudentModel<T>::add_teacher(const std::string& id, const TeacherGeometry& g) {
    if (heads_.count(id)) throw ConfigError("student: teacher '" + id + "' already registered");
    if (g.dim == 0 || g.height == 0 || g.width == 0) throw ConfigError("student: invalid geometry for '" + id + "'");
    // Keyed by teacher id so one teacher's heads never depend on which others exist.
    CounterRng rng(mix_key(seed_, fnv1a("heads." + id)));
    const std::size_t d = backbone_.config().dim;
    HeadTriple<T> triple{nn::MlpHead<T>(d, g.dim, rng), nn::MlpHead<T>(g.dim, d, rng), nn::MlpHead<T>(d, g.dim, rng), g};
    heads_.emplace(id, std::move(triple));
}

template <typename T>
void StudentModel<T>::remove_teacher(const std::string& id) {
    heads_.erase(id);
}

template <typename T>
HeadTriple<T>& StudentModel<T>::heads(const std::string& id) {
    auto it = heads_.find(id);
    if (it == heads_.end()) throw Error("student: unknown teacher '" + id + "'");
    return it->second;
}

template <typename T>
const HeadTriple<T>& StudentModel<T>::heads(const std::string& id) const {
    auto it = heads_.find(id);
    if (it == heads_.end()) throw Error("student: unknown teacher '" + id + "'");
    return it->second;
}

template <typename T>
std::vector<std::string> StudentModel<T>::teacher_ids() const {
    std::vector<std::string> ids;
    for (const auto& [id, h] : heads_) ids.push_back(id);
    return ids;
}

template <typename T>
StudentOutput<T> StudentModel<T>::forward(const Tensor<T>& image) const {
    const auto& bc = backbone_.config();
    const auto& scales = adapter_config_.scales;

    std::vector<Tensor<T>> maps = spm_(image);
    std::vector<std::pair<std::size_t, std::size_t>> sizes;
    std::vector<Tensor<T>> token_sets;
    for (const auto& m : maps) {
        sizes.emplace_back(m.dim(1), m.dim(2));
        token_sets.push_back(nn::map_to_tokens(m));
    }
    Tensor<T> c = token_sets.size() == 1 ? token_sets.front() : concat(token_sets, 0);

    Tensor<T> x = backbone_.embed(image);
    const std::size_t depth = bc.depth, k = blocks_.size();
    for (std::size_t i = 0; i < k; ++i) {
        x = blocks_[i].inject(x, c);
        for (std::size_t b = i * depth / k; b < (i + 1) * depth / k; ++b) x = backbone_.block(b, x);
        c = blocks_[i].extract(c, x);
    }
    auto [cls, grid] = backbone_.split_tokens(backbone_.final_norm(x));
    const std::size_t gh = grid.dim(0), gw = grid.dim(1);

    StudentOutput<T> out;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < scales.size(); ++i) {
        const auto [h, w] = sizes[i];
        Tensor<T> adapter_map = nn::tokens_to_grid(slice(c, 0, offset, offset + h * w), h, w);
        offset += h * w;
        out.multiscale.emplace(scales[i], add(bilinear_resize(grid, h, w), mul_scalar(adapter_map, out_gate_)));
        if (scales[i] == adapter_config_.canonical_scale) {
            Tensor<T> fused = mul_scalar(bilinear_resize(adapter_map, gh, gw), out_gate_);
            out.canonical = FeatureSet<T>{cls, add(grid, fused), LatentSpace::student()};
        }
    }
    return out;
}

template <typename T>
FeatureSet<T> StudentModel<T>::project_s2t(const std::string& id, const StudentOutput<T>& out) const {
    const HeadTriple<T>& h = heads(id);
    std::vector<std::size_t> counts;
    std::vector<const Tensor<T>*> grids;
    for (const auto& [stride, g] : out.multiscale) {
        counts.push_back(g.dim(0) * g.dim(1));
        grids.push_back(&g);
    }
    const Tensor<T>& chosen = *grids[select_closest_scale(counts, h.geometry.height * h.geometry.width)];
    FeatureSet<T> fs{std::nullopt, bilinear_resize(chosen, h.geometry.height, h.geometry.width),
                     LatentSpace::student()};
    if (h.geometry.has_global) fs.global = out.canonical.global;
    FeatureSet<T> projected = h.s2t.project(fs);
    projected.space = LatentSpace::teacher_space(id);
    return projected;
}

template <typename T>
FeatureSet<T> StudentModel<T>::project_t2s(const std::string& id, const FeatureSet<T>& teacher_fs,
                                           std::size_t height, std::size_t width) const {
    const HeadTriple<T>& h = heads(id);
    if (teacher_fs.space != LatentSpace::teacher_space(id))
        throw Error("project_t2s: expected teacher-native:" + id + " features, got " + teacher_fs.space.str());
    FeatureSet<T> resized{teacher_fs.global, bilinear_resize(teacher_fs.grid, height, width), teacher_fs.space};
    FeatureSet<T> projected = h.t2s.project(resized);
    projected.space = LatentSpace::unified();
    return projected;
}

template <typename T>
FeatureSet<T> StudentModel<T>::reconstruct(const std::string& id, const FeatureSet<T>& unified_fs,
                                           std::size_t height, std::size_t width) const {
    const HeadTriple<T>& h = heads(id);
    if (unified_fs.space != LatentSpace::unified())
        throw Error("reconstruct: expected unified features, got " + unified_fs.space.str());
    FeatureSet<T> mapped = h.rec.project(unified_fs);
    mapped.grid = bilinear_resize(mapped.grid, height, width);
    mapped.space = LatentSpace::teacher_space(id);
    return mapped;
}

template <typename T>
NamedTensors<T> StudentModel<T>::adapter_parameters() const {
    NamedTensors<T> out;
    spm_.collect(out, "adapter.spm");
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, "adapter.block" + std::to_string(i));
    out.emplace_back("adapter.out_gate", out_gate_);
    return out;
}

template <typename T>
NamedTensors<T> StudentModel<T>::head_parameters(const std::string& id) const {
    const HeadTriple<T>& h = heads(id);
    NamedTensors<T> out;
    h.s2t.collect(out, "heads." + id + ".s2t");
    h.t2s.collect(out, "heads." + id + ".t2s");
    h.rec.collect(out, "heads." + id + ".rec");
    return out;
}

template <typename T>
NamedTensors<T> StudentModel<T>::parameters() const {
    NamedTensors<T> out = backbone_parameters();
    for (auto& p : adapter_parameters()) out.push_back(std::move(p));
    for (const auto& [id, h] : heads_)
        for (auto& p : head_parameters(id)) out.push_back(std::move(p));
    return out;
}

template <typename T>
NamedTensors<T> StudentModel<T>::trainable_parameters(const TrainablePolicy& policy) const {
    NamedTensors<T> out;
    if (!policy.preservation_on) out = backbone_parameters();
    for (auto& p : adapter_parameters()) out.push_back(std::move(p));
    for (const auto& [id, h] : heads_) {
        h.s2t.collect(out, "heads." + id + ".s2t");
        if (policy.include_t2s) h.t2s.collect(out, "heads." + id + ".t2s");
        if (policy.include_rec) h.rec.collect(out, "heads." + id + ".rec");
    }
    return out;
}

template <typename T>
void StudentModel<T>::apply_policy(const TrainablePolicy& policy) {
    NamedTensors<T> all = parameters();
    std::set<const TensorNode<T>*> trainable;
    for (const auto& [name, t] : trainable_parameters(policy)) trainable.insert(t.node().get());
    for (auto& [name, t] : all) t.set_requires_grad(trainable.count(t.node().get()) != 0);
}

template class nn::SpatialPrior<float>;
template class nn::SpatialPrior<double>;
template class nn::InteractionBlock<float>;
template class nn::InteractionBlock<double>;
template class StudentModel<float>;
template class StudentModel<double>;

} // namespace kpu
