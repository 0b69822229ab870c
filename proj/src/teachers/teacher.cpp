#include "kpu/teachers/teacher.hpp"

#include <cmath>
#include <cstring>
#include <set>

namespace kpu {

std::string to_string(TeacherArch arch) {
    return arch == TeacherArch::tiny_vit ? "tiny-vit" : "tiny-conv";
}

TeacherArch teacher_arch_from_string(const std::string& s) {
    if (s == "tiny-vit") return TeacherArch::tiny_vit;
    if (s == "tiny-conv") return TeacherArch::tiny_conv;
    throw ConfigError("teacher: unknown arch '" + s + "'");
}

void TeacherSpec::validate() const {
    const std::string who = "teacher '" + id + "': ";
    if (id.empty()) throw ConfigError("teacher: empty id");
    if (feature_dim == 0 || height == 0 || width == 0) throw ConfigError(who + "feature dims must be positive");
    if (!(magnitude_scale > 0.0) || !std::isfinite(magnitude_scale))
        throw ConfigError(who + "magnitude_scale must be positive and finite");
    if (batch_size == 0) throw ConfigError(who + "batch_size must be positive");
    if (input_height % height || input_width % width)
        throw ConfigError(who + "grid must divide the input size");
    const std::size_t sy = input_height / height, sx = input_width / width;
    if (sy != sx) throw ConfigError(who + "grid must downsample both axes equally");
    if (arch == TeacherArch::tiny_conv && (sy & (sy - 1)))
        throw ConfigError(who + "tiny-conv downsampling factor must be a power of two");
    if (is_sentinel && arch != TeacherArch::tiny_vit) throw ConfigError(who + "the sentinel must be tiny-vit");
}

void validate_zoo(const std::vector<TeacherSpec>& zoo) {
    if (zoo.empty()) throw ConfigError("zoo: no teachers");
    std::set<std::string> ids;
    std::size_t sentinels = 0;
    for (const auto& s : zoo) {
        s.validate();
        if (!ids.insert(s.id).second) throw ConfigError("zoo: duplicate teacher id '" + s.id + "'");
        sentinels += s.is_sentinel ? 1 : 0;
    }
    if (sentinels != 1) throw ConfigError("zoo: exactly one sentinel teacher required, found " + std::to_string(sentinels));
}

BackboneConfig teacher_backbone_config(const TeacherSpec& spec, const BackboneConfig& student) {
    BackboneConfig c = student;
    c.image_size = spec.input_height;
    c.patch_size = spec.input_height / spec.height;
    c.dim = spec.feature_dim;
    if (c.dim % c.heads) c.heads = 1;
    return c;
}

template <typename T>
ConvTeacherNet<T>::ConvTeacherNet(const TeacherSpec& spec, CounterRng& rng) : has_global_(spec.has_global) {
    std::size_t factor = spec.input_height / spec.height;
    std::size_t ch = 3, width = 16;
    if (factor == 1) {
        convs_.emplace_back(ch, width, 3, 1, rng);
        ch = width;
    }
    while (factor > 1) {
        convs_.emplace_back(ch, width, 3, 2, rng);
        ch = width;
        width = std::min<std::size_t>(width * 2, 64);
        factor /= 2;
    }
    proj_ = nn::Conv2d<T>(ch, spec.feature_dim, 1, 1, rng, 0);
    if (spec.has_global) global_proj_ = nn::Linear<T>(ch, spec.feature_dim, rng);
}

template <typename T>
FeatureSet<T> ConvTeacherNet<T>::forward(const Tensor<T>& image) const {
    Tensor<T> f = image;
    for (const auto& c : convs_) f = gelu(c(f));
    const std::size_t h = f.dim(1), w = f.dim(2);
    FeatureSet<T> out;
    out.grid = nn::tokens_to_grid(layer_norm(nn::map_to_tokens(proj_(f))), h, w);
    if (has_global_) out.global = layer_norm(global_proj_(mean_leading(nn::map_to_tokens(f))));
    return out;
}

template <typename T>
NamedTensors<T> ConvTeacherNet<T>::parameters() const {
    NamedTensors<T> out;
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, "conv" + std::to_string(i));
    proj_.collect(out, "proj");
    if (has_global_) global_proj_.collect(out, "global_proj");
    return out;
}

template <typename T>
FeatureSet<T> Teacher<T>::forward(const Tensor<T>& image) const {
    if (image.rank() != 3 || image.dim(1) != spec_.input_height || image.dim(2) != spec_.input_width)
        throw ShapeError("teacher '" + spec_.id + "': input " + to_string(image.shape()) + " does not match " +
                         std::to_string(spec_.input_height) + "x" + std::to_string(spec_.input_width));
    NoTapeScope<T> no_tape;
    FeatureSet<T> raw = std::visit([&](const auto& net) { return net.forward(image); }, net_);
    const T sigma = static_cast<T>(spec_.magnitude_scale);
    FeatureSet<T> out{std::nullopt, scale(raw.grid, sigma), LatentSpace::teacher_space(spec_.id)};
    if (spec_.has_global && raw.global) out.global = scale(*raw.global, sigma);
    return out;
}

template <typename T>
std::vector<FeatureSet<T>> Teacher<T>::forward(const std::vector<Tensor<T>>& images) const {
    std::vector<FeatureSet<T>> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(forward(img));
    return out;
}

template <typename T>
NamedTensors<T> Teacher<T>::parameters() const {
    return std::visit([](const auto& net) { return net.parameters(); }, net_);
}

template <typename T>
Teacher<T> build_teacher(const TeacherSpec& spec, const BackboneConfig& student) {
    spec.validate();
    Teacher<T> t;
    t.spec_ = spec;
    if (spec.arch == TeacherArch::tiny_vit) {
        const BackboneConfig bc = teacher_backbone_config(spec, student);
        if (spec.is_sentinel && !(bc == student))
            throw ConfigError("teacher '" + spec.id + "': sentinel dims must equal the student backbone");
        t.net_ = Backbone<T>(bc, spec.seed);
    } else {
        CounterRng rng(mix_key(spec.seed, fnv1a("teacher." + spec.id)));
        t.net_ = ConvTeacherNet<T>(spec, rng);
    }
    auto params = t.parameters();
    nn::set_requires_grad(params, false);
    return t;
}

template <typename T>
void sentinel_init_student(const Teacher<T>& sentinel, StudentModel<T>& model) {
    if (!sentinel.spec().is_sentinel) throw Error("sentinel_init: teacher '" + sentinel.id() + "' is not the sentinel");
    const Backbone<T>* src = sentinel.backbone();
    if (!src) throw Error("sentinel_init: sentinel has no vit backbone");
    NamedTensors<T> from = src->parameters();
    NamedTensors<T> to = model.backbone_parameters();
    if (from.size() != to.size()) throw ShapeError("sentinel_init: parameter count mismatch");
    for (std::size_t i = 0; i < from.size(); ++i) {
        if (from[i].first != to[i].first || from[i].second.shape() != to[i].second.shape())
            throw ShapeError("sentinel_init: " + from[i].first + " " + to_string(from[i].second.shape()) + " vs " +
                             to[i].first + " " + to_string(to[i].second.shape()));
    }
    for (std::size_t i = 0; i < from.size(); ++i) {
        auto dst = to[i].second.mutable_data();
        auto s = from[i].second.data();
        std::memcpy(dst.data(), s.data(), s.size_bytes());
    }
}

std::vector<TeacherSpec> default_zoo(const BackboneConfig& student) {
    const std::size_t g = student.grid_size();
    TeacherSpec sentinel{"sentinel", student.dim, g, g, true, 1.0, TeacherArch::tiny_vit, 101,
                         student.image_size, student.image_size, 4, true};
    TeacherSpec clip{"clip-like", 48, 2, 2, true, 0.1, TeacherArch::tiny_conv, 202,
                     student.image_size, student.image_size, 8, false};
    TeacherSpec detector{"detector-like", 96, 8, 8, false, 3.34, TeacherArch::tiny_conv, 303,
                         student.image_size, student.image_size, 2, false};
    return {sentinel, clip, detector};
}

template class ConvTeacherNet<float>;
template class ConvTeacherNet<double>;
template class Teacher<float>;
template class Teacher<double>;
template Teacher<float> build_teacher<float>(const TeacherSpec&, const BackboneConfig&);
template Teacher<double> build_teacher<double>(const TeacherSpec&, const BackboneConfig&);
template void sentinel_init_student(const Teacher<float>&, StudentModel<float>&);
template void sentinel_init_student(const Teacher<double>&, StudentModel<double>&);

} // namespace kpu
