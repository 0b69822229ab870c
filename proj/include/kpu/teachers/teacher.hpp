#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "kpu/model/student.hpp"

namespace kpu {

enum class TeacherArch { tiny_vit, tiny_conv };

std::string to_string(TeacherArch arch);
TeacherArch teacher_arch_from_string(const std::string& s);

struct TeacherSpec {
    std::string id;
    std::size_t feature_dim = 0;
    std::size_t height = 0; // feature grid
    std::size_t width = 0;
    bool has_global = true;
    double magnitude_scale = 1.0; // sigma_t, applied last
    TeacherArch arch = TeacherArch::tiny_conv;
    std::uint64_t seed = 0;
    std::size_t input_height = 32;
    std::size_t input_width = 32;
    std::size_t batch_size = 1;
    bool is_sentinel = false;

    TeacherGeometry geometry() const { return {feature_dim, height, width, has_global}; }
    void validate() const;
    bool operator==(const TeacherSpec&) const = default;
};

/// Stride-2 conv stack, 1x1 projection, parameter-free layer norm, times sigma.
template <typename T>
class ConvTeacherNet {
public:
    ConvTeacherNet() = default;
    ConvTeacherNet(const TeacherSpec& spec, CounterRng& rng);

    FeatureSet<T> forward(const Tensor<T>& image) const; // unscaled
    NamedTensors<T> parameters() const;

private:
    std::vector<nn::Conv2d<T>> convs_;
    nn::Conv2d<T> proj_;
    nn::Linear<T> global_proj_;
    bool has_global_ = true;
};

/// Frozen synthetic feature extractor. Parameters never require grad.
template <typename T>
class Teacher {
public:
    Teacher() = default;

    const TeacherSpec& spec() const { return spec_; }
    const std::string& id() const { return spec_.id; }

    /// X^t = {x^t, V^t}, tagged teacher-native. Never records on a tape.
    FeatureSet<T> forward(const Tensor<T>& image) const;
    std::vector<FeatureSet<T>> forward(const std::vector<Tensor<T>>& images) const;

    NamedTensors<T> parameters() const;
    std::uint64_t hash() const { return hash_tensors(parameters()); }

    /// The tiny-vit backbone of a vit teacher (the sentinel's weights live here).
    const Backbone<T>* backbone() const { return std::get_if<Backbone<T>>(&net_); }

    template <typename U>
    friend Teacher<U> build_teacher(const TeacherSpec& spec, const BackboneConfig& student);

private:
    TeacherSpec spec_;
    std::variant<Backbone<T>, ConvTeacherNet<T>> net_;
};

/// Backbone configuration a tiny-vit teacher uses; for the sentinel this must equal the student's.
BackboneConfig teacher_backbone_config(const TeacherSpec& spec, const BackboneConfig& student);

template <typename T>
Teacher<T> build_teacher(const TeacherSpec& spec, const BackboneConfig& student);

/// Copies the sentinel's weights into the student backbone, byte for byte.
template <typename T>
void sentinel_init_student(const Teacher<T>& sentinel, StudentModel<T>& model);

/// Sentinel (student-shaped tiny-vit, sigma 1), clip-like (48-d, 2x2, sigma 0.1, batch 8),
/// detector-like (96-d, 8x8, no global, sigma 3.34, batch 2).
std::vector<TeacherSpec> default_zoo(const BackboneConfig& student = {});

/// Checks that exactly one sentinel exists and ids are unique.
void validate_zoo(const std::vector<TeacherSpec>& zoo);

} // namespace kpu
