#pragma once

#include <optional>
#include <string>

#include "kpu/autodiff/tensor.hpp"

namespace kpu {

/// Which latent space a FeatureSet lives in. Teacher-native spaces carry the teacher id.
struct LatentSpace {
    enum class Kind { student_native, teacher_native, unified };

    Kind kind = Kind::student_native;
    std::string teacher; // set for teacher_native

    static LatentSpace student() { return {Kind::student_native, {}}; }
    static LatentSpace unified() { return {Kind::unified, {}}; }
    static LatentSpace teacher_space(std::string id) { return {Kind::teacher_native, std::move(id)}; }

    bool operator==(const LatentSpace&) const = default;
    std::string str() const;
};

/// The unified space is the student space: canonical student features are
/// compared directly with teacher features projected by h_t2s.
bool comparable(const LatentSpace& a, const LatentSpace& b);

/// Image-level feature x (optional) plus spatial feature map V [H x W x D].
template <typename T>
struct FeatureSet {
    std::optional<Tensor<T>> global;
    Tensor<T> grid;
    LatentSpace space;

    std::size_t height() const { return grid.dim(0); }
    std::size_t width() const { return grid.dim(1); }
    std::size_t channels() const { return grid.dim(2); }
    bool has_global() const { return global.has_value(); }

    /// Copy with values cut from any tape.
    FeatureSet detach() const {
        FeatureSet out{std::nullopt, grid.detach(), space};
        if (global) out.global = global->detach();
        return out;
    }
};

} // namespace kpu
