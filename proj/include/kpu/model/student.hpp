#pragma once

#include <map>
#include <string>
#include <vector>

#include "kpu/model/backbone.hpp"

namespace kpu {

struct AdapterConfig {
    std::size_t blocks = 4; // K interaction blocks
    std::vector<std::size_t> scales{8, 16, 32};
    double gate_init = 0.0;
    std::size_t spm_channels = 32;
    std::size_t canonical_scale = 16; // adapter map fused into the canonical grid

    void validate() const;
    bool operator==(const AdapterConfig&) const = default;
};

/// What a teacher produces; enough to size heads and targets.
struct TeacherGeometry {
    std::size_t dim = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    bool has_global = true;
};

/// Which parameters an optimizer may touch.
struct TrainablePolicy {
    bool preservation_on = true; // freeze the backbone
    bool include_t2s = true;     // unification heads
    bool include_rec = true;     // reconstruction heads
};

template <typename T>
struct StudentOutput {
    FeatureSet<T> canonical;
    std::map<std::size_t, Tensor<T>> multiscale; // stride -> [h x w x D]
};

/// Index into `token_counts` whose count is closest to `target`; ties go to the larger grid.
std::size_t select_closest_scale(const std::vector<std::size_t>& token_counts, std::size_t target);

namespace nn {

/// Convolutional spatial prior: stride-2 stem down to the first scale, one
/// strided conv per further scale, and a 1x1 projection to D at every scale.
template <typename T>
class SpatialPrior {
public:
    SpatialPrior() = default;
    SpatialPrior(const AdapterConfig& config, std::size_t in_channels, std::size_t dim, CounterRng& rng);

    /// One [D x h_s x w_s] map per configured scale, ascending stride.
    std::vector<Tensor<T>> operator()(const Tensor<T>& image) const;
    void collect(NamedTensors<T>& out, const std::string& prefix) const;

private:
    std::vector<Conv2d<T>> stem_; // stride-2 convs reaching the first scale
    std::vector<Conv2d<T>> down_; // scales[i] / scales[i-1] strided convs, i >= 1
    std::vector<Conv2d<T>> proj_;
};

/// Injector (backbone tokens attend to adapter tokens), extractor (adapter
/// tokens attend to backbone tokens), and a feed-forward sublayer on adapter tokens.
template <typename T>
class InteractionBlock {
public:
    InteractionBlock() = default;
    InteractionBlock(std::size_t dim, std::size_t heads, T gate_init, CounterRng& rng);

    Tensor<T> inject(const Tensor<T>& backbone_tokens, const Tensor<T>& adapter_tokens) const;
    Tensor<T> extract(const Tensor<T>& adapter_tokens, const Tensor<T>& backbone_tokens) const;
    void collect(NamedTensors<T>& out, const std::string& prefix) const;

    CrossAttentionBlock<T>& injector() { return injector_; }
    CrossAttentionBlock<T>& extractor() { return extractor_; }

private:
    LayerNorm<T> inj_norm_q_, inj_norm_kv_, ext_norm_q_, ext_norm_kv_, ffn_norm_;
    CrossAttentionBlock<T> injector_, extractor_;
    MlpHead<T> ffn_;
};

} // namespace nn

template <typename T>
struct HeadTriple {
    nn::MlpHead<T> s2t; // D -> D_t
    nn::MlpHead<T> t2s; // D_t -> D
    nn::MlpHead<T> rec; // D -> D_t
    TeacherGeometry geometry;
};

/// Frozen ViT backbone + trainable adapter + per-teacher projection heads.
template <typename T>
class StudentModel {
public:
    StudentModel() = default;
    StudentModel(const BackboneConfig& backbone, const AdapterConfig& adapter, std::uint64_t seed);

    const BackboneConfig& backbone_config() const { return backbone_.config(); }
    const AdapterConfig& adapter_config() const { return adapter_config_; }
    Backbone<T>& backbone() { return backbone_; }
    const Backbone<T>& backbone() const { return backbone_; }

    void add_teacher(const std::string& id, const TeacherGeometry& geometry);
    void remove_teacher(const std::string& id);
    bool has_teacher(const std::string& id) const { return heads_.count(id) != 0; }
    HeadTriple<T>& heads(const std::string& id);
    const HeadTriple<T>& heads(const std::string& id) const;
    std::vector<std::string> teacher_ids() const;

    StudentOutput<T> forward(const Tensor<T>& image) const;

    /// Closest-size multiscale grid, resized to the teacher grid, projected by h_s2t.
    FeatureSet<T> project_s2t(const std::string& id, const StudentOutput<T>& out) const;
    /// Teacher features resized to the student grid then projected by h_t2s into the unified space.
    FeatureSet<T> project_t2s(const std::string& id, const FeatureSet<T>& teacher_fs, std::size_t height,
                              std::size_t width) const;
    /// Unified features mapped by h_rec then resized back to the teacher grid.
    FeatureSet<T> reconstruct(const std::string& id, const FeatureSet<T>& unified_fs, std::size_t height,
                              std::size_t width) const;

    NamedTensors<T> backbone_parameters() const { return backbone_.parameters(); }
    NamedTensors<T> adapter_parameters() const;
    NamedTensors<T> head_parameters(const std::string& id) const;
    /// Everything, in checkpoint order: backbone, adapter, heads by teacher id.
    NamedTensors<T> parameters() const;

    NamedTensors<T> trainable_parameters(const TrainablePolicy& policy) const;
    /// Sets requires_grad on every parameter to match the policy; values untouched.
    void apply_policy(const TrainablePolicy& policy);

    Tensor<T>& output_gate() { return out_gate_; }

private:
    Backbone<T> backbone_;
    AdapterConfig adapter_config_;
    std::uint64_t seed_ = 0;
    nn::SpatialPrior<T> spm_;
    std::vector<nn::InteractionBlock<T>> blocks_;
    Tensor<T> out_gate_;
    std::map<std::string, HeadTriple<T>> heads_;
};

} // namespace kpu
