#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpu/data/synth.hpp"
#include "kpu/objective/losses.hpp"
#include "kpu/teachers/teacher.hpp"
#include "kpu/train/weighting.hpp"

namespace kpu {

/// Table-2 switches: Pre (frozen backbone), Uni (L_t2s), Rec (L_rec).
struct AblationFlags {
    bool preservation_on = true;
    bool unification_on = true;
    bool reconstruction_on = true;
    bool operator==(const AblationFlags&) const = default;
};

struct TrainConfig {
    std::size_t steps = 300;
    double lr = 2e-4;
    double weight_decay = 0.05;
    std::string scheduler = "cosine";
    std::size_t warmup_steps = 0;
    std::uint64_t seed = 0;
    WeightingStrategy weighting = WeightingStrategy::equal;
    double famo_lr = kFamoLearningRate;
    AblationFlags ablation;
    LossWeights loss_weights;
    BackboneConfig backbone;
    AdapterConfig adapter;
    std::vector<TeacherSpec> zoo = default_zoo();
    SyntheticDataConfig data;
    std::size_t alignment_every = 50; // alignment snapshot cadence in the metrics stream
    std::size_t eval_images = 16;     // images in the alignment snapshot batch

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

struct OutputConfig {
    std::string dir = "runs/default";
    std::size_t metrics_flush_interval = 10;
    std::size_t checkpoint_every = 0; // 0: only final.kpuc
    bool operator==(const OutputConfig&) const = default;
};

struct GradCheckConfig {
    double tolerance = 1e-5;
    double step = 1e-3;
    std::size_t max_entries = 64; // sampled entries per parameter tensor; 0 checks all
    bool operator==(const GradCheckConfig&) const = default;
};

struct AnalysisConfig {
    std::size_t eval_images = 64;
    std::uint64_t eval_seed = 7; // separate from the training stream
    bool operator==(const AnalysisConfig&) const = default;
};

/// Everything one experiment file holds. Training fields live at the top level.
struct ExperimentConfig {
    TrainConfig train;
    OutputConfig output;
    GradCheckConfig gradcheck;
    AnalysisConfig analysis;

    void validate() const;
    bool operator==(const ExperimentConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const ExperimentConfig& c);
nlohmann::json to_json(const TeacherSpec& s);

/// Strict parse: unknown keys and wrong types raise ConfigError; missing keys keep defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
ExperimentConfig experiment_from_json(const nlohmann::json& j);

/// Applies "a.b.c=value" to a fully populated config document. The path must
/// already exist; the value is parsed as JSON, falling back to a plain string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

ExperimentConfig load_experiment(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

} // namespace kpu
