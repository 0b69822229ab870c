#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpu/train/config.hpp"
#include "kpu/train/optim.hpp"

namespace kpu {

struct MetricsRecord {
    std::size_t step = 0; // 1-based
    double lr = 0.0;
    std::vector<std::string> teachers;
    std::vector<double> weights;
    LossBreakdown losses;
    std::optional<std::map<std::string, double>> alignment; // present on snapshot steps
    double wall_ms = 0.0; // kept out of the deterministic stream
};

/// Deterministic stream form (no wall-clock field).
nlohmann::json to_json(const MetricsRecord& r);

TrainablePolicy policy_for(const AblationFlags& flags);

/// Owns the student, the frozen teachers, the optimizer and the weighting state for one run.
template <typename T>
class Trainer {
public:
    explicit Trainer(TrainConfig config);

    /// One accumulated multi-teacher step: forward every active teacher's batch, one backward, one AdamW update.
    MetricsRecord step();

    bool done() const { return step_ >= config_.steps; }
    std::size_t steps_done() const { return step_; }
    const TrainConfig& config() const { return config_; }

    StudentModel<T>& model() { return model_; }
    const StudentModel<T>& model() const { return model_; }
    const std::vector<Teacher<T>>& teachers() const { return teachers_; }
    const Teacher<T>& teacher(const std::string& id) const;
    const Teacher<T>& sentinel() const;
    AdamW<T>& optimizer() { return optimizer_; }
    const TeacherWeighting& weighting() const { return weighting_; }

    /// Per-teacher alignment_quality on the fixed evaluation batch.
    std::map<std::string, double> alignment_snapshot() const;
    const std::vector<Tensor<T>>& eval_images() const { return eval_images_; }

    /// Model parameters, optimizer moments, and a metadata block holding config, step and weighting state.
    void save_checkpoint(const std::filesystem::path& path) const;
    static Trainer resume(const std::filesystem::path& path);

    /// Teacher batch for a 0-based step.
    std::vector<Tensor<T>> teacher_batch(const TeacherSpec& spec, std::size_t step_index) const;

private:
    TrainConfig config_;
    std::vector<Teacher<T>> teachers_;
    StudentModel<T> model_;
    AdamW<T> optimizer_;
    TeacherWeighting weighting_;
    std::vector<Tensor<T>> eval_images_;
    std::size_t step_ = 0;
};

/// Rebuilds the trainer a checkpoint was written from (model, step count, optimizer and weighting state).
Trainer<float> load_model_checkpoint(const std::filesystem::path& path);

struct RunOptions {
    std::filesystem::path out_dir;
    std::size_t metrics_flush_interval = 10;
    std::size_t checkpoint_every = 0;
    bool write_final = true;
    bool quiet = true;
};

/// Runs the trainer to completion, writing metrics.jsonl, timing.jsonl, step_<n>.kpuc and final.kpuc.
/// On resume the metrics stream is truncated to the resumed step before appending.
std::vector<MetricsRecord> run_training(Trainer<float>& trainer, const RunOptions& options);

} // namespace kpu
