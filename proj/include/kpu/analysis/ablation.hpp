#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpu/analysis/stats.hpp"
#include "kpu/train/trainer.hpp"

namespace kpu {

/// One named configuration of the suite.
struct AblationRow {
    std::string id;    // base_a, base_b, base_c, kpu, subset_<...>, weighting_<strategy>
    std::string group; // table2, subset, weighting
    TrainConfig config;
};

/// Table-2 rows (Base_a: nothing; Base_b: Pre; Base_c: Pre+Uni; KPU: all), one subset row
/// per non-sentinel teacher (sentinel plus that teacher) plus the full zoo, and one row per weighting strategy.
std::vector<AblationRow> ablation_rows(const TrainConfig& base);

struct AblationResult {
    std::string id;
    std::string group;
    AblationFlags flags;
    std::vector<std::string> teachers;
    WeightingStrategy weighting = WeightingStrategy::equal;
    bool completed = false;
    std::string error;
    std::string shared_with; // identical configuration already run under this id
    LossBreakdown first, final;
    std::map<std::string, double> alignment_first, alignment_final;
    std::optional<GapReport> gaps;
    std::uint64_t sentinel_hash = 0;
    std::uint64_t backbone_hash_step1 = 0;
    std::uint64_t backbone_hash_final = 0;
    std::uint64_t run_hash = 0; // all student parameters after the last step
    double eval_rec_loss = 0.0; // equal-weight L_rec on the analysis batch (rows with reconstruction heads)
    std::optional<double> probe_rec_loss; // rows trained without L_rec: post-hoc probe error
};

nlohmann::json to_json(const AblationResult& r);

/// Trains reconstruction heads only (everything else frozen) for `steps` steps on the
/// trainer's own teacher streams, then returns the equal-weight reconstruction loss on `images`.
double fit_reconstruction_probes(Trainer<float>& trained, std::size_t steps, const std::vector<Tensor<float>>& images);

/// Equal-weight reconstruction loss h_rec(h_t2s(X^t)) vs X^t over `images`.
double eval_reconstruction_loss(const Trainer<float>& trainer, const std::vector<Tensor<float>>& images);

struct AblationSuiteResult {
    std::vector<AblationResult> rows;
    bool all_completed() const;
    std::vector<std::string> failed() const;
};

/// Runs every row with the shared seed, writing <out>/<row id>/metrics.jsonl per run plus
/// <out>/ablation_summary.json and <out>/ablation_table.csv. Failed rows are recorded and the suite continues.
AblationSuiteResult run_ablation_suite(const ExperimentConfig& base, const std::filesystem::path& out_dir,
                                       bool quiet = true);

} // namespace kpu
