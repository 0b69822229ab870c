#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace kpu {

enum class WeightingStrategy { equal, famo, teacherdrop };

std::string to_string(WeightingStrategy s);
WeightingStrategy weighting_from_string(const std::string& s);

constexpr double kFamoLearningRate = 0.025;

/// Per-teacher loss weights. equal: 1/T. famo: softmax of logits shifted by each
/// teacher's log-loss improvement relative to the mean. teacherdrop: 1/|S| over a uniformly drawn non-empty subset S.
class TeacherWeighting {
public:
    TeacherWeighting() = default;
    TeacherWeighting(WeightingStrategy strategy, std::size_t teachers, std::uint64_t seed,
                     double famo_lr = kFamoLearningRate);

    WeightingStrategy strategy() const { return strategy_; }
    std::size_t teachers() const { return logits_.size(); }

    /// Weights for a step; a pure function of the state and step index.
    std::vector<double> weights(std::uint64_t step) const;

    /// Feeds the current per-teacher losses (famo only; other strategies ignore them).
    /// Entries for teachers inactive this step may be nullopt.
    void observe(const std::vector<std::optional<double>>& losses);

    const std::vector<double>& logits() const { return logits_; }

    nlohmann::json state() const;
    void load_state(const nlohmann::json& j);

private:
    WeightingStrategy strategy_ = WeightingStrategy::equal;
    std::uint64_t seed_ = 0;
    double famo_lr_ = kFamoLearningRate;
    std::vector<double> logits_;
    std::vector<std::optional<double>> prev_losses_;
};

/// The non-empty subset mask teacherdrop uses at a step (bit t set: teacher t active).
std::uint64_t teacherdrop_mask(std::uint64_t seed, std::uint64_t step, std::size_t teachers);

} // namespace kpu
