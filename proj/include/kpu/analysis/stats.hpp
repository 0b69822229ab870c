#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpu/model/student.hpp"
#include "kpu/teachers/teacher.hpp"

namespace kpu {

/// Single-pass mean/variance (population convention).
class Welford {
public:
    void add(double x) {
        ++n_;
        const double d = x - mean_;
        mean_ += d / static_cast<double>(n_);
        m2_ += d * (x - mean_);
    }
    std::uint64_t count() const { return n_; }
    double mean() const { return mean_; }
    double variance() const { return n_ ? m2_ / static_cast<double>(n_) : 0.0; }
    double stddev() const { return std::sqrt(variance()); }

private:
    std::uint64_t n_ = 0;
    double mean_ = 0.0;
    double m2_ = 0.0;
};

enum class StatsSpace { native, unified };
std::string to_string(StatsSpace s);

struct DistributionStats {
    std::string teacher;
    StatsSpace space = StatsSpace::native;
    std::vector<double> channel_mean;
    std::vector<double> channel_std;
    double pooled_std = 0.0; // over every grid element of every sample
    std::uint64_t samples = 0;
    std::uint64_t elements = 0;
};

/// Statistics of the grid features in `features` (>= 2 samples, equal channel counts).
template <typename T>
DistributionStats feature_stats(const std::vector<FeatureSet<T>>& features, const std::string& teacher,
                                StatsSpace space);

struct GapRatio {
    double value = 0.0;
    bool infinite = false; // some pooled std was zero
    std::string max_teacher, min_teacher;
};

/// max pooled std / min pooled std over teachers measured in one space.
GapRatio gap_ratio(const std::vector<DistributionStats>& stats);

/// Mean per-position cosine between project_s2t output and teacher features over the batch.
template <typename T>
double alignment_quality(const StudentModel<T>& model, const Teacher<T>& teacher, const std::vector<Tensor<T>>& images);

struct GapReport {
    std::vector<DistributionStats> native, unified;
    GapRatio native_ratio, unified_ratio;
};

/// Native teacher features vs the same features mapped by h_t2s, over one image set.
template <typename T>
GapReport measure_gaps(const StudentModel<T>& model, const std::vector<Teacher<T>>& teachers,
                       const std::vector<Tensor<T>>& images);

nlohmann::json to_json(const DistributionStats& s);
nlohmann::json to_json(const GapRatio& g);
nlohmann::json to_json(const GapReport& r);

} // namespace kpu
