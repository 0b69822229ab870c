#include "kpu/analysis/stats.hpp"

#include <algorithm>
#include <cmath>

namespace kpu {

std::string to_string(StatsSpace s) { return s == StatsSpace::native ? "native" : "unified"; }

template <typename T>
DistributionStats feature_stats(const std::vector<FeatureSet<T>>& features, const std::string& teacher,
                                StatsSpace space) {
    if (features.size() < 2)
        throw Error("feature_stats: need at least 2 samples, got " + std::to_string(features.size()));
    const std::size_t d = features.front().channels();
    Welford pooled;
    std::vector<Welford> per_channel(d);
    for (const auto& fs : features) {
        if (fs.channels() != d) throw ShapeError("feature_stats: channel count differs across samples");
        auto v = fs.grid.data();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double x = static_cast<double>(v[i]);
            pooled.add(x);
            per_channel[i % d].add(x);
        }
    }
    DistributionStats s;
    s.teacher = teacher;
    s.space = space;
    s.samples = features.size();
    s.elements = pooled.count();
    s.pooled_std = pooled.stddev();
    for (const auto& w : per_channel) {
        s.channel_mean.push_back(w.mean());
        s.channel_std.push_back(w.stddev());
    }
    return s;
}

GapRatio gap_ratio(const std::vector<DistributionStats>& stats) {
    if (stats.size() < 2) throw Error("gap_ratio: need at least 2 teachers");
    for (const auto& s : stats)
        if (s.space != stats.front().space) throw Error("gap_ratio: stats from different spaces");
    auto [lo, hi] = std::minmax_element(stats.begin(), stats.end(),
                                        [](const auto& a, const auto& b) { return a.pooled_std < b.pooled_std; });
    GapRatio g{0.0, false, hi->teacher, lo->teacher};
    if (lo->pooled_std == 0.0) {
        g.infinite = true;
        g.value = std::numeric_limits<double>::infinity();
    } else {
        g.value = hi->pooled_std / lo->pooled_std;
    }
    return g;
}

template <typename T>
double alignment_quality(const StudentModel<T>& model, const Teacher<T>& teacher,
                         const std::vector<Tensor<T>>& images) {
    if (images.empty()) throw Error("alignment_quality: empty batch");
    NoTapeScope<T> no_tape;
    double total = 0.0;
    std::size_t rows = 0;
    for (const auto& img : images) {
        const FeatureSet<T> target = teacher.forward(img);
        const FeatureSet<T> pred = model.project_s2t(teacher.id(), model.forward(img));
        const Tensor<T> cos = row_cosine(pred.grid, target.grid);
        for (T c : cos.data()) total += static_cast<double>(c);
        rows += cos.size();
    }
    return total / static_cast<double>(rows);
}

template <typename T>
GapReport measure_gaps(const StudentModel<T>& model, const std::vector<Teacher<T>>& teachers,
                       const std::vector<Tensor<T>>& images) {
    NoTapeScope<T> no_tape;
    GapReport r;
    const std::size_t g = model.backbone_config().grid_size();
    for (const auto& t : teachers) {
        std::vector<FeatureSet<T>> native, unified;
        for (const auto& img : images) {
            native.push_back(t.forward(img));
            unified.push_back(model.project_t2s(t.id(), native.back(), g, g));
        }
        r.native.push_back(feature_stats(native, t.id(), StatsSpace::native));
        r.unified.push_back(feature_stats(unified, t.id(), StatsSpace::unified));
    }
    r.native_ratio = gap_ratio(r.native);
    r.unified_ratio = gap_ratio(r.unified);
    return r;
}

nlohmann::json to_json(const DistributionStats& s) {
    return {{"teacher", s.teacher},     {"space", to_string(s.space)}, {"pooled_std", s.pooled_std},
            {"samples", s.samples},     {"elements", s.elements},      {"channel_mean", s.channel_mean},
            {"channel_std", s.channel_std}};
}

nlohmann::json to_json(const GapRatio& g) {
    return {{"value", g.infinite ? nlohmann::json("inf") : nlohmann::json(g.value)},
            {"infinite", g.infinite},
            {"max_teacher", g.max_teacher},
            {"min_teacher", g.min_teacher}};
}

nlohmann::json to_json(const GapReport& r) {
    nlohmann::json native = nlohmann::json::array(), unified = nlohmann::json::array();
    for (const auto& s : r.native) native.push_back(to_json(s));
    for (const auto& s : r.unified) unified.push_back(to_json(s));
    return {{"native", native},
            {"unified", unified},
            {"native_ratio", to_json(r.native_ratio)},
            {"unified_ratio", to_json(r.unified_ratio)}};
}

#define KPU_INSTANTIATE(T)                                                                                       \
    template DistributionStats feature_stats(const std::vector<FeatureSet<T>>&, const std::string&, StatsSpace); \
    template double alignment_quality(const StudentModel<T>&, const Teacher<T>&, const std::vector<Tensor<T>>&); \
    template GapReport measure_gaps(const StudentModel<T>&, const std::vector<Teacher<T>>&,                      \
                                    const std::vector<Tensor<T>>&);

KPU_INSTANTIATE(float)
KPU_INSTANTIATE(double)
#undef KPU_INSTANTIATE

} // namespace kpu
