#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "kpu/analysis/ablation.hpp"
#include "kpu/analysis/stats.hpp"
#include "kpu/data/synth.hpp"
#include "test_util.hpp"

using namespace kpu;

namespace {

FeatureSet<double> grid_of(std::vector<double> v, std::size_t d) {
    const std::size_t n = v.size() / d;
    return {std::nullopt, Tensor<double>({1, n, d}, std::move(v)), LatentSpace::teacher_space("t")};
}

DistributionStats stats_with_std(std::string id, double s, StatsSpace space = StatsSpace::native) {
    DistributionStats d;
    d.teacher = std::move(id);
    d.space = space;
    d.pooled_std = s;
    return d;
}

} // namespace

TEST(Welford, MatchesTwoPassOn10kSamples) {
    CounterRng rng(3);
    std::vector<double> xs(10000);
    for (auto& x : xs) x = 5.0 + 3.0 * rng.normal();
    Welford w;
    for (double x : xs) w.add(x);
    double mean = 0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size());
    EXPECT_EQ(w.count(), 10000u);
    EXPECT_NEAR(w.mean(), mean, 1e-9);
    EXPECT_NEAR(w.stddev(), std::sqrt(var), 1e-6);
}

TEST(FeatureStats, ConstantAndSymmetricCases) {
    const std::vector<FeatureSet<double>> constant{grid_of({2, 2, 2, 2}, 2), grid_of({2, 2, 2, 2}, 2)};
    const auto c = feature_stats(constant, "t", StatsSpace::native);
    EXPECT_EQ(c.pooled_std, 0.0);
    EXPECT_EQ(c.samples, 2u);
    EXPECT_EQ(c.elements, 8u);
    const std::vector<FeatureSet<double>> pm{grid_of({-1, 1, -1, 1}, 2), grid_of({1, -1, 1, -1}, 2)};
    const auto s = feature_stats(pm, "t", StatsSpace::native);
    EXPECT_DOUBLE_EQ(s.pooled_std, 1.0);
    ASSERT_EQ(s.channel_std.size(), 2u);
    EXPECT_DOUBLE_EQ(s.channel_std[0], 1.0);
    EXPECT_DOUBLE_EQ(s.channel_mean[0], 0.0);
    EXPECT_THROW(feature_stats(std::vector<FeatureSet<double>>{pm[0]}, "t", StatsSpace::native), Error);
}

TEST(FeatureStats, MatchesTwoPassOn256Samples) {
    CounterRng rng(11);
    std::vector<FeatureSet<double>> fs;
    std::vector<double> all;
    for (int i = 0; i < 256; ++i) {
        std::vector<double> v(2 * 2 * 3);
        for (auto& x : v) all.push_back(x = 0.3 + 2.0 * rng.normal());
        fs.push_back({std::nullopt, Tensor<double>({2, 2, 3}, v), LatentSpace::teacher_space("t")});
    }
    double mean = 0;
    for (double x : all) mean += x;
    mean /= static_cast<double>(all.size());
    double var = 0;
    for (double x : all) var += (x - mean) * (x - mean);
    EXPECT_NEAR(feature_stats(fs, "t", StatsSpace::native).pooled_std,
                std::sqrt(var / static_cast<double>(all.size())), 1e-6);
}

TEST(GapRatio, Cases) {
    EXPECT_DOUBLE_EQ(gap_ratio({stats_with_std("a", 0.5), stats_with_std("b", 0.5)}).value, 1.0);
    const auto g = gap_ratio({stats_with_std("clip", 0.1), stats_with_std("det", 3.34), stats_with_std("s", 1.0)});
    EXPECT_NEAR(g.value, 33.4, 1e-12);
    EXPECT_EQ(g.max_teacher, "det");
    EXPECT_EQ(g.min_teacher, "clip");
    const auto z = gap_ratio({stats_with_std("a", 0.0), stats_with_std("b", 1.0)});
    EXPECT_TRUE(z.infinite);
    EXPECT_TRUE(std::isinf(z.value));
    EXPECT_THROW(gap_ratio({stats_with_std("a", 1.0)}), Error);
    EXPECT_THROW(gap_ratio({stats_with_std("a", 1.0), stats_with_std("b", 1.0, StatsSpace::unified)}), Error);
}

TEST(AlignmentQuality, SentinelIdentityHeadIsOneRandomHeadIsNearZero) {
    BackboneConfig bc;
    const auto zoo = default_zoo(bc);
    StudentModel<float> model(bc, AdapterConfig{}, 1);
    std::vector<Teacher<float>> teachers;
    for (const auto& s : zoo) {
        teachers.push_back(build_teacher<float>(s, bc));
        model.add_teacher(s.id, s.geometry());
    }
    sentinel_init_student(teachers[0], model);
    model.heads("sentinel").s2t.set_identity();
    SyntheticDataConfig data;
    data.seed = 99;
    const auto images = generate_batch<float>(data, 0, 64);
    EXPECT_NEAR(alignment_quality(model, teachers[0], images), 1.0, 1e-5);
    for (std::size_t t = 1; t < 3; ++t) {
        const double q = alignment_quality(model, teachers[t], images);
        EXPECT_LT(std::abs(q), 0.2) << zoo[t].id;
    }
    const auto gaps = measure_gaps(model, teachers, images);
    EXPECT_EQ(gaps.native.size(), 3u);
    EXPECT_GE(gaps.native_ratio.value, 20.0);
    EXPECT_LE(gaps.native_ratio.value, 50.0);
    EXPECT_EQ(gaps.native_ratio.max_teacher, "detector-like");
    EXPECT_EQ(gaps.native_ratio.min_teacher, "clip-like");
    for (const auto& s : gaps.unified) EXPECT_EQ(s.space, StatsSpace::unified);
    const auto j = to_json(gaps);
    EXPECT_TRUE(j.contains("native_ratio"));
}

TEST(Ablation, RowsMatchTableStructure) {
    const TrainConfig base;
    const auto rows = ablation_rows(base);
    ASSERT_EQ(rows.size(), 10u);
    std::map<std::string, AblationFlags> expect{{"base_a", {false, false, false}},
                                                {"base_b", {true, false, false}},
                                                {"base_c", {true, true, false}},
                                                {"kpu", {true, true, true}}};
    std::map<std::string, int> groups;
    std::set<std::string> ids;
    for (const auto& r : rows) {
        ++groups[r.group];
        EXPECT_TRUE(ids.insert(r.id).second) << r.id;
        EXPECT_EQ(r.config.seed, base.seed);
        if (auto it = expect.find(r.id); it != expect.end()) {
            EXPECT_EQ(r.config.ablation, it->second) << r.id;
            EXPECT_EQ(r.config.weighting, WeightingStrategy::equal);
            EXPECT_EQ(r.group, "table2");
        }
        if (r.group == "subset") {
            EXPECT_EQ(r.config.ablation, AblationFlags{});
            EXPECT_TRUE(std::any_of(r.config.zoo.begin(), r.config.zoo.end(),
                                    [](const auto& s) { return s.is_sentinel; }));
        }
        if (r.group == "weighting") {
            EXPECT_EQ(r.config.ablation, AblationFlags{});
            EXPECT_EQ(r.id, "weighting_" + to_string(r.config.weighting));
        }
    }
    EXPECT_EQ(groups["table2"], 4);
    EXPECT_EQ(groups["subset"], 3);
    EXPECT_EQ(groups["weighting"], 3);
    EXPECT_TRUE(ids.count("subset_clip-like") && ids.count("subset_detector-like") && ids.count("subset_all"));
}

TEST(Ablation, TinySuiteRunsEveryRow) {
    ExperimentConfig exp;
    exp.train = kpu::testing::tiny_config();
    exp.train.steps = 3;
    exp.analysis.eval_images = 4;
    const auto dir = kpu::testing::scratch_dir("ablation");
    const auto result = run_ablation_suite(exp, dir);
    ASSERT_EQ(result.rows.size(), 10u);
    EXPECT_TRUE(result.all_completed());
    for (const auto& r : result.rows) {
        EXPECT_TRUE(r.completed) << r.id << ": " << r.error;
        const bool frozen = r.flags.preservation_on;
        EXPECT_EQ(r.backbone_hash_final == r.sentinel_hash, frozen) << r.id;
        // post-hoc probes only for the row that trains reconstruction-free unification heads
        EXPECT_EQ(r.probe_rec_loss.has_value(), r.id == "base_c") << r.id;
        if (r.shared_with.empty()) EXPECT_TRUE(std::filesystem::exists(dir / r.id / "metrics.jsonl")) << r.id;
    }
    const auto& kpu_row = *std::find_if(result.rows.begin(), result.rows.end(), [](auto& r) { return r.id == "kpu"; });
    const auto& eq_row =
        *std::find_if(result.rows.begin(), result.rows.end(), [](auto& r) { return r.id == "weighting_equal"; });
    EXPECT_EQ(eq_row.shared_with, "kpu");
    EXPECT_EQ(eq_row.run_hash, kpu_row.run_hash);
    const auto summary = nlohmann::json::parse(kpu::testing::slurp(dir / "ablation_summary.json"));
    EXPECT_EQ(summary.at("rows").size(), 10u);
    EXPECT_TRUE(std::filesystem::exists(dir / "ablation_table.csv"));
}
