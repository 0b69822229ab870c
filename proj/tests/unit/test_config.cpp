#include <gtest/gtest.h>

#include <fstream>

#include "kpu/train/config.hpp"
#include "test_util.hpp"

using namespace kpu;
using nlohmann::json;

TEST(Config, DefaultsMatchPaperSettings) {
    const TrainConfig c;
    EXPECT_DOUBLE_EQ(c.lr, 2e-4);
    EXPECT_DOUBLE_EQ(c.weight_decay, 0.05);
    EXPECT_EQ(c.scheduler, "cosine");
    EXPECT_EQ(c.warmup_steps, 0u);
    EXPECT_DOUBLE_EQ(c.loss_weights.lambda1, 1.0);
    EXPECT_DOUBLE_EQ(c.loss_weights.lambda2, 0.9);
    EXPECT_DOUBLE_EQ(c.loss_weights.lambda3, 0.1);
    EXPECT_DOUBLE_EQ(c.loss_weights.lambda_rec, 1.0);
    EXPECT_EQ(c.adapter.blocks, 4u);
    EXPECT_EQ(c.adapter.scales, (std::vector<std::size_t>{8, 16, 32}));
    EXPECT_EQ(c.adapter.gate_init, 0.0);
    EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonRoundTrip) {
    ExperimentConfig e;
    e.train = kpu::testing::tiny_config();
    e.train.weighting = WeightingStrategy::famo;
    e.train.ablation.reconstruction_on = false;
    e.output.checkpoint_every = 3;
    e.analysis.eval_seed = 11;
    const json j = to_json(e);
    EXPECT_EQ(experiment_from_json(j), e);
    EXPECT_EQ(to_json(experiment_from_json(j)), j);
}

TEST(Config, MissingKeysKeepDefaults) {
    const auto e = experiment_from_json(json::parse(R"({"steps": 7})"));
    EXPECT_EQ(e.train.steps, 7u);
    EXPECT_EQ(e.train.zoo, default_zoo());
    EXPECT_EQ(e.output, OutputConfig{});
}

TEST(Config, UnknownKeysAndWrongTypesRejected) {
    EXPECT_THROW(experiment_from_json(json::parse(R"({"stpes": 7})")), ConfigError);
    EXPECT_THROW(experiment_from_json(json::parse(R"({"ablation": {"pre": true}})")), ConfigError);
    EXPECT_THROW(experiment_from_json(json::parse(R"({"zoo": [{"id": "x", "colour": 1}]})")), ConfigError);
    EXPECT_THROW(experiment_from_json(json::parse(R"({"steps": "many"})")), ConfigError);
    EXPECT_THROW(experiment_from_json(json::parse(R"({"lr": true})")), ConfigError);
    EXPECT_THROW(experiment_from_json(json::parse(R"({"weighting": "best"})")), ConfigError);
    EXPECT_THROW(experiment_from_json(json::parse(R"([1, 2])")), ConfigError);
}

TEST(Config, ValidationRejectsBadValues) {
    auto bad = [](const char* text) { return experiment_from_json(json::parse(text)); };
    EXPECT_THROW(bad(R"({"steps": 0})"), ConfigError);
    EXPECT_THROW(bad(R"({"lr": 0})"), ConfigError);
    EXPECT_THROW(bad(R"({"scheduler": "step"})"), ConfigError);
    EXPECT_THROW(bad(R"({"data": {"height": 16, "width": 16}})"), ConfigError);
    EXPECT_THROW(bad(R"({"zoo": []})"), ConfigError);
}

TEST(Config, OverridesFollowExistingPaths) {
    json doc = to_json(ExperimentConfig{});
    apply_override(doc, "ablation.reconstruction_on=false");
    apply_override(doc, "steps=12");
    apply_override(doc, "zoo.2.magnitude_scale=6.68");
    apply_override(doc, "weighting=teacherdrop");
    apply_override(doc, "output.dir=runs/x");
    const auto e = experiment_from_json(doc);
    EXPECT_FALSE(e.train.ablation.reconstruction_on);
    EXPECT_EQ(e.train.steps, 12u);
    EXPECT_DOUBLE_EQ(e.train.zoo[2].magnitude_scale, 6.68);
    EXPECT_EQ(e.train.weighting, WeightingStrategy::teacherdrop);
    EXPECT_EQ(e.output.dir, "runs/x");
    EXPECT_THROW(apply_override(doc, "ablation.typo=1"), ConfigError);
    EXPECT_THROW(apply_override(doc, "zoo.9.seed=1"), ConfigError);
    EXPECT_THROW(apply_override(doc, "no_equals_sign"), ConfigError);
}

TEST(Config, LoadExperimentFromFile) {
    const auto dir = kpu::testing::scratch_dir("config_file");
    std::ofstream(dir / "c.json") << R"({"steps": 4, "output": {"dir": "here"}})";
    const auto e = load_experiment(dir / "c.json", {"seed=5"});
    EXPECT_EQ(e.train.steps, 4u);
    EXPECT_EQ(e.train.seed, 5u);
    EXPECT_EQ(e.output.dir, "here");
    std::ofstream(dir / "broken.json") << "{ steps: ";
    EXPECT_THROW(load_experiment(dir / "broken.json"), ConfigError);
    EXPECT_THROW(load_experiment(dir / "absent.json"), ConfigError);
}

TEST(Config, ShippedConfigsParse) {
    const std::filesystem::path root = KPU_SOURCE_DIR;
    for (const char* name : {"configs/default.json", "configs/smoke.json"}) {
        EXPECT_NO_THROW(load_experiment(root / name)) << name;
    }
    EXPECT_EQ(load_experiment(root / "configs/default.json").train, TrainConfig{});
}
