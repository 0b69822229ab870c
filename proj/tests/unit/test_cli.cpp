#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>

#include "kpu/train/config.hpp"
#include "test_util.hpp"

using namespace kpu;
namespace fs = std::filesystem;
using kpu::testing::scratch_dir;
using kpu::testing::slurp;

namespace {

struct Result {
    int code = -1;
    std::string output;
};

Result run(const std::string& args) {
    const std::string cmd = std::string(KPU_BIN) + " " + args + " 2>&1";
    Result r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path tiny_config_file(const fs::path& dir, std::size_t steps = 10) {
    ExperimentConfig e;
    e.train = kpu::testing::tiny_config();
    e.train.steps = steps;
    e.output = {(dir / "run").string(), 1, 5};
    e.analysis.eval_images = 4;
    std::ofstream(dir / "tiny.json") << to_json(e).dump(2);
    return dir / "tiny.json";
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

} // namespace

TEST(Cli, TrainWritesOutputsAndIsReproducible) {
    const auto dir = scratch_dir("cli_train");
    const auto cfg = tiny_config_file(dir);
    const auto a = run("train --quiet --config " + cfg.string() + " --out " + (dir / "a").string());
    ASSERT_EQ(a.code, 0) << a.output;
    EXPECT_EQ(count_lines(slurp(dir / "a/metrics.jsonl")), 10u);
    for (const char* f : {"final.kpuc", "step_5.kpuc", "config.json", "timing.jsonl"})
        EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
    EXPECT_FALSE(fs::exists(dir / "a/step_10.kpuc"));
    const auto b = run("train --quiet --config " + cfg.string() + " --out " + (dir / "b").string());
    ASSERT_EQ(b.code, 0) << b.output;
    EXPECT_EQ(slurp(dir / "a/metrics.jsonl"), slurp(dir / "b/metrics.jsonl"));
    EXPECT_EQ(slurp(dir / "a/final.kpuc"), slurp(dir / "b/final.kpuc"));

    const auto c = run("train --quiet --config " + cfg.string() + " --out " + (dir / "c").string() + " --seed 9");
    ASSERT_EQ(c.code, 0) << c.output;
    EXPECT_NE(slurp(dir / "a/metrics.jsonl"), slurp(dir / "c/metrics.jsonl"));
}

TEST(Cli, ResumeReproducesUninterruptedRun) {
    const auto dir = scratch_dir("cli_resume");
    const auto cfg = tiny_config_file(dir);
    ASSERT_EQ(run("train --quiet --config " + cfg.string() + " --out " + (dir / "full").string()).code, 0);
    fs::create_directories(dir / "split");
    fs::copy_file(dir / "full/step_5.kpuc", dir / "split/step_5.kpuc");
    const auto r = run("train --quiet --config " + cfg.string() + " --out " + (dir / "split").string() +
                       " --resume " + (dir / "split/step_5.kpuc").string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(slurp(dir / "split/final.kpuc"), slurp(dir / "full/final.kpuc"));
    const auto other = run("train --quiet --config " + cfg.string() + " --override steps=12 --out " +
                           (dir / "x").string() + " --resume " + (dir / "split/step_5.kpuc").string());
    EXPECT_EQ(other.code, 2) << other.output;
}

TEST(Cli, OverrideReproducesBaseC) {
    const auto dir = scratch_dir("cli_basec");
    const auto cfg = tiny_config_file(dir, 2);
    const auto r = run("train --quiet --config " + cfg.string() + " --override ablation.reconstruction_on=false --out " +
                       (dir / "o").string());
    ASSERT_EQ(r.code, 0) << r.output;
    const auto first = nlohmann::json::parse(slurp(dir / "o/metrics.jsonl").substr(0, slurp(dir / "o/metrics.jsonl").find('\n')));
    EXPECT_EQ(first.at("losses").at("l_rec").get<double>(), 0.0);
    EXPECT_GT(first.at("losses").at("l_t2s").get<double>(), 0.0);
}

TEST(Cli, ConfigErrorsExitTwo) {
    const auto dir = scratch_dir("cli_config");
    std::ofstream(dir / "typo.json") << R"({"stepz": 3})";
    const auto a = run("train --config " + (dir / "typo.json").string());
    EXPECT_EQ(a.code, 2);
    EXPECT_NE(a.output.find("stepz"), std::string::npos) << a.output;
    EXPECT_EQ(run("train --config " + (dir / "absent.json").string()).code, 2);
    EXPECT_EQ(run("train").code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
    const auto cfg = tiny_config_file(dir);
    EXPECT_EQ(run("train --config " + cfg.string() + " --override nothing.here=1").code, 2);
}

TEST(Cli, NonFiniteLossExitsThree) {
    const auto dir = scratch_dir("cli_nonfinite");
    const auto cfg = tiny_config_file(dir, 2);
    const auto r = run("train --quiet --config " + cfg.string() + " --override zoo.2.magnitude_scale=1e38 --out " +
                       (dir / "o").string());
    EXPECT_EQ(r.code, 3) << r.output;
    EXPECT_NE(r.output.find("[large]"), std::string::npos) << r.output;
}

TEST(Cli, AnalyzeWritesGaps) {
    const auto dir = scratch_dir("cli_analyze");
    const auto cfg = tiny_config_file(dir, 2);
    ASSERT_EQ(run("train --quiet --config " + cfg.string() + " --out " + (dir / "t").string()).code, 0);
    const auto r = run("analyze --config " + cfg.string() + " --checkpoint " + (dir / "t/final.kpuc").string() +
                       " --out " + (dir / "t").string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("gap ratio"), std::string::npos);
    const auto j = nlohmann::json::parse(slurp(dir / "t/gaps.json"));
    EXPECT_EQ(j.at("steps_trained"), 2);
    EXPECT_TRUE(j.at("alignment").contains("large"));
    std::ofstream(dir / "junk.kpuc") << "not a checkpoint";
    EXPECT_EQ(run("analyze --config " + cfg.string() + " --checkpoint " + (dir / "junk.kpuc").string() + " --out " +
                  (dir / "t").string())
                  .code,
              1);
}

TEST(Cli, GradcheckFlagsInjectedFaultAndTolerance) {
    const auto ok = run("gradcheck");
    EXPECT_EQ(ok.code, 0) << ok.output;
    EXPECT_NE(ok.output.find("worst relative error"), std::string::npos);
    const auto bad = run("gradcheck --inject-fault smooth_l1");
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.output.find("op:smooth_l1"), std::string::npos) << bad.output;
    EXPECT_EQ(run("gradcheck --tolerance 1e-12").code, 1);
}

TEST(Cli, AblateTinySuite) {
    const auto dir = scratch_dir("cli_ablate");
    const auto cfg = tiny_config_file(dir, 2);
    const auto r = run("ablate --quiet --config " + cfg.string() + " --out " + (dir / "abl").string());
    ASSERT_EQ(r.code, 0) << r.output;
    const auto j = nlohmann::json::parse(slurp(dir / "abl/ablation_summary.json"));
    EXPECT_EQ(j.at("rows").size(), 10u);
}
