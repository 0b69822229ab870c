// kpu: train | gradcheck | ablate | analyze
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "kpu/analysis/ablation.hpp"
#include "kpu/analysis/stats.hpp"
#include "kpu/gradcheck/suite.hpp"
#include "kpu/train/checkpoint.hpp"
#include "kpu/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace kpu;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kNonFinite = 3, kAblationRows = 4 };

struct Common {
    std::string config;
    std::string out;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
};

ExperimentConfig load(const Common& c) {
    std::vector<std::string> overrides = c.overrides;
    if (c.seed) {
        overrides.push_back("seed=" + std::to_string(*c.seed));
        overrides.push_back("data.seed=" + std::to_string(*c.seed));
    }
    ExperimentConfig cfg = load_experiment(c.config, overrides);
    if (!c.out.empty()) cfg.output.dir = c.out;
    return cfg;
}

int cmd_train(const Common& c, const std::string& resume, bool quiet) {
    ExperimentConfig cfg;
    try {
        cfg = load(c);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    }
    try {
        Trainer<float> trainer = resume.empty() ? Trainer<float>(cfg.train) : Trainer<float>::resume(resume);
        if (!resume.empty() && !(trainer.config() == cfg.train)) {
            std::cerr << "config error: checkpoint was written by a different training configuration\n";
            return kConfig;
        }
        fs::create_directories(cfg.output.dir);
        std::ofstream(fs::path(cfg.output.dir) / "config.json") << to_json(cfg).dump(2) << '\n';
        RunOptions opts{cfg.output.dir, cfg.output.metrics_flush_interval, cfg.output.checkpoint_every, true, quiet};
        const auto records = run_training(trainer, opts);
        if (!records.empty())
            std::cout << "trained " << trainer.steps_done() << " steps; l_kpu " << records.front().losses.l_kpu
                      << " -> " << records.back().losses.l_kpu << "; wrote " << cfg.output.dir << "/final.kpuc\n";
        else
            std::cout << "nothing to do: checkpoint already at step " << trainer.steps_done() << '\n';
        return kOk;
    } catch (const NonFiniteError& e) {
        std::cerr << "aborted: " << e.what() << '\n';
        return kNonFinite;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    }
}

int cmd_gradcheck(const Common& c, std::optional<double> tolerance, const std::string& fault) {
    GradCheckConfig gc;
    if (!c.config.empty()) {
        try {
            gc = load(c).gradcheck;
        } catch (const ConfigError& e) {
            std::cerr << "config error: " << e.what() << '\n';
            return kConfig;
        }
    }
    if (tolerance) gc.tolerance = *tolerance;
    if (!fault.empty()) set_injected_fault(fault);
    const auto t0 = std::chrono::steady_clock::now();
    const GradSuiteResult r = run_grad_suite(gc);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& cs : r.cases) {
        std::size_t checked = 0;
        for (const auto& p : cs.report.params) checked += p.checked;
        std::printf("%-6s %-26s max rel err %.3e  (%zu entries)%s\n", cs.report.passed ? "ok" : "FAIL",
                    cs.name.c_str(), cs.report.worst, checked,
                    cs.report.passed ? "" : ("  worst: " + cs.report.worst_param).c_str());
    }
    std::printf("worst relative error %.3e in %s (%s); tolerance %.1e; %.1fs\n", r.worst, r.worst_case.c_str(),
                r.worst_param.c_str(), gc.tolerance, secs);
    if (!r.passed) {
        for (const auto& cs : r.cases)
            if (!cs.report.passed)
                std::cerr << "gradient mismatch: " << cs.name << " parameter " << cs.report.worst_param << '\n';
        return kFailure;
    }
    return kOk;
}

int cmd_ablate(const Common& c, bool quiet) {
    ExperimentConfig cfg;
    try {
        cfg = load(c);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    }
    const fs::path out = c.out.empty() ? fs::path(cfg.output.dir) / "ablation" : fs::path(c.out);
    const AblationSuiteResult suite = run_ablation_suite(cfg, out, quiet);
    std::printf("%-22s %-5s %-5s %-5s %-12s %-10s %-10s\n", "row", "pre", "uni", "rec", "weighting", "l_kpu", "status");
    for (const auto& r : suite.rows)
        std::printf("%-22s %-5d %-5d %-5d %-12s %-10.4f %s\n", r.id.c_str(), r.flags.preservation_on,
                    r.flags.unification_on, r.flags.reconstruction_on, to_string(r.weighting).c_str(),
                    r.completed ? r.final.l_kpu : 0.0, r.completed ? "ok" : ("failed: " + r.error).c_str());
    std::cout << "wrote " << (out / "ablation_summary.json").string() << '\n';
    if (!suite.all_completed()) {
        std::cerr << "failed rows:";
        for (const auto& id : suite.failed()) std::cerr << ' ' << id;
        std::cerr << '\n';
        return kAblationRows;
    }
    return kOk;
}

int cmd_analyze(const Common& c, const std::string& checkpoint) {
    ExperimentConfig cfg;
    try {
        cfg = load(c);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    }
    try {
        Trainer<float> trainer = checkpoint.empty() ? Trainer<float>(cfg.train) : load_model_checkpoint(checkpoint);
        SyntheticDataConfig eval = trainer.config().data;
        eval.seed = cfg.analysis.eval_seed;
        const auto images = generate_batch<float>(eval, stream_batch_index("analysis", 0), cfg.analysis.eval_images);
        const GapReport gaps = measure_gaps(trainer.model(), trainer.teachers(), images);
        std::map<std::string, double> alignment;
        for (const auto& t : trainer.teachers()) alignment[t.id()] = alignment_quality(trainer.model(), t, images);

        std::printf("%-16s %-14s %-14s %-10s\n", "teacher", "native std", "unified std", "alignment");
        for (std::size_t i = 0; i < gaps.native.size(); ++i)
            std::printf("%-16s %-14.5f %-14.5f %-10.4f\n", gaps.native[i].teacher.c_str(), gaps.native[i].pooled_std,
                        gaps.unified[i].pooled_std, alignment[gaps.native[i].teacher]);
        std::printf("gap ratio: native %.3f  unified %.3f\n", gaps.native_ratio.value, gaps.unified_ratio.value);

        nlohmann::json j = to_json(gaps);
        j["alignment"] = alignment;
        j["checkpoint"] = checkpoint;
        j["steps_trained"] = trainer.steps_done();
        j["eval_images"] = cfg.analysis.eval_images;
        const fs::path out = cfg.output.dir;
        fs::create_directories(out);
        std::ofstream(out / "gaps.json") << j.dump(2) << '\n';
        std::cout << "wrote " << (out / "gaps.json").string() << '\n';
        return kOk;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return kFailure;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"KPU multi-teacher feature transfer at desk scale"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* opt = sub->add_option("--config", common.config, "Experiment JSON file");
        if (config_required) opt->required();
        sub->add_option("--out", common.out, "Output directory (overrides output.dir)");
        sub->add_option("--override", common.overrides, "key.path=value, repeatable")->take_all();
        sub->add_option("--seed", common.seed, "Sets both the run seed and the data seed");
    };

    bool quiet = false;
    std::string resume, checkpoint, fault;
    std::optional<double> tolerance;

    auto* train = app.add_subcommand("train", "Train the student against the teacher zoo");
    add_common(train, true);
    train->add_option("--resume", resume, "Continue from a checkpoint written by the same configuration");
    train->add_flag("--quiet", quiet, "No progress output");

    auto* grad = app.add_subcommand("gradcheck", "Check every gradient against finite differences");
    add_common(grad, false);
    grad->add_option("--tolerance", tolerance, "Maximum relative error");
    grad->add_option("--inject-fault", fault, "Test fixture: corrupt one op's backward")->group("");

    auto* ablate = app.add_subcommand("ablate", "Run the ablation suite");
    add_common(ablate, true);
    ablate->add_flag("--quiet", quiet, "No progress output");

    auto* analyze = app.add_subcommand("analyze", "Native vs unified feature statistics");
    add_common(analyze, true);
    analyze->add_option("--checkpoint", checkpoint, "Model checkpoint (default: untrained model)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kConfig;
    }

    try {
        if (*train) return cmd_train(common, resume, quiet);
        if (*grad) return cmd_gradcheck(common, tolerance, fault);
        if (*ablate) return cmd_ablate(common, quiet);
        if (*analyze) return cmd_analyze(common, checkpoint);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
    return kFailure;
}
