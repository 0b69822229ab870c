#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <sstream>

#include "kpu/train/checkpoint.hpp"
#include "kpu/train/trainer.hpp"
#include "test_util.hpp"

using namespace kpu;
using kpu::testing::scratch_dir;
using kpu::testing::slurp;
using kpu::testing::tiny_config;

namespace {

NamedTensors<float> sample_tensors() {
    return {{"a", Tensor<float>({2, 3}, {1, 2, 3, 4, 5, 6})}, {"b.c", Tensor<float>({1}, {-0.5f})}};
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

void put_u64(std::vector<std::byte>& b, std::size_t at, std::uint64_t v) {
    std::memcpy(b.data() + at, &v, 8);
}

} // namespace

// ---- checkpoint format --------------------------------------------------------

TEST(Checkpoint, RoundTripIsByteStable) {
    const nlohmann::json meta{{"step", 3}};
    const auto bytes = encode_checkpoint(sample_tensors(), meta);
    ASSERT_GE(bytes.size(), 24u);
    EXPECT_EQ(std::memcmp(bytes.data(), "KPUC", 4), 0);
    const auto decoded = decode_checkpoint(bytes);
    EXPECT_EQ(decoded.meta, meta);
    ASSERT_EQ(decoded.tensors.size(), 2u);
    EXPECT_EQ(decoded.tensors[0].first, "a");
    EXPECT_EQ(hash_tensors(decoded.tensors), hash_tensors(sample_tensors()));
    EXPECT_EQ(encode_checkpoint(decoded.tensors, decoded.meta), bytes);
}

TEST(Checkpoint, FileRoundTrip) {
    const auto dir = scratch_dir("ckpt_file");
    write_checkpoint(dir / "x.kpuc", sample_tensors(), {{"k", "v"}});
    const auto c = read_checkpoint(dir / "x.kpuc");
    EXPECT_EQ(c.meta.at("k"), "v");
    EXPECT_FALSE(std::filesystem::exists(dir / "x.kpuc.tmp"));
    EXPECT_THROW(read_checkpoint(dir / "missing.kpuc"), CheckpointError);
}

TEST(Checkpoint, CorruptionIsDetected) {
    const auto good = encode_checkpoint(sample_tensors(), {});
    auto expect_error = [](std::vector<std::byte> b, const std::string& fragment) {
        try {
            decode_checkpoint(b);
            ADD_FAILURE() << "no error for " << fragment;
        } catch (const CheckpointError& e) {
            EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
        }
    };
    auto b = good;
    b[0] = std::byte{'X'};
    expect_error(b, "bad magic");
    b = good;
    b[4] = std::byte{9};
    expect_error(b, "version");
    b = good;
    put_u64(b, 8, 1u << 30);
    expect_error(b, "truncated");
    expect_error({good.begin(), good.begin() + 10}, "truncated");
    expect_error({good.begin(), good.end() - 3}, "");
    b = good;
    b[b.size() - 12] ^= std::byte{1}; // flip a payload bit
    expect_error(b, "checksum");
}

TEST(Checkpoint, AssignByNameChecksNamesAndShapes) {
    NamedTensors<float> dst{{"a", Tensor<float>({2, 3}, std::vector<float>(6, 0.f))}};
    NamedTensors<float> src{{"a", Tensor<float>({2, 3}, std::vector<float>(6, 1.f))}};
    assign_by_name(dst, src);
    EXPECT_EQ(dst[0].second[5], 1.f);
    src.push_back({"zzz", Tensor<float>({1}, {0.f})});
    EXPECT_THROW(assign_by_name(dst, src), CheckpointError);
    EXPECT_NO_THROW(assign_by_name(dst, src, {"zz"}));
    NamedTensors<float> bad{{"a", Tensor<float>({3, 2}, std::vector<float>(6, 1.f))}};
    EXPECT_THROW(assign_by_name(dst, bad), CheckpointError);
    EXPECT_THROW(assign_by_name(dst, {}), CheckpointError);
}

// ---- trainer ------------------------------------------------------------------

TEST(Trainer, AccumulatedGradientEqualsSumOfPerTeacherGradients) {
    const TrainConfig cfg = tiny_config();
    Trainer<double> tr(cfg);
    auto& model = tr.model();
    const auto params = model.trainable_parameters(policy_for(cfg.ablation));
    const std::size_t T = tr.teachers().size();
    const std::vector<double> w(T, 1.0 / static_cast<double>(T));
    std::vector<std::string> ids;
    for (const auto& t : tr.teachers()) ids.push_back(t.id());

    auto grads = [&] {
        std::vector<std::vector<double>> g;
        for (const auto& [n, p] : params) g.emplace_back(p.grad().begin(), p.grad().end());
        return g;
    };

    tr.optimizer().zero_grad();
    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        std::vector<TeacherTerms<double>> terms;
        for (const auto& t : tr.teachers())
            terms.push_back(teacher_terms(model, t, tr.teacher_batch(t.spec(), 0), cfg.loss_weights, {}));
        tape.backward(combine_terms(terms, ids, w, cfg.loss_weights).total);
    }
    const auto joint = grads();

    std::vector<std::vector<double>> separate;
    for (std::size_t i = 0; i < T; ++i) {
        tr.optimizer().zero_grad();
        const auto& t = tr.teachers()[i];
        Tape<double> tape;
        TapeScope<double> scope(tape);
        auto terms = teacher_terms(model, t, tr.teacher_batch(t.spec(), 0), cfg.loss_weights, {});
        auto partial = l_total(terms.s2t, *terms.t2s, *terms.rec, cfg.loss_weights.lambda_rec);
        tape.backward(scale(partial, w[i]));
        const auto g = grads();
        if (separate.empty()) separate = g;
        else
            for (std::size_t p = 0; p < g.size(); ++p)
                for (std::size_t k = 0; k < g[p].size(); ++k) separate[p][k] += g[p][k];
    }
    double worst = 0.0;
    for (std::size_t p = 0; p < joint.size(); ++p)
        for (std::size_t k = 0; k < joint[p].size(); ++k) {
            const double a = joint[p][k], b = separate[p][k];
            worst = std::max(worst, std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}));
        }
    EXPECT_LT(worst, 1e-6);
}

TEST(Trainer, PreservationKeepsBackboneAndTeachersFixed) {
    TrainConfig cfg = tiny_config();
    Trainer<float> tr(cfg);
    const auto sentinel_hash = tr.sentinel().hash();
    std::vector<std::uint64_t> teacher_hashes;
    for (const auto& t : tr.teachers()) teacher_hashes.push_back(t.hash());
    EXPECT_EQ(hash_tensors(tr.model().backbone_parameters()), sentinel_hash);
    const auto adapter_before = hash_tensors(tr.model().adapter_parameters());
    for (int i = 0; i < 3; ++i) tr.step();
    EXPECT_EQ(hash_tensors(tr.model().backbone_parameters()), sentinel_hash);
    EXPECT_NE(hash_tensors(tr.model().adapter_parameters()), adapter_before);
    for (std::size_t i = 0; i < teacher_hashes.size(); ++i) EXPECT_EQ(tr.teachers()[i].hash(), teacher_hashes[i]);
}

TEST(Trainer, BaseAUpdatesBackboneAfterFirstStep) {
    TrainConfig cfg = tiny_config();
    cfg.ablation = {false, false, false};
    Trainer<float> tr(cfg);
    const auto before = hash_tensors(tr.model().backbone_parameters());
    const auto rec = tr.step();
    EXPECT_NE(hash_tensors(tr.model().backbone_parameters()), before);
    EXPECT_EQ(rec.losses.l_t2s, 0.0);
    EXPECT_EQ(rec.losses.l_rec, 0.0);
}

TEST(Trainer, PerTeacherBatchSizes) {
    const TrainConfig cfg = tiny_config();
    Trainer<float> tr(cfg);
    for (const auto& spec : cfg.zoo) EXPECT_EQ(tr.teacher_batch(spec, 0).size(), spec.batch_size) << spec.id;
    // streams are per teacher: different teachers see different images at the same step
    const auto a = tr.teacher_batch(cfg.zoo[0], 0), b = tr.teacher_batch(cfg.zoo[1], 0);
    EXPECT_NE(hash_tensors(NamedTensors<float>{{"x", a[0]}}), hash_tensors(NamedTensors<float>{{"x", b[0]}}));
}

TEST(Trainer, MetricsRecordContents) {
    TrainConfig cfg = tiny_config();
    Trainer<float> tr(cfg);
    for (std::size_t s = 1; s <= cfg.steps; ++s) {
        const auto rec = tr.step();
        EXPECT_EQ(rec.step, s);
        EXPECT_EQ(rec.alignment.has_value(), s == 1 || s % 5 == 0);
        const auto j = to_json(rec);
        EXPECT_FALSE(j.contains("wall_ms"));
        EXPECT_NEAR(j.at("losses").at("l_kpu").get<double>(),
                    rec.losses.l_t2s + rec.losses.l_s2t + cfg.loss_weights.lambda_rec * rec.losses.l_rec, 1e-6);
        double total = 0;
        for (double w : rec.weights) total += w;
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
    EXPECT_TRUE(tr.done());
    EXPECT_THROW(tr.step(), Error);
}

TEST(Trainer, TeacherdropSkipsInactiveTeachers) {
    TrainConfig cfg = tiny_config();
    cfg.weighting = WeightingStrategy::teacherdrop;
    Trainer<float> tr(cfg);
    bool saw_inactive = false;
    for (int s = 0; s < 10; ++s) {
        const auto rec = tr.step();
        for (std::size_t i = 0; i < rec.weights.size(); ++i) {
            EXPECT_EQ(rec.losses.per_teacher[i].active, rec.weights[i] > 0.0);
            saw_inactive |= rec.weights[i] == 0.0;
        }
    }
    EXPECT_TRUE(saw_inactive);
}

TEST(Trainer, FamoWeightsOnSimplexEveryStep) {
    TrainConfig cfg = tiny_config();
    cfg.weighting = WeightingStrategy::famo;
    Trainer<float> tr(cfg);
    for (int s = 0; s < 10; ++s) {
        const auto rec = tr.step();
        double total = 0;
        for (double w : rec.weights) {
            EXPECT_GE(w, 0.0);
            total += w;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
    EXPECT_NE(tr.weighting().logits()[0], 0.0);
}

TEST(Trainer, NonFiniteLossNamesTheTerm) {
    TrainConfig cfg = tiny_config();
    cfg.zoo[2].magnitude_scale = 1e38;
    Trainer<float> tr(cfg);
    try {
        tr.step();
        FAIL() << "expected NonFiniteError";
    } catch (const NonFiniteError& e) {
        EXPECT_NE(std::string(e.what()).find("[large]"), std::string::npos) << e.what();
    }
}

TEST(Trainer, IdenticalRunsAreByteIdentical) {
    const auto d1 = scratch_dir("det1"), d2 = scratch_dir("det2");
    Trainer<float> a(tiny_config()), b(tiny_config());
    run_training(a, {d1, 3, 0, true, true});
    run_training(b, {d2, 7, 0, true, true});
    const auto m1 = slurp(d1 / "metrics.jsonl");
    EXPECT_EQ(lines(m1).size(), 10u);
    EXPECT_EQ(m1, slurp(d2 / "metrics.jsonl"));
    EXPECT_EQ(slurp(d1 / "final.kpuc"), slurp(d2 / "final.kpuc"));
    for (const auto& l : lines(m1)) EXPECT_NO_THROW((void)nlohmann::json::parse(l));
    EXPECT_TRUE(std::filesystem::exists(d1 / "timing.jsonl"));
}

TEST(Trainer, SplitRunEqualsUninterruptedRun) {
    const auto full = scratch_dir("split_full"), part = scratch_dir("split_part");
    Trainer<float> a(tiny_config());
    run_training(a, {full, 10, 5, true, true});
    ASSERT_TRUE(std::filesystem::exists(full / "step_5.kpuc"));

    Trainer<float> first(tiny_config());
    for (int i = 0; i < 5; ++i) first.step();
    first.save_checkpoint(part / "half.kpuc");
    EXPECT_EQ(slurp(part / "half.kpuc"), slurp(full / "step_5.kpuc"));

    Trainer<float> resumed = Trainer<float>::resume(part / "half.kpuc");
    EXPECT_EQ(resumed.steps_done(), 5u);
    const auto records = run_training(resumed, {part, 10, 0, true, true});
    EXPECT_EQ(records.size(), 5u);
    EXPECT_EQ(slurp(part / "final.kpuc"), slurp(full / "final.kpuc"));
    const auto all = lines(slurp(full / "metrics.jsonl")), tail = lines(slurp(part / "metrics.jsonl"));
    ASSERT_EQ(tail.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(tail[i], all[5 + i]);
}

TEST(Trainer, ResumeFromCheckpointInSameDirectoryTruncatesMetrics) {
    const auto dir = scratch_dir("resume_same");
    Trainer<float> a(tiny_config());
    run_training(a, {dir, 10, 5, true, true});
    const auto metrics = slurp(dir / "metrics.jsonl");
    const auto final_bytes = slurp(dir / "final.kpuc");
    Trainer<float> r = Trainer<float>::resume(dir / "step_5.kpuc");
    run_training(r, {dir, 10, 5, true, true});
    EXPECT_EQ(slurp(dir / "metrics.jsonl"), metrics);
    EXPECT_EQ(slurp(dir / "final.kpuc"), final_bytes);
}

TEST(Trainer, CheckpointSaveLoadSaveIsByteStable) {
    const auto dir = scratch_dir("ckpt_stable");
    Trainer<float> a(tiny_config());
    for (int i = 0; i < 2; ++i) a.step();
    a.save_checkpoint(dir / "a.kpuc");
    Trainer<float> b = Trainer<float>::resume(dir / "a.kpuc");
    b.save_checkpoint(dir / "b.kpuc");
    EXPECT_EQ(slurp(dir / "a.kpuc"), slurp(dir / "b.kpuc"));
    EXPECT_EQ(hash_tensors(a.model().parameters()), hash_tensors(b.model().parameters()));
    const auto loaded = load_model_checkpoint(dir / "a.kpuc");
    EXPECT_EQ(hash_tensors(loaded.model().parameters()), hash_tensors(a.model().parameters()));
}

TEST(Trainer, ResumeRejectsForeignTensors) {
    const auto dir = scratch_dir("ckpt_foreign");
    Trainer<float> a(tiny_config());
    a.save_checkpoint(dir / "a.kpuc");
    auto c = read_checkpoint(dir / "a.kpuc");
    c.tensors.push_back({"heads.ghost.s2t.fc1.weight", Tensor<float>({1}, {0.f})});
    write_checkpoint(dir / "b.kpuc", c.tensors, c.meta);
    EXPECT_THROW(Trainer<float>::resume(dir / "b.kpuc"), CheckpointError);
}
