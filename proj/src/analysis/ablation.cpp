#include "kpu/analysis/ablation.hpp"

#include <fstream>
#include <iostream>

#include "kpu/data/synth.hpp"

namespace kpu {

std::vector<AblationRow> ablation_rows(const TrainConfig& base) {
    std::vector<AblationRow> rows;
    auto with_flags = [&](const std::string& id, bool pre, bool uni, bool rec) {
        TrainConfig c = base;
        c.ablation = {pre, uni, rec};
        c.weighting = WeightingStrategy::equal;
        rows.push_back({id, "table2", c});
    };
    with_flags("base_a", false, false, false);
    with_flags("base_b", true, false, false);
    with_flags("base_c", true, true, false);
    with_flags("kpu", true, true, true);

    TrainConfig kpu = rows.back().config;
    const TeacherSpec* sentinel = nullptr;
    for (const auto& t : base.zoo)
        if (t.is_sentinel) sentinel = &t;
    if (!sentinel) throw ConfigError("ablation: zoo has no sentinel");
    for (const auto& t : base.zoo) {
        if (t.is_sentinel) continue;
        TrainConfig c = kpu;
        c.zoo = {*sentinel, t};
        rows.push_back({"subset_" + t.id, "subset", c});
    }
    rows.push_back({"subset_all", "subset", kpu});

    for (auto w : {WeightingStrategy::equal, WeightingStrategy::famo, WeightingStrategy::teacherdrop}) {
        TrainConfig c = kpu;
        c.weighting = w;
        rows.push_back({"weighting_" + to_string(w), "weighting", c});
    }
    return rows;
}

double eval_reconstruction_loss(const Trainer<float>& trainer, const std::vector<Tensor<float>>& images) {
    NoTapeScope<float> no_tape;
    const auto& model = trainer.model();
    const std::size_t g = model.backbone_config().grid_size();
    double total = 0.0;
    for (const auto& t : trainer.teachers()) {
        double sum = 0.0;
        for (const auto& img : images) {
            const FeatureSet<float> target = t.forward(img);
            const FeatureSet<float> unified = model.project_t2s(t.id(), target, g, g);
            sum += l_align(target, model.reconstruct(t.id(), unified, t.spec().height, t.spec().width),
                           trainer.config().loss_weights)
                       .item();
        }
        total += sum / static_cast<double>(images.size());
    }
    return total / static_cast<double>(trainer.teachers().size());
}

double fit_reconstruction_probes(Trainer<float>& trained, std::size_t steps, const std::vector<Tensor<float>>& images) {
    auto& model = trained.model();
    NamedTensors<float> all = model.parameters();
    nn::set_requires_grad(all, false);
    NamedTensors<float> probes;
    for (const auto& t : trained.teachers()) {
        NamedTensors<float> heads;
        model.heads(t.id()).rec.collect(heads, "heads." + t.id() + ".rec");
        for (auto& h : heads) probes.push_back(h);
    }
    nn::set_requires_grad(probes, true);
    AdamW<float> opt(probes);
    const TrainConfig& cfg = trained.config();
    const std::size_t g = model.backbone_config().grid_size();
    const double w = 1.0 / static_cast<double>(trained.teachers().size());
    for (std::size_t s = 0; s < steps; ++s) {
        opt.zero_grad();
        Tape<float> tape;
        std::optional<Tensor<float>> total;
        {
            TapeScope<float> scope(tape);
            for (const auto& t : trained.teachers()) {
                std::vector<Tensor<float>> per;
                for (const auto& img : trained.teacher_batch(t.spec(), s)) {
                    const FeatureSet<float> target = t.forward(img);
                    const FeatureSet<float> unified = model.project_t2s(t.id(), target, g, g).detach();
                    per.push_back(l_align(target, model.reconstruct(t.id(), unified, t.spec().height, t.spec().width),
                                          cfg.loss_weights));
                }
                Tensor<float> acc = per.front();
                for (std::size_t i = 1; i < per.size(); ++i) acc = add(acc, per[i]);
                Tensor<float> term = scale(acc, static_cast<float>(w / static_cast<double>(per.size())));
                total = total ? add(*total, term) : term;
            }
        }
        tape.backward(*total);
        opt.step(cosine_lr(s, steps, cfg.lr, cfg.warmup_steps), cfg.weight_decay);
    }
    nn::set_requires_grad(probes, false);
    return eval_reconstruction_loss(trained, images);
}

nlohmann::json to_json(const AblationResult& r) {
    auto breakdown = [](const LossBreakdown& b) {
        nlohmann::json per = nlohmann::json::object();
        for (const auto& e : b.per_teacher) per[e.id] = {{"s2t", e.s2t}, {"t2s", e.t2s}, {"rec", e.rec}};
        return nlohmann::json{
            {"l_kpu", b.l_kpu}, {"l_s2t", b.l_s2t}, {"l_t2s", b.l_t2s}, {"l_rec", b.l_rec}, {"per_teacher", per}};
    };
    nlohmann::json j = {{"id", r.id},
                        {"group", r.group},
                        {"flags",
                         {{"pre", r.flags.preservation_on},
                          {"uni", r.flags.unification_on},
                          {"rec", r.flags.reconstruction_on}}},
                        {"teachers", r.teachers},
                        {"weighting", to_string(r.weighting)},
                        {"completed", r.completed}};
    if (!r.error.empty()) j["error"] = r.error;
    if (!r.shared_with.empty()) j["shared_with"] = r.shared_with;
    if (!r.completed) return j;
    j["losses_first"] = breakdown(r.first);
    j["losses_final"] = breakdown(r.final);
    j["alignment_first"] = r.alignment_first;
    j["alignment_final"] = r.alignment_final;
    if (r.gaps) {
        j["native_gap_ratio"] = to_json(r.gaps->native_ratio);
        j["unified_gap_ratio"] = to_json(r.gaps->unified_ratio);
    }
    j["sentinel_hash"] = hex64(r.sentinel_hash);
    j["backbone_hash_step1"] = hex64(r.backbone_hash_step1);
    j["backbone_hash_final"] = hex64(r.backbone_hash_final);
    j["backbone_changed"] = r.backbone_hash_final != r.sentinel_hash;
    j["run_hash"] = hex64(r.run_hash);
    j["eval_rec_loss"] = r.eval_rec_loss;
    if (r.probe_rec_loss) j["probe_rec_loss"] = *r.probe_rec_loss;
    return j;
}

bool AblationSuiteResult::all_completed() const { return failed().empty(); }

std::vector<std::string> AblationSuiteResult::failed() const {
    std::vector<std::string> out;
    for (const auto& r : rows)
        if (!r.completed) out.push_back(r.id);
    return out;
}

namespace {

AblationResult run_row(const AblationRow& row, const ExperimentConfig& base, const std::filesystem::path& dir,
                       const std::vector<Tensor<float>>& eval_images, bool quiet) {
    AblationResult r;
    r.id = row.id;
    r.group = row.group;
    r.flags = row.config.ablation;
    r.weighting = row.config.weighting;
    for (const auto& t : row.config.zoo) r.teachers.push_back(t.id);

    Trainer<float> trainer(row.config);
    r.sentinel_hash = trainer.sentinel().hash();
    std::filesystem::create_directories(dir);
    std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
    const std::size_t flush = std::max<std::size_t>(1, base.output.metrics_flush_interval);
    while (!trainer.done()) {
        MetricsRecord m = trainer.step();
        metrics << to_json(m).dump() << '\n';
        if (m.step % flush == 0) metrics.flush();
        if (m.step == 1) {
            r.first = m.losses;
            r.alignment_first = *m.alignment;
            r.backbone_hash_step1 = hash_tensors(trainer.model().backbone_parameters());
        }
        if (trainer.done()) {
            r.final = m.losses;
            r.alignment_final = *m.alignment;
        }
        if (!quiet && (m.step % 50 == 0 || trainer.done()))
            std::cerr << "  [" << row.id << "] step " << m.step << " l_kpu " << m.losses.l_kpu << '\n';
    }
    metrics.close();
    trainer.save_checkpoint(dir / "final.kpuc");
    r.backbone_hash_final = hash_tensors(trainer.model().backbone_parameters());
    r.run_hash = hash_tensors(trainer.model().parameters());
    if (trainer.teachers().size() >= 2) r.gaps = measure_gaps(trainer.model(), trainer.teachers(), eval_images);
    r.eval_rec_loss = eval_reconstruction_loss(trainer, eval_images);
    if (!row.config.ablation.reconstruction_on && row.config.ablation.unification_on)
        r.probe_rec_loss = fit_reconstruction_probes(trainer, row.config.steps, eval_images);
    r.completed = true;
    return r;
}

void write_table(const std::filesystem::path& path, const std::vector<AblationResult>& rows) {
    std::ofstream f(path, std::ios::trunc);
    f << "id,group,pre,uni,rec,weighting,teachers,completed,l_kpu_first,l_kpu_final,native_gap,unified_gap,"
         "backbone_changed,eval_rec_loss,probe_rec_loss\n";
    for (const auto& r : rows) {
        std::string teachers;
        for (const auto& t : r.teachers) teachers += (teachers.empty() ? "" : "+") + t;
        f << r.id << ',' << r.group << ',' << r.flags.preservation_on << ',' << r.flags.unification_on << ','
          << r.flags.reconstruction_on << ',' << to_string(r.weighting) << ',' << teachers << ',' << r.completed;
        if (r.completed) {
            f << ',' << r.first.l_kpu << ',' << r.final.l_kpu << ',';
            if (r.gaps) f << r.gaps->native_ratio.value << ',' << r.gaps->unified_ratio.value;
            else f << ',';
            f << ',' << (r.backbone_hash_final != r.sentinel_hash) << ',' << r.eval_rec_loss << ',';
            if (r.probe_rec_loss) f << *r.probe_rec_loss;
        } else {
            f << ",,,,,,,";
        }
        f << '\n';
    }
}

} // namespace

AblationSuiteResult run_ablation_suite(const ExperimentConfig& base, const std::filesystem::path& out_dir,
                                       bool quiet) {
    base.validate();
    std::filesystem::create_directories(out_dir);
    const auto rows = ablation_rows(base.train);
    SyntheticDataConfig eval_data = base.train.data;
    eval_data.seed = base.analysis.eval_seed;
    const auto eval_images = generate_batch<float>(eval_data, stream_batch_index("analysis", 0),
                                                   base.analysis.eval_images);

    AblationSuiteResult suite;
    for (const auto& row : rows) {
        // A row whose configuration equals an earlier completed row reuses its run.
        const AblationResult* twin = nullptr;
        for (std::size_t i = 0; i < suite.rows.size(); ++i)
            if (suite.rows[i].completed && suite.rows[i].shared_with.empty() && rows[i].config == row.config)
                twin = &suite.rows[i];
        if (twin) {
            AblationResult r = *twin;
            r.id = row.id;
            r.group = row.group;
            r.shared_with = twin->id;
            suite.rows.push_back(r);
            if (!quiet) std::cerr << "[" << row.id << "] same configuration as " << twin->id << '\n';
            continue;
        }
        if (!quiet) std::cerr << "[" << row.id << "] running " << row.config.steps << " steps\n";
        try {
            suite.rows.push_back(run_row(row, base, out_dir / row.id, eval_images, quiet));
        } catch (const std::exception& e) {
            AblationResult r;
            r.id = row.id;
            r.group = row.group;
            r.flags = row.config.ablation;
            r.weighting = row.config.weighting;
            for (const auto& t : row.config.zoo) r.teachers.push_back(t.id);
            r.error = e.what();
            suite.rows.push_back(r);
            if (!quiet) std::cerr << "[" << row.id << "] failed: " << e.what() << '\n';
        }
    }

    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : suite.rows) rows_json.push_back(to_json(r));
    nlohmann::json summary = {{"seed", base.train.seed},
                              {"steps", base.train.steps},
                              {"rows", rows_json},
                              {"failed", suite.failed()}};
    const AblationResult* kpu_row = nullptr;
    const AblationResult* base_c = nullptr;
    for (const auto& r : suite.rows) {
        if (r.id == "kpu" && r.completed) kpu_row = &r;
        if (r.id == "base_c" && r.completed) base_c = &r;
    }
    if (kpu_row && base_c && base_c->probe_rec_loss)
        summary["reconstruction_probe"] = {{"kpu_eval_rec_loss", kpu_row->eval_rec_loss},
                                           {"base_c_probe_rec_loss", *base_c->probe_rec_loss},
                                           {"kpu_lower", kpu_row->eval_rec_loss < *base_c->probe_rec_loss}};
    std::ofstream(out_dir / "ablation_summary.json", std::ios::trunc) << summary.dump(2) << '\n';
    write_table(out_dir / "ablation_table.csv", suite.rows);
    return suite;
}

} // namespace kpu
