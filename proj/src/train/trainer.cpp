#include "kpu/train/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>

#include "kpu/analysis/stats.hpp"
#include "kpu/data/synth.hpp"
#include "kpu/train/checkpoint.hpp"

namespace kpu {

nlohmann::json to_json(const MetricsRecord& r) {
    nlohmann::json weights = nlohmann::json::object(), per = nlohmann::json::object();
    for (std::size_t i = 0; i < r.teachers.size(); ++i) weights[r.teachers[i]] = r.weights[i];
    for (const auto& e : r.losses.per_teacher)
        per[e.id] = {{"active", e.active}, {"s2t", e.s2t}, {"t2s", e.t2s}, {"rec", e.rec}};
    nlohmann::json j = {{"step", r.step},
                        {"lr", r.lr},
                        {"weights", weights},
                        {"losses",
                         {{"l_kpu", r.losses.l_kpu},
                          {"l_s2t", r.losses.l_s2t},
                          {"l_t2s", r.losses.l_t2s},
                          {"l_rec", r.losses.l_rec},
                          {"per_teacher", per}}}};
    if (r.alignment) j["alignment"] = *r.alignment;
    return j;
}

TrainablePolicy policy_for(const AblationFlags& flags) {
    return {flags.preservation_on, flags.unification_on, flags.reconstruction_on};
}

namespace {

constexpr std::uint64_t kStudentDomain = 0x73747564656E74ull; // "student"

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& term) {
    if (!std::isfinite(static_cast<double>(t.item()))) throw NonFiniteError("non-finite loss in " + term);
}

} // namespace

template <typename T>
Trainer<T>::Trainer(TrainConfig config) : config_(std::move(config)) {
    config_.validate();
    for (const auto& spec : config_.zoo) teachers_.push_back(build_teacher<T>(spec, config_.backbone));
    model_ = StudentModel<T>(config_.backbone, config_.adapter, mix_key(config_.seed, kStudentDomain));
    for (const auto& spec : config_.zoo) model_.add_teacher(spec.id, spec.geometry());
    sentinel_init_student(sentinel(), model_);
    const TrainablePolicy policy = policy_for(config_.ablation);
    model_.apply_policy(policy);
    optimizer_ = AdamW<T>(model_.trainable_parameters(policy));
    weighting_ = TeacherWeighting(config_.weighting, teachers_.size(), config_.seed, config_.famo_lr);
    eval_images_ = generate_batch<T>(config_.data, stream_batch_index("eval", 0), config_.eval_images);
}

template <typename T>
const Teacher<T>& Trainer<T>::teacher(const std::string& id) const {
    for (const auto& t : teachers_)
        if (t.id() == id) return t;
    throw Error("no teacher '" + id + "'");
}

template <typename T>
const Teacher<T>& Trainer<T>::sentinel() const {
    for (const auto& t : teachers_)
        if (t.spec().is_sentinel) return t;
    throw Error("zoo has no sentinel");
}

template <typename T>
std::vector<Tensor<T>> Trainer<T>::teacher_batch(const TeacherSpec& spec, std::size_t step_index) const {
    return generate_batch<T>(config_.data, stream_batch_index(spec.id, step_index), spec.batch_size);
}

template <typename T>
MetricsRecord Trainer<T>::step() {
    if (done()) throw Error("trainer: all " + std::to_string(config_.steps) + " steps already run");
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<double> weights = weighting_.weights(step_);
    std::vector<std::string> ids;
    for (const auto& t : teachers_) ids.push_back(t.id());

    optimizer_.zero_grad();
    const ObjectiveFlags flags{config_.ablation.unification_on, config_.ablation.reconstruction_on};
    Tape<T> tape;
    ObjectiveValue<T> value;
    {
        TapeScope<T> scope(tape);
        std::vector<TeacherTerms<T>> terms;
        for (std::size_t i = 0; i < teachers_.size(); ++i) {
            if (weights[i] == 0.0) continue;
            const auto& teacher = teachers_[i];
            terms.push_back(teacher_terms(model_, teacher, teacher_batch(teacher.spec(), step_),
                                          config_.loss_weights, flags));
            const auto& t = terms.back();
            check_finite(t.s2t, "s2t[" + t.id + "]");
            if (t.t2s) check_finite(*t.t2s, "t2s[" + t.id + "]");
            if (t.rec) check_finite(*t.rec, "rec[" + t.id + "]");
        }
        value = combine_terms(terms, ids, weights, config_.loss_weights);
        check_finite(value.total, "l_kpu");
    }
    tape.backward(value.total);

    const double lr = cosine_lr(step_, config_.steps, config_.lr, config_.warmup_steps);
    optimizer_.step(lr, config_.weight_decay);

    std::vector<std::optional<double>> per_teacher;
    for (const auto& e : value.breakdown.per_teacher)
        per_teacher.push_back(e.active ? std::optional<double>(e.s2t + e.t2s + config_.loss_weights.lambda_rec * e.rec)
                                       : std::nullopt);
    weighting_.observe(per_teacher);
    ++step_;

    MetricsRecord rec;
    rec.step = step_;
    rec.lr = lr;
    rec.teachers = ids;
    rec.weights = weights;
    rec.losses = value.breakdown;
    const bool snapshot = step_ == 1 || step_ == config_.steps ||
                          (config_.alignment_every > 0 && step_ % config_.alignment_every == 0);
    if (snapshot) rec.alignment = alignment_snapshot();
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

template <typename T>
std::map<std::string, double> Trainer<T>::alignment_snapshot() const {
    std::map<std::string, double> out;
    for (const auto& t : teachers_) out[t.id()] = alignment_quality(model_, t, eval_images_);
    return out;
}

template <typename T>
void Trainer<T>::save_checkpoint(const std::filesystem::path& path) const {
    if constexpr (!std::is_same_v<T, float>) {
        throw CheckpointError("checkpoints store f32 tensors; only float trainers can be saved");
    } else {
        NamedTensors<float> tensors = model_.parameters();
        for (auto& nt : optimizer_.state_tensors()) tensors.push_back(std::move(nt));
        const nlohmann::json meta = {{"format", "kpu-checkpoint"},
                                     {"config", to_json(config_)},
                                     {"step", step_},
                                     {"optimizer_step", optimizer_.step_count()},
                                     {"weighting", weighting_.state()}};
        write_checkpoint(path, tensors, meta);
    }
}

template <typename T>
Trainer<T> Trainer<T>::resume(const std::filesystem::path& path) {
    if constexpr (!std::is_same_v<T, float>) {
        throw CheckpointError("checkpoints store f32 tensors; only float trainers can be resumed");
    } else {
        CheckpointContents ck = read_checkpoint(path);
        if (!ck.meta.contains("config")) throw CheckpointError("checkpoint has no run metadata");
        Trainer<float> trainer(train_config_from_json(ck.meta.at("config")));
        NamedTensors<float> params = trainer.model_.parameters();
        assign_by_name(params, ck.tensors, {"optim."});
        trainer.optimizer_.load_state_tensors(ck.tensors);
        trainer.optimizer_.set_step_count(ck.meta.at("optimizer_step").get<std::uint64_t>());
        trainer.weighting_.load_state(ck.meta.at("weighting"));
        trainer.step_ = ck.meta.at("step").get<std::size_t>();
        if (trainer.step_ > trainer.config_.steps) throw CheckpointError("checkpoint step exceeds configured steps");
        return trainer;
    }
}

Trainer<float> load_model_checkpoint(const std::filesystem::path& path) {
    return Trainer<float>::resume(path);
}

namespace {

void truncate_metrics(const std::filesystem::path& file, std::size_t keep_steps) {
    if (!std::filesystem::exists(file)) return;
    std::ifstream in(file);
    std::vector<std::string> kept;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (!j.is_discarded() && j.contains("step") && j["step"].get<std::size_t>() <= keep_steps) kept.push_back(line);
    }
    in.close();
    std::ofstream out(file, std::ios::trunc);
    for (const auto& l : kept) out << l << '\n';
}

} // namespace

std::vector<MetricsRecord> run_training(Trainer<float>& trainer, const RunOptions& options) {
    std::filesystem::create_directories(options.out_dir);
    const auto metrics_path = options.out_dir / "metrics.jsonl";
    const auto timing_path = options.out_dir / "timing.jsonl";
    const bool resumed = trainer.steps_done() > 0;
    if (resumed) {
        truncate_metrics(metrics_path, trainer.steps_done());
        truncate_metrics(timing_path, trainer.steps_done());
    }
    const auto mode = resumed ? std::ios::app : std::ios::trunc;
    std::ofstream metrics(metrics_path, mode), timing(timing_path, mode);
    if (!metrics || !timing) throw Error("cannot open metrics files in '" + options.out_dir.string() + "'");

    std::vector<MetricsRecord> records;
    const std::size_t flush = std::max<std::size_t>(1, options.metrics_flush_interval);
    while (!trainer.done()) {
        MetricsRecord r = trainer.step();
        metrics << to_json(r).dump() << '\n';
        timing << nlohmann::json{{"step", r.step}, {"wall_ms", r.wall_ms}}.dump() << '\n';
        if (r.step % flush == 0) {
            metrics.flush();
            timing.flush();
        }
        if (!options.quiet && (r.step == 1 || r.step % 25 == 0 || trainer.done()))
            std::cerr << "step " << r.step << "  l_kpu " << r.losses.l_kpu << "  lr " << r.lr << '\n';
        if (options.checkpoint_every > 0 && r.step % options.checkpoint_every == 0 && !trainer.done())
            trainer.save_checkpoint(options.out_dir / ("step_" + std::to_string(r.step) + ".kpuc"));
        records.push_back(std::move(r));
    }
    metrics.flush();
    timing.flush();
    if (options.write_final) trainer.save_checkpoint(options.out_dir / "final.kpuc");
    return records;
}

template class Trainer<float>;
template class Trainer<double>;

} // namespace kpu
