#include "kpu/train/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace kpu {

using nlohmann::json;

void TrainConfig::validate() const {
    if (steps == 0) throw ConfigError("steps must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be >= 0");
    if (scheduler != "cosine") throw ConfigError("scheduler must be 'cosine'");
    if (warmup_steps >= steps && warmup_steps > 0) throw ConfigError("warmup_steps must be < steps");
    if (!std::isfinite(famo_lr)) throw ConfigError("famo_lr must be finite");
    if (eval_images == 0) throw ConfigError("eval_images must be >= 1");
    loss_weights.validate();
    backbone.validate();
    adapter.validate();
    validate_zoo(zoo);
    data.validate();
    if (data.height != backbone.image_size || data.width != backbone.image_size)
        throw ConfigError("data: image size must match the student input size");
    for (const auto& t : zoo)
        if (t.input_height != data.height || t.input_width != data.width)
            throw ConfigError("teacher '" + t.id + "': input size must match the data size");
}

void ExperimentConfig::validate() const {
    train.validate();
    if (output.dir.empty()) throw ConfigError("output.dir must not be empty");
    if (output.metrics_flush_interval == 0) throw ConfigError("output.metrics_flush_interval must be >= 1");
    if (!(gradcheck.tolerance > 0.0)) throw ConfigError("gradcheck.tolerance must be positive");
    if (!(gradcheck.step > 0.0)) throw ConfigError("gradcheck.step must be positive");
    if (analysis.eval_images < 2) throw ConfigError("analysis.eval_images must be >= 2");
}

// ---- serialization -------------------------------------------------------

json to_json(const TeacherSpec& s) {
    return {{"id", s.id},
            {"feature_dim", s.feature_dim},
            {"height", s.height},
            {"width", s.width},
            {"has_global", s.has_global},
            {"magnitude_scale", s.magnitude_scale},
            {"arch", to_string(s.arch)},
            {"seed", s.seed},
            {"input_height", s.input_height},
            {"input_width", s.input_width},
            {"batch_size", s.batch_size},
            {"is_sentinel", s.is_sentinel}};
}

namespace {

json to_json(const BackboneConfig& b) {
    return {{"image_size", b.image_size}, {"patch_size", b.patch_size}, {"depth", b.depth},
            {"dim", b.dim},               {"heads", b.heads},           {"channels", b.channels},
            {"mlp_ratio", b.mlp_ratio}};
}

json to_json(const AdapterConfig& a) {
    return {{"blocks", a.blocks},
            {"scales", a.scales},
            {"gate_init", a.gate_init},
            {"spm_channels", a.spm_channels},
            {"canonical_scale", a.canonical_scale}};
}

json to_json(const SyntheticDataConfig& d) {
    json gens = json::array();
    for (const auto& g : d.generators) gens.push_back({{"kind", to_string(g.kind)}, {"weight", g.weight}});
    return {{"height", d.height}, {"width", d.width}, {"generators", gens}, {"seed", d.seed},
            {"dataset_size", d.dataset_size}};
}

/// Reads fields from one JSON object and rejects any key it was not asked about.
class Reader {
public:
    Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }
    ~Reader() noexcept(false) {
        if (std::uncaught_exceptions()) return;
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!known_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }

    template <typename U>
    void get(const char* key, U& out) {
        known_.insert(key);
        if (!j_.contains(key)) return;
        try {
            if constexpr (std::is_same_v<U, bool>) {
                if (!j_[key].is_boolean()) throw ConfigError("expected a boolean");
            } else if constexpr (std::is_integral_v<U>) {
                if (!j_[key].is_number_integer() || (std::is_unsigned_v<U> && j_[key].is_number_integer() &&
                                                     !j_[key].is_number_unsigned()))
                    throw ConfigError("expected a non-negative integer");
            } else if constexpr (std::is_floating_point_v<U>) {
                if (!j_[key].is_number()) throw ConfigError("expected a number");
            }
            out = j_[key].template get<U>();
        } catch (const std::exception& e) {
            throw ConfigError(where_ + "." + key + ": " + e.what());
        }
    }

    const json* sub(const char* key) {
        known_.insert(key);
        return j_.contains(key) ? &j_[key] : nullptr;
    }

    std::string path(const std::string& key) const { return where_ + "." + key; }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> known_;
};

BackboneConfig backbone_from_json(const json& j, const std::string& where) {
    BackboneConfig b;
    Reader r(j, where);
    r.get("image_size", b.image_size);
    r.get("patch_size", b.patch_size);
    r.get("depth", b.depth);
    r.get("dim", b.dim);
    r.get("heads", b.heads);
    r.get("channels", b.channels);
    r.get("mlp_ratio", b.mlp_ratio);
    return b;
}

AdapterConfig adapter_from_json(const json& j, const std::string& where) {
    AdapterConfig a;
    Reader r(j, where);
    r.get("blocks", a.blocks);
    r.get("scales", a.scales);
    r.get("gate_init", a.gate_init);
    r.get("spm_channels", a.spm_channels);
    r.get("canonical_scale", a.canonical_scale);
    return a;
}

TeacherSpec teacher_from_json(const json& j, const std::string& where, const BackboneConfig& student) {
    TeacherSpec s;
    s.input_height = s.input_width = student.image_size;
    Reader r(j, where);
    if (!j.contains("id") || !j.contains("feature_dim") || !j.contains("height") || !j.contains("width"))
        throw ConfigError(where + ": id, feature_dim, height and width are required");
    std::string arch = to_string(s.arch);
    r.get("id", s.id);
    r.get("feature_dim", s.feature_dim);
    r.get("height", s.height);
    r.get("width", s.width);
    r.get("has_global", s.has_global);
    r.get("magnitude_scale", s.magnitude_scale);
    r.get("arch", arch);
    r.get("seed", s.seed);
    r.get("input_height", s.input_height);
    r.get("input_width", s.input_width);
    r.get("batch_size", s.batch_size);
    r.get("is_sentinel", s.is_sentinel);
    s.arch = teacher_arch_from_string(arch);
    return s;
}

SyntheticDataConfig data_from_json(const json& j, const std::string& where, const BackboneConfig& student) {
    SyntheticDataConfig d;
    d.height = d.width = student.image_size;
    Reader r(j, where);
    r.get("height", d.height);
    r.get("width", d.width);
    r.get("seed", d.seed);
    r.get("dataset_size", d.dataset_size);
    if (const json* g = r.sub("generators")) {
        if (!g->is_array()) throw ConfigError(where + ".generators: expected an array");
        d.generators.clear();
        for (std::size_t i = 0; i < g->size(); ++i) {
            WeightedGenerator wg;
            std::string kind;
            Reader gr((*g)[i], where + ".generators[" + std::to_string(i) + "]");
            gr.get("kind", kind);
            gr.get("weight", wg.weight);
            wg.kind = generator_kind_from_string(kind);
            d.generators.push_back(wg);
        }
    }
    return d;
}

void train_fields(Reader& r, TrainConfig& c) {
    std::string weighting = to_string(c.weighting);
    r.get("steps", c.steps);
    r.get("lr", c.lr);
    r.get("weight_decay", c.weight_decay);
    r.get("scheduler", c.scheduler);
    r.get("warmup_steps", c.warmup_steps);
    r.get("seed", c.seed);
    r.get("weighting", weighting);
    r.get("famo_lr", c.famo_lr);
    r.get("alignment_every", c.alignment_every);
    r.get("eval_images", c.eval_images);
    c.weighting = weighting_from_string(weighting);

    if (const json* a = r.sub("ablation")) {
        Reader ar(*a, "ablation");
        ar.get("preservation_on", c.ablation.preservation_on);
        ar.get("unification_on", c.ablation.unification_on);
        ar.get("reconstruction_on", c.ablation.reconstruction_on);
    }
    if (const json* l = r.sub("loss_weights")) {
        Reader lr(*l, "loss_weights");
        lr.get("lambda1", c.loss_weights.lambda1);
        lr.get("lambda2", c.loss_weights.lambda2);
        lr.get("lambda3", c.loss_weights.lambda3);
        lr.get("lambda_rec", c.loss_weights.lambda_rec);
        lr.get("smooth_l1_beta", c.loss_weights.smooth_l1_beta);
    }
    if (const json* s = r.sub("student")) {
        Reader sr(*s, "student");
        if (const json* b = sr.sub("backbone")) c.backbone = backbone_from_json(*b, "student.backbone");
        if (const json* a = sr.sub("adapter")) c.adapter = adapter_from_json(*a, "student.adapter");
    }
    c.zoo = default_zoo(c.backbone);
    if (const json* z = r.sub("zoo")) {
        if (!z->is_array()) throw ConfigError("zoo: expected an array");
        c.zoo.clear();
        for (std::size_t i = 0; i < z->size(); ++i)
            c.zoo.push_back(teacher_from_json((*z)[i], "zoo[" + std::to_string(i) + "]", c.backbone));
    }
    c.data.height = c.data.width = c.backbone.image_size;
    if (const json* d = r.sub("data")) c.data = data_from_json(*d, "data", c.backbone);
}

void put_train_fields(json& j, const TrainConfig& c) {
    j["steps"] = c.steps;
    j["lr"] = c.lr;
    j["weight_decay"] = c.weight_decay;
    j["scheduler"] = c.scheduler;
    j["warmup_steps"] = c.warmup_steps;
    j["seed"] = c.seed;
    j["weighting"] = to_string(c.weighting);
    j["famo_lr"] = c.famo_lr;
    j["alignment_every"] = c.alignment_every;
    j["eval_images"] = c.eval_images;
    j["ablation"] = {{"preservation_on", c.ablation.preservation_on},
                     {"unification_on", c.ablation.unification_on},
                     {"reconstruction_on", c.ablation.reconstruction_on}};
    j["loss_weights"] = {{"lambda1", c.loss_weights.lambda1},
                         {"lambda2", c.loss_weights.lambda2},
                         {"lambda3", c.loss_weights.lambda3},
                         {"lambda_rec", c.loss_weights.lambda_rec},
                         {"smooth_l1_beta", c.loss_weights.smooth_l1_beta}};
    j["student"] = {{"backbone", to_json(c.backbone)}, {"adapter", to_json(c.adapter)}};
    json zoo = json::array();
    for (const auto& t : c.zoo) zoo.push_back(kpu::to_json(t));
    j["zoo"] = zoo;
    j["data"] = to_json(c.data);
}

} // namespace

json to_json(const TrainConfig& c) {
    json j = json::object();
    put_train_fields(j, c);
    return j;
}

json to_json(const ExperimentConfig& c) {
    json j = json::object();
    put_train_fields(j, c.train);
    j["output"] = {{"dir", c.output.dir},
                   {"metrics_flush_interval", c.output.metrics_flush_interval},
                   {"checkpoint_every", c.output.checkpoint_every}};
    j["gradcheck"] = {{"tolerance", c.gradcheck.tolerance},
                      {"step", c.gradcheck.step},
                      {"max_entries", c.gradcheck.max_entries}};
    j["analysis"] = {{"eval_images", c.analysis.eval_images}, {"eval_seed", c.analysis.eval_seed}};
    return j;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    Reader r(j, "config");
    train_fields(r, c);
    return c;
}

ExperimentConfig experiment_from_json(const json& j) {
    ExperimentConfig c;
    {
        Reader r(j, "config");
        train_fields(r, c.train);
        if (const json* o = r.sub("output")) {
            Reader orr(*o, "output");
            orr.get("dir", c.output.dir);
            orr.get("metrics_flush_interval", c.output.metrics_flush_interval);
            orr.get("checkpoint_every", c.output.checkpoint_every);
        }
        if (const json* g = r.sub("gradcheck")) {
            Reader gr(*g, "gradcheck");
            gr.get("tolerance", c.gradcheck.tolerance);
            gr.get("step", c.gradcheck.step);
            gr.get("max_entries", c.gradcheck.max_entries);
        }
        if (const json* a = r.sub("analysis")) {
            Reader ar(*a, "analysis");
            ar.get("eval_images", c.analysis.eval_images);
            ar.get("eval_seed", c.analysis.eval_seed);
        }
    }
    c.validate();
    return c;
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);

    json* node = &doc;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (const auto& p : parts) {
        if (node->is_object()) {
            if (!node->contains(p)) throw ConfigError("override '" + path + "': unknown key '" + p + "'");
            node = &(*node)[p];
        } else if (node->is_array()) {
            std::size_t idx = 0;
            try {
                idx = std::stoul(p);
            } catch (const std::exception&) {
                throw ConfigError("override '" + path + "': '" + p + "' is not an array index");
            }
            if (idx >= node->size()) throw ConfigError("override '" + path + "': index out of range");
            node = &(*node)[idx];
        } else {
            throw ConfigError("override '" + path + "': '" + p + "' descends into a scalar");
        }
    }
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    *node = value;
}

ExperimentConfig load_experiment(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config '" + path.string() + "'");
    json raw = json::parse(f, nullptr, false);
    if (raw.is_discarded()) throw ConfigError("config '" + path.string() + "' is not valid JSON");
    if (overrides.empty()) return experiment_from_json(raw);
    // Overrides address the fully populated document, so defaulted keys are reachable too.
    json full = to_json(experiment_from_json(raw));
    for (const auto& o : overrides) apply_override(full, o);
    return experiment_from_json(full);
}

} // namespace kpu
