#include "kpu/train/weighting.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "kpu/common.hpp"
#include "kpu/rng.hpp"

namespace kpu {

std::string to_string(WeightingStrategy s) {
    switch (s) {
    case WeightingStrategy::equal: return "equal";
    case WeightingStrategy::famo: return "famo";
    case WeightingStrategy::teacherdrop: return "teacherdrop";
    }
    return "?";
}

WeightingStrategy weighting_from_string(const std::string& s) {
    if (s == "equal") return WeightingStrategy::equal;
    if (s == "famo") return WeightingStrategy::famo;
    if (s == "teacherdrop") return WeightingStrategy::teacherdrop;
    throw ConfigError("weighting: unknown strategy '" + s + "'");
}

TeacherWeighting::TeacherWeighting(WeightingStrategy strategy, std::size_t teachers, std::uint64_t seed,
                                   double famo_lr)
    : strategy_(strategy), seed_(seed), famo_lr_(famo_lr), logits_(teachers, 0.0), prev_losses_(teachers) {
    if (teachers == 0) throw ConfigError("weighting: no teachers");
    if (teachers > 62) throw ConfigError("weighting: at most 62 teachers supported");
}

std::uint64_t teacherdrop_mask(std::uint64_t seed, std::uint64_t step, std::size_t teachers) {
    CounterRng rng(mix_key(seed, fnv1a("teacherdrop"), step));
    return rng.below((std::uint64_t{1} << teachers) - 1) + 1;
}

std::vector<double> TeacherWeighting::weights(std::uint64_t step) const {
    const std::size_t n = logits_.size();
    std::vector<double> w(n, 0.0);
    switch (strategy_) {
    case WeightingStrategy::equal:
        std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(n));
        break;
    case WeightingStrategy::famo: {
        const double mx = *std::max_element(logits_.begin(), logits_.end());
        double z = 0.0;
        for (std::size_t t = 0; t < n; ++t) z += (w[t] = std::exp(logits_[t] - mx));
        for (auto& v : w) v /= z;
        break;
    }
    case WeightingStrategy::teacherdrop: {
        const std::uint64_t mask = teacherdrop_mask(seed_, step, n);
        const double k = static_cast<double>(std::popcount(mask));
        for (std::size_t t = 0; t < n; ++t)
            if (mask >> t & 1u) w[t] = 1.0 / k;
        break;
    }
    }
    return w;
}

void TeacherWeighting::observe(const std::vector<std::optional<double>>& losses) {
    if (losses.size() != logits_.size()) throw Error("weighting: loss count does not match teacher count");
    if (strategy_ != WeightingStrategy::famo) return;
    // c_t = log L_prev - log L_cur over teachers with both values.
    std::vector<std::size_t> idx;
    std::vector<double> c;
    for (std::size_t t = 0; t < losses.size(); ++t) {
        if (losses[t] && !std::isfinite(*losses[t])) throw NonFiniteError("weighting: non-finite loss");
        if (losses[t] && prev_losses_[t]) {
            const double tiny = 1e-12;
            idx.push_back(t);
            c.push_back(std::log(std::max(*prev_losses_[t], tiny)) - std::log(std::max(*losses[t], tiny)));
        }
    }
    if (!c.empty()) {
        double mean = 0.0;
        for (double v : c) mean += v;
        mean /= static_cast<double>(c.size());
        for (std::size_t k = 0; k < idx.size(); ++k) logits_[idx[k]] += famo_lr_ * (c[k] - mean);
    }
    for (std::size_t t = 0; t < losses.size(); ++t)
        if (losses[t]) prev_losses_[t] = losses[t];
}

nlohmann::json TeacherWeighting::state() const {
    nlohmann::json prev = nlohmann::json::array();
    for (const auto& p : prev_losses_) prev.push_back(p ? nlohmann::json(*p) : nlohmann::json(nullptr));
    return {{"strategy", to_string(strategy_)}, {"seed", seed_}, {"famo_lr", famo_lr_},
            {"logits", logits_}, {"prev_losses", prev}};
}

void TeacherWeighting::load_state(const nlohmann::json& j) {
    strategy_ = weighting_from_string(j.at("strategy").get<std::string>());
    seed_ = j.at("seed").get<std::uint64_t>();
    famo_lr_ = j.at("famo_lr").get<double>();
    logits_ = j.at("logits").get<std::vector<double>>();
    prev_losses_.assign(logits_.size(), std::nullopt);
    const auto& prev = j.at("prev_losses");
    if (prev.size() != logits_.size()) throw CheckpointError("weighting state: length mismatch");
    for (std::size_t t = 0; t < prev.size(); ++t)
        if (!prev[t].is_null()) prev_losses_[t] = prev[t].get<double>();
}

} // namespace kpu
