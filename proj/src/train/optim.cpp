#include "kpu/train/optim.hpp"

#include <cmath>
#include <map>
#include <numbers>

namespace kpu {

template <typename T>
AdamW<T>::AdamW(NamedTensors<T> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
    for (const auto& [name, p] : params_) {
        if (!p.requires_grad()) throw Error("AdamW: parameter '" + name + "' does not require grad");
        m_.emplace_back(p.size(), T(0));
        v_.emplace_back(p.size(), T(0));
    }
}

template <typename T>
void AdamW<T>::zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
}

template <typename T>
void AdamW<T>::step(double lr, double weight_decay) {
    for (const auto& [name, p] : params_)
        if (!p.has_grad()) throw Error("AdamW: missing gradient for '" + name + "'");
    ++t_;
    const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
    const T eps = static_cast<T>(config_.eps);
    const T bc1 = static_cast<T>(1.0 - std::pow(config_.beta1, static_cast<double>(t_)));
    const T bc2 = static_cast<T>(1.0 - std::pow(config_.beta2, static_cast<double>(t_)));
    const T lr_t = static_cast<T>(lr), decay = static_cast<T>(lr * weight_decay);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto p = params_[k].second.mutable_data();
        auto g = params_[k].second.grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            const T m_hat = m[i] / bc1;
            const T v_hat = v[i] / bc2;
            p[i] = p[i] - lr_t * (m_hat / (std::sqrt(v_hat) + eps)) - decay * p[i];
        }
    }
}

template <typename T>
NamedTensors<T> AdamW<T>::state_tensors() const {
    NamedTensors<T> out;
    for (std::size_t k = 0; k < params_.size(); ++k) {
        const auto& [name, p] = params_[k];
        out.emplace_back("optim.m." + name, Tensor<T>(p.shape(), m_[k]));
        out.emplace_back("optim.v." + name, Tensor<T>(p.shape(), v_[k]));
    }
    return out;
}

template <typename T>
void AdamW<T>::load_state_tensors(const NamedTensors<T>& tensors) {
    std::map<std::string, const Tensor<T>*> by_name;
    for (const auto& [name, t] : tensors) by_name[name] = &t;
    auto load = [&](const std::string& name, const Shape& shape, std::vector<T>& dst) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw CheckpointError("optimizer state missing '" + name + "'");
        if (it->second->shape() != shape) throw CheckpointError("optimizer state shape mismatch for '" + name + "'");
        auto src = it->second->data();
        dst.assign(src.begin(), src.end());
    };
    for (std::size_t k = 0; k < params_.size(); ++k) {
        load("optim.m." + params_[k].first, params_[k].second.shape(), m_[k]);
        load("optim.v." + params_[k].first, params_[k].second.shape(), v_[k]);
    }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, std::size_t warmup) {
    if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const std::size_t span = total_steps > warmup ? total_steps - warmup : 1;
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
    return std::max(0.0, base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

template class AdamW<float>;
template class AdamW<double>;

} // namespace kpu
