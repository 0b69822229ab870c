#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kpu/autodiff/tensor.hpp"

namespace kpu {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// AdamW with decoupled weight decay over a fixed set of named parameters.
template <typename T>
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(NamedTensors<T> params, AdamWConfig config = {});

    /// Zero-fills every parameter's gradient buffer.
    void zero_grad();

    /// p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p. Throws if a parameter has no gradient.
    void step(double lr, double weight_decay);

    std::uint64_t step_count() const { return t_; }
    void set_step_count(std::uint64_t t) { t_ = t; }
    const AdamWConfig& config() const { return config_; }
    const NamedTensors<T>& parameters() const { return params_; }

    /// Moment buffers named "optim.m.<param>" and "optim.v.<param>".
    NamedTensors<T> state_tensors() const;
    /// Copies moment values from tensors with matching names; every buffer must be covered.
    void load_state_tensors(const NamedTensors<T>& tensors);

private:
    NamedTensors<T> params_;
    std::vector<std::vector<T>> m_, v_;
    AdamWConfig config_;
    std::uint64_t t_ = 0;
};

/// Linear warmup to base_lr, then half-cosine decay over the remaining steps.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, std::size_t warmup);

} // namespace kpu
