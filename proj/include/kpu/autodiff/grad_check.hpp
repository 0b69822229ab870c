#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "kpu/autodiff/tensor.hpp"

namespace kpu {

struct ParamCheck {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t flagged = 0;
    bool no_grad = false; // frozen parameter, excluded from the check
};

struct GradCheckReport {
    std::vector<ParamCheck> params;
    double worst = 0.0;
    std::string worst_param;
    bool passed = true;
};

/// |a - n| / max(|a|, |n|, 1e-6)
inline double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

/// Fourth-order central difference (-f(+2h) + 8 f(+h) - 8 f(-h) + f(-2h)) / 12h.
/// Truncation error is O(h^4), so a larger h keeps roundoff small for near-zero gradients.
template <typename T>
double central_difference(const std::function<Tensor<T>()>& f, T& slot, double h) {
    const T orig = slot;
    auto at = [&](double offset) {
        slot = static_cast<T>(static_cast<double>(orig) + offset);
        return static_cast<double>(f().item());
    };
    const double fp2 = at(2 * h), fp1 = at(h), fm1 = at(-h), fm2 = at(-2 * h);
    slot = orig;
    return (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h);
}

/// Compares tape gradients of the scalar `f` against central differences.
/// `max_entries` caps the entries probed per tensor (evenly spaced); 0 probes all of them.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f, NamedTensors<T> params, double step,
                           double tolerance, std::size_t max_entries = 0) {
    GradCheckReport report;
    for (auto& [name, p] : params) p.clear_grad();
    {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        Tensor<T> root = f();
        tape.backward(root);
    }
    NoTapeScope<T> no_tape;
    for (auto& [name, p] : params) {
        ParamCheck check;
        check.name = name;
        if (!p.requires_grad()) {
            check.no_grad = true;
            report.params.push_back(check);
            continue;
        }
        std::vector<T> analytic(p.size(), T(0));
        if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
        const std::size_t n = p.size();
        const std::size_t probes = (max_entries == 0 || max_entries >= n) ? n : max_entries;
        auto data = p.mutable_data();
        for (std::size_t s = 0; s < probes; ++s) {
            const std::size_t i = probes == n ? s : s * n / probes;
            const double numeric = central_difference(f, data[i], step);
            const double err = relative_error(static_cast<double>(analytic[i]), numeric);
            check.max_rel_error = std::max(check.max_rel_error, err);
            ++check.checked;
            if (err > tolerance) ++check.flagged;
        }
        if (check.max_rel_error > report.worst) {
            report.worst = check.max_rel_error;
            report.worst_param = name;
        }
        if (check.flagged) report.passed = false;
        report.params.push_back(check);
    }
    return report;
}

} // namespace kpu
