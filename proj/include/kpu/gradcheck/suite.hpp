#pragma once

#include <string>
#include <vector>

#include "kpu/autodiff/grad_check.hpp"
#include "kpu/train/config.hpp"

namespace kpu {

struct GradSuiteCase {
    std::string name; // "op:<name>", "layer:<name>" or "graph:l_kpu"
    GradCheckReport report;
};

struct GradSuiteResult {
    std::vector<GradSuiteCase> cases;
    bool passed = true;
    double worst = 0.0;
    std::string worst_case;
    std::string worst_param;
};

/// Tiny double-precision student + 2 teachers used for the whole-objective check.
TrainConfig grad_toy_config();

/// Every operator, every layer type, and the full L_KPU graph of the toy model,
/// checked against central differences in double precision.
GradSuiteResult run_grad_suite(const GradCheckConfig& config);

} // namespace kpu
