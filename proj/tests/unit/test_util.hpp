#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "kpu/train/config.hpp"

namespace kpu::testing {

/// Small student (16x16 input, D=16, depth 2, K=2) with three teachers of
/// different shapes and magnitudes; a few steps run in well under a second.
inline TrainConfig tiny_config() {
    TrainConfig c;
    c.steps = 10;
    c.alignment_every = 5;
    c.eval_images = 4;
    c.backbone = BackboneConfig{16, 4, 2, 16, 2, 3, 2, true};
    c.adapter = AdapterConfig{2, {4, 8, 16}, 0.0, 8, 8};
    c.zoo = {TeacherSpec{"sentinel", 16, 4, 4, true, 1.0, TeacherArch::tiny_vit, 1, 16, 16, 2, true},
             TeacherSpec{"small", 12, 2, 2, true, 0.1, TeacherArch::tiny_conv, 2, 16, 16, 3, false},
             TeacherSpec{"large", 20, 8, 8, false, 3.0, TeacherArch::tiny_conv, 3, 16, 16, 1, false}};
    c.data.height = c.data.width = 16;
    return c;
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("kpu_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace kpu::testing
