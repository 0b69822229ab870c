#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpu/autodiff/tensor.hpp"

namespace kpu {

constexpr char kCheckpointMagic[4] = {'K', 'P', 'U', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;
/// Header key reserved for run metadata (config, step, weighting state).
constexpr const char* kCheckpointMetaKey = "__metadata__";

struct CheckpointContents {
    NamedTensors<float> tensors; // in file order
    nlohmann::json meta;
};

/// Layout: "KPUC", u32 LE version, u64 LE header length, JSON header
/// {name: {dtype: "f32", shape, offset}, "__metadata__": {...}}, LE f32 payload, u64 LE FNV-1a of the payload.
std::vector<std::byte> encode_checkpoint(const NamedTensors<float>& tensors, const nlohmann::json& meta);
CheckpointContents decode_checkpoint(std::span<const std::byte> bytes);

void write_checkpoint(const std::filesystem::path& path, const NamedTensors<float>& tensors,
                      const nlohmann::json& meta);
CheckpointContents read_checkpoint(const std::filesystem::path& path);

/// Copies tensors into `dst` by name. Unknown names in `src` (outside `allow_prefixes`) throw.
void assign_by_name(NamedTensors<float>& dst, const NamedTensors<float>& src,
                    const std::vector<std::string>& allow_prefixes = {});

} // namespace kpu
