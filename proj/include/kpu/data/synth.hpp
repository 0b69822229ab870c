#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "kpu/autodiff/tensor.hpp"

namespace kpu {

enum class GeneratorKind { gaussian_noise, checkerboard, linear_gradient, gaussian_blob_mixture };

std::string to_string(GeneratorKind kind);
GeneratorKind generator_kind_from_string(const std::string& s);

struct WeightedGenerator {
    GeneratorKind kind = GeneratorKind::gaussian_noise;
    double weight = 1.0;
    bool operator==(const WeightedGenerator&) const = default;
};

struct SyntheticDataConfig {
    std::size_t height = 32;
    std::size_t width = 32;
    std::vector<WeightedGenerator> generators{{GeneratorKind::gaussian_noise, 1.0},
                                              {GeneratorKind::checkerboard, 1.0},
                                              {GeneratorKind::linear_gradient, 1.0},
                                              {GeneratorKind::gaussian_blob_mixture, 1.0}};
    std::uint64_t seed = 0;
    std::uint64_t dataset_size = 0; // 0: unbounded stream; otherwise images repeat from a finite pool

    void validate() const;
    bool operator==(const SyntheticDataConfig&) const = default;
};

constexpr std::size_t kCheckerSquare = 4;

/// One [3 x H x W] image in [0, 1], a pure function of (seed, batch_index, sample_index).
template <typename T>
Tensor<T> generate_image(const SyntheticDataConfig& config, std::uint64_t batch_index, std::uint64_t sample_index);

/// Generates one image of the given kind from `key`.
template <typename T>
Tensor<T> generate_image_of_kind(GeneratorKind kind, std::size_t height, std::size_t width, std::uint64_t key);

template <typename T>
std::vector<Tensor<T>> generate_batch(const SyntheticDataConfig& config, std::uint64_t batch_index,
                                      std::size_t batch_size);

/// Batch index for a named stream at a given step. Streams occupy disjoint
/// index ranges (high 32 bits from the stream name), so they never share draws.
std::uint64_t stream_batch_index(std::string_view stream, std::uint64_t step);

} // namespace kpu
