#include "kpu/data/synth.hpp"

#include <algorithm>
#include <cmath>

#include "kpu/rng.hpp"

namespace kpu {

std::string to_string(GeneratorKind kind) {
    switch (kind) {
    case GeneratorKind::gaussian_noise: return "gaussian-noise";
    case GeneratorKind::checkerboard: return "checkerboard";
    case GeneratorKind::linear_gradient: return "linear-gradient";
    case GeneratorKind::gaussian_blob_mixture: return "gaussian-blob-mixture";
    }
    return "?";
}

GeneratorKind generator_kind_from_string(const std::string& s) {
    for (auto k : {GeneratorKind::gaussian_noise, GeneratorKind::checkerboard, GeneratorKind::linear_gradient,
                   GeneratorKind::gaussian_blob_mixture})
        if (to_string(k) == s) return k;
    throw ConfigError("data: unknown generator '" + s + "'");
}

void SyntheticDataConfig::validate() const {
    if (height == 0 || width == 0) throw ConfigError("data: image size must be positive");
    if (generators.empty()) throw ConfigError("data: no generators");
    for (const auto& g : generators)
        if (!(g.weight > 0.0) || !std::isfinite(g.weight))
            throw ConfigError("data: generator weight for " + to_string(g.kind) + " must be positive");
}

std::uint64_t stream_batch_index(std::string_view stream, std::uint64_t step) {
    const std::uint64_t h = fnv1a(stream);
    const std::uint64_t hi = (h ^ (h >> 32)) & 0xFFFFFFFFull;
    return (hi << 32) | (step & 0xFFFFFFFFull);
}

namespace {

constexpr std::uint64_t kDataDomain = 0x6B70752D64617461ull; // "kpu-data"

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

void fill_noise(std::vector<double>& px, std::size_t, std::size_t, CounterRng& rng) {
    double mean[3], sd[3];
    for (int c = 0; c < 3; ++c) {
        mean[c] = rng.uniform(0.3, 0.7);
        sd[c] = rng.uniform(0.05, 0.25);
    }
    const std::size_t plane = px.size() / 3;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i) px[c * plane + i] = clamp01(mean[c] + sd[c] * rng.normal());
}

void fill_checkerboard(std::vector<double>& px, std::size_t h, std::size_t w, CounterRng& rng) {
    double lo[3], hi[3];
    for (int c = 0; c < 3; ++c) {
        lo[c] = rng.uniform(0.0, 0.45);
        hi[c] = rng.uniform(0.55, 1.0);
    }
    const bool flip = rng.below(2) == 1;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const bool odd = (((y / kCheckerSquare) + (x / kCheckerSquare)) % 2 == 1) != flip;
                px[(c * h + y) * w + x] = odd ? hi[c] : lo[c];
            }
}

void fill_gradient(std::vector<double>& px, std::size_t h, std::size_t w, CounterRng& rng) {
    const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double dx = std::cos(angle), dy = std::sin(angle);
    double a[3], b[3];
    for (int c = 0; c < 3; ++c) {
        a[c] = rng.uniform();
        b[c] = rng.uniform();
    }
    // Projection onto the direction, normalized to [0, 1] over the image corners.
    const double sx = static_cast<double>(w > 1 ? w - 1 : 1), sy = static_cast<double>(h > 1 ? h - 1 : 1);
    const double p0 = std::min(0.0, dx) + std::min(0.0, dy);
    const double p1 = std::max(0.0, dx) + std::max(0.0, dy);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double p = (dx * static_cast<double>(x) / sx + dy * static_cast<double>(y) / sy - p0) / (p1 - p0);
            for (std::size_t c = 0; c < 3; ++c) px[(c * h + y) * w + x] = clamp01(a[c] + (b[c] - a[c]) * p);
        }
}

void fill_blobs(std::vector<double>& px, std::size_t h, std::size_t w, CounterRng& rng) {
    double base[3];
    for (int c = 0; c < 3; ++c) base[c] = rng.uniform(0.0, 0.3);
    const std::size_t blobs = 2 + rng.below(4);
    const double extent = static_cast<double>(std::max(h, w));
    std::vector<double> acc(px.size(), 0.0);
    for (std::size_t k = 0; k < blobs; ++k) {
        const double cy = rng.uniform(0.0, static_cast<double>(h)), cx = rng.uniform(0.0, static_cast<double>(w));
        const double s = rng.uniform(0.05, 0.25) * extent;
        double amp[3];
        for (int c = 0; c < 3; ++c) amp[c] = rng.uniform(0.2, 0.8);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double ry = static_cast<double>(y) - cy, rx = static_cast<double>(x) - cx;
                const double g = std::exp(-(ry * ry + rx * rx) / (2.0 * s * s));
                for (std::size_t c = 0; c < 3; ++c) acc[(c * h + y) * w + x] += amp[c] * g;
            }
    }
    const std::size_t plane = h * w;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i) px[c * plane + i] = clamp01(base[c] + acc[c * plane + i]);
}

} // namespace

template <typename T>
Tensor<T> generate_image_of_kind(GeneratorKind kind, std::size_t height, std::size_t width, std::uint64_t key) {
    CounterRng rng(key);
    std::vector<double> px(3 * height * width);
    switch (kind) {
    case GeneratorKind::gaussian_noise: fill_noise(px, height, width, rng); break;
    case GeneratorKind::checkerboard: fill_checkerboard(px, height, width, rng); break;
    case GeneratorKind::linear_gradient: fill_gradient(px, height, width, rng); break;
    case GeneratorKind::gaussian_blob_mixture: fill_blobs(px, height, width, rng); break;
    }
    return Tensor<T>({3, height, width}, std::vector<T>(px.begin(), px.end()));
}

template <typename T>
Tensor<T> generate_image(const SyntheticDataConfig& config, std::uint64_t batch_index, std::uint64_t sample_index) {
    std::uint64_t image_id = mix_key(batch_index, sample_index);
    if (config.dataset_size > 0) image_id %= config.dataset_size;
    const std::uint64_t key = mix_key(config.seed, kDataDomain, image_id);

    CounterRng pick(key);
    double total = 0.0;
    for (const auto& g : config.generators) total += g.weight;
    const double u = pick.uniform() * total;
    GeneratorKind kind = config.generators.back().kind;
    double run = 0.0;
    for (const auto& g : config.generators) {
        run += g.weight;
        if (u < run) {
            kind = g.kind;
            break;
        }
    }
    return generate_image_of_kind<T>(kind, config.height, config.width, mix_key(key, 1));
}

template <typename T>
std::vector<Tensor<T>> generate_batch(const SyntheticDataConfig& config, std::uint64_t batch_index,
                                      std::size_t batch_size) {
    if (batch_size == 0) throw Error("generate_batch: batch_size must be at least 1");
    std::vector<Tensor<T>> out;
    out.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) out.push_back(generate_image<T>(config, batch_index, i));
    return out;
}

template Tensor<float> generate_image_of_kind<float>(GeneratorKind, std::size_t, std::size_t, std::uint64_t);
template Tensor<double> generate_image_of_kind<double>(GeneratorKind, std::size_t, std::size_t, std::uint64_t);
template Tensor<float> generate_image<float>(const SyntheticDataConfig&, std::uint64_t, std::uint64_t);
template Tensor<double> generate_image<double>(const SyntheticDataConfig&, std::uint64_t, std::uint64_t);
template std::vector<Tensor<float>> generate_batch<float>(const SyntheticDataConfig&, std::uint64_t, std::size_t);
template std::vector<Tensor<double>> generate_batch<double>(const SyntheticDataConfig&, std::uint64_t, std::size_t);

} // namespace kpu
