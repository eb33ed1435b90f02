#include <algorithm>
#include <cmath>
#include <numbers>

#include "kd/experiment.hpp"

namespace kd {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Label 0: a few bright Gaussian blobs scattered near the center.
void draw_blobs(std::vector<double>& img, std::size_t side, CounterRng& rng) {
    const double s = static_cast<double>(side);
    const std::size_t count = 2 + rng.below(4);
    for (std::size_t b = 0; b < count; ++b) {
        const double cx = s / 2 + rng.normal() * s / 8;
        const double cy = s / 2 + rng.normal() * s / 8;
        const double sigma = rng.uniform(0.06, 0.14) * s;
        const double amp = rng.uniform(0.0, 0.35);
        for (std::size_t y = 0; y < side; ++y) {
            for (std::size_t x = 0; x < side; ++x) {
                const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
                img[y * side + x] += amp * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            }
        }
    }
}

// Label 1: a sinusoidal grating of random orientation, frequency and phase.
void draw_grating(std::vector<double>& img, std::size_t side, CounterRng& rng) {
    const double s = static_cast<double>(side);
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double cycles = rng.uniform(2.0, 5.0);
    const double phase = rng.uniform(0.0, kTwoPi);
    const double amp = rng.uniform(0.08, 0.2);
    const double c = std::cos(theta), sn = std::sin(theta);
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            const double u = (static_cast<double>(x) * c + static_cast<double>(y) * sn) / s;
            img[y * side + x] += amp * std::sin(kTwoPi * cycles * u + phase);
        }
    }
}

}  // namespace

std::vector<RawImage> synth_images(std::size_t n_per_class, std::size_t side, std::uint64_t seed) {
    if (n_per_class < 10) throw ConfigError("synth.n_per_class", "must be >= 10");
    if (side < 4 || side > 65535) throw ConfigError("synth.side", "must lie in [4, 65535]");
    std::vector<RawImage> items;
    items.reserve(2 * n_per_class);
    for (std::size_t i = 0; i < n_per_class; ++i) {
        for (int label = 0; label < 2; ++label) {
            CounterRng rng(derive_seed(seed, {static_cast<std::uint64_t>(label), i}));
            std::vector<double> img(side * side, rng.uniform(0.3, 0.6));
            if (label == 0) {
                draw_blobs(img, side, rng);
            } else {
                draw_grating(img, side, rng);
            }
            const double noise = rng.uniform(0.03, 0.08);
            RawImage item;
            item.height = static_cast<std::uint16_t>(side);
            item.width = static_cast<std::uint16_t>(side);
            item.label = static_cast<std::uint8_t>(label);
            item.pixels.reserve(img.size());
            for (double v : img) item.pixels.push_back(to_byte(v + noise * rng.normal()));
            item.source_id = "synth-" + std::to_string(label) + "-" + std::to_string(i);
            items.push_back(std::move(item));
        }
    }
    return items;
}

void synth_dataset(std::size_t n_per_class, std::size_t side, std::uint64_t seed, const std::filesystem::path& path,
                   DatasetFormat format) {
    const auto items = synth_images(n_per_class, side, seed);
    if (format == DatasetFormat::raw) {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        write_raw_container(path, items);
    } else {
        write_pgm_directory(path, items);
    }
}

}  // namespace kd
