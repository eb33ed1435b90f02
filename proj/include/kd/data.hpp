#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kd/rng.hpp"
#include "kd/tensor.hpp"

namespace kd {

/// Grayscale images N×1×H×W in [0,1] with binary labels (1 = positive).
struct Dataset {
    Tensor images;
    std::vector<int> labels;
    std::vector<std::string> source_ids;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t side() const { return images.dim(2); }
};

enum class DatasetFormat { raw, pgm };

DatasetFormat parse_dataset_format(const std::string& name);

/// One undecoded image as stored on disk.
struct RawImage {
    std::uint16_t height = 0;
    std::uint16_t width = 0;
    std::uint8_t label = 0;
    std::vector<std::uint8_t> pixels;
    std::string source_id;
};

// "KDDS" container: magic, version 0x01, u32 LE count, then per item
// u16 LE height, u16 LE width, u8 label, height*width pixel bytes.
std::vector<std::uint8_t> encode_raw_container(std::span<const RawImage> items);
std::vector<RawImage> decode_raw_container(std::span<const std::uint8_t> bytes);
void write_raw_container(const std::filesystem::path& path, std::span<const RawImage> items);

/// Binary P5 files plus `manifest.txt` of "<relative-path> <label>" lines.
void write_pgm_directory(const std::filesystem::path& dir, std::span<const RawImage> items);
std::vector<RawImage> read_pgm_directory(const std::filesystem::path& dir);

/// Load and normalize. Images are resized to `side`×`side` when given;
/// otherwise they must all share one size.
Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format,
                     std::optional<std::size_t> side = std::nullopt);
Dataset to_dataset(std::span<const RawImage> items, std::optional<std::size_t> side = std::nullopt);

/// Pixel values in [0,255] scaled into [0,1].
Tensor normalize(const Tensor& images);

/// Half-pixel-center bilinear resize of an H×W image.
Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w);

struct AugmentConfig {
    double rotation_lo = 0.0;
    double rotation_hi = 20.0;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Rotate an H×W image counter-clockwise by `degrees` about its center,
/// bilinear sampling, zero fill outside.
Tensor rotate(const Tensor& image, double degrees);

/// Rotation by an angle drawn uniformly from the configured range.
Tensor rotate_augment(const Tensor& image, const AugmentConfig& cfg, CounterRng& rng);

/// Minority-class indices resampled with replacement until both classes
/// match. Output is `train_indices` in order followed by the resamples.
std::vector<std::size_t> oversample_balance(std::span<const int> labels, std::span<const std::size_t> train_indices,
                                            std::uint64_t seed);

struct HoldoutSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// Stratified split; per class floor(n·(1−train_fraction)) items go to test.
HoldoutSplit split_holdout(std::span<const int> labels, double train_fraction, std::uint64_t seed);

struct FoldPlan {
    std::size_t k = 0;
    std::vector<std::vector<std::size_t>> folds;
    std::vector<std::size_t> holdout;
    std::uint64_t seed = 0;

    /// Every non-holdout index outside fold `f`.
    std::vector<std::size_t> training_indices(std::size_t f) const;
};

/// Per-class shuffle then round-robin dealing that continues across classes.
FoldPlan make_stratified_folds(std::span<const int> labels, std::span<const std::size_t> train_indices, std::size_t k,
                               std::uint64_t seed);

/// Throws DataError when any validation index appears in `training`.
void assert_no_leakage(std::span<const std::size_t> training, std::span<const std::size_t> validation);

/// Gather images by index into N×1×H×W, rotating each when `augment` is set.
Tensor gather_images(const Dataset& data, std::span<const std::size_t> indices, const AugmentConfig* augment,
                     std::uint64_t augment_stream);
std::vector<int> gather_labels(const Dataset& data, std::span<const std::size_t> indices);

}  // namespace kd
