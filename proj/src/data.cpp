#include "kd/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <sstream>

namespace kd {

namespace {

constexpr std::uint8_t kContainerVersion = 0x01;
constexpr std::size_t kContainerHeader = 9;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + path.string());
}

std::uint32_t read_u32(std::span<const std::uint8_t> b, std::size_t at) {
    return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
           static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

std::uint16_t read_u16(std::span<const std::uint8_t> b, std::size_t at) {
    return static_cast<std::uint16_t>(b[at] | b[at + 1] << 8);
}

}  // namespace

DatasetFormat parse_dataset_format(const std::string& name) {
    if (name == "raw" || name == "raw-container") return DatasetFormat::raw;
    if (name == "pgm" || name == "pgm-directory") return DatasetFormat::pgm;
    throw ConfigError("dataset.format", "expected raw or pgm, got '" + name + "'");
}

std::vector<std::uint8_t> encode_raw_container(std::span<const RawImage> items) {
    std::vector<std::uint8_t> out{'K', 'D', 'D', 'S', kContainerVersion};
    const auto n = static_cast<std::uint32_t>(items.size());
    for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>(n >> s));
    for (const auto& item : items) {
        if (item.pixels.size() != std::size_t{item.height} * item.width) {
            throw DataError("image '" + item.source_id + "' has " + std::to_string(item.pixels.size()) +
                            " pixels for " + std::to_string(item.height) + "x" + std::to_string(item.width));
        }
        out.push_back(static_cast<std::uint8_t>(item.height));
        out.push_back(static_cast<std::uint8_t>(item.height >> 8));
        out.push_back(static_cast<std::uint8_t>(item.width));
        out.push_back(static_cast<std::uint8_t>(item.width >> 8));
        out.push_back(item.label);
        out.insert(out.end(), item.pixels.begin(), item.pixels.end());
    }
    return out;
}

std::vector<RawImage> decode_raw_container(std::span<const std::uint8_t> b) {
    if (b.size() < kContainerHeader) {
        throw DataError("malformed header at byte 0: need " + std::to_string(kContainerHeader) + " bytes, file has " +
                        std::to_string(b.size()));
    }
    if (!std::equal(b.begin(), b.begin() + 4, "KDDS")) throw DataError("malformed header at byte 0: bad magic");
    if (b[4] != kContainerVersion) {
        throw DataError("malformed header at byte 4: unsupported version " + std::to_string(b[4]));
    }
    const std::uint32_t n = read_u32(b, 5);
    std::vector<RawImage> items;
    std::size_t at = kContainerHeader;
    for (std::uint32_t i = 0; i < n; ++i) {
        if (at + 5 > b.size()) {
            throw DataError("truncated item header at byte " + std::to_string(at) + " (item " + std::to_string(i) +
                            " of " + std::to_string(n) + ")");
        }
        RawImage img;
        img.height = read_u16(b, at);
        img.width = read_u16(b, at + 2);
        img.label = b[at + 4];
        if (img.height == 0 || img.width == 0) {
            throw DataError("malformed item header at byte " + std::to_string(at) + ": zero image extent");
        }
        if (img.label > 1) {
            throw DataError("label " + std::to_string(img.label) + " outside {0,1} at byte " + std::to_string(at + 4));
        }
        at += 5;
        const std::size_t px = std::size_t{img.height} * img.width;
        if (at + px > b.size()) {
            throw DataError("truncated pixel data at byte " + std::to_string(at) + ": expected " + std::to_string(px) +
                            " bytes, have " + std::to_string(b.size() - at));
        }
        img.pixels.assign(b.begin() + static_cast<std::ptrdiff_t>(at), b.begin() + static_cast<std::ptrdiff_t>(at + px));
        img.source_id = "item" + std::to_string(i);
        items.push_back(std::move(img));
        at += px;
    }
    if (at != b.size()) {
        throw DataError("malformed container: " + std::to_string(b.size() - at) + " trailing bytes at byte " +
                        std::to_string(at));
    }
    return items;
}

void write_raw_container(const std::filesystem::path& path, std::span<const RawImage> items) {
    write_file(path, encode_raw_container(items));
}

void write_pgm_directory(const std::filesystem::path& dir, std::span<const RawImage> items) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
    if (!manifest) throw DataError("cannot write " + (dir / "manifest.txt").string());
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& item = items[i];
        const std::string name = "img" + std::to_string(i) + ".pgm";
        std::string header = "P5\n" + std::to_string(item.width) + " " + std::to_string(item.height) + "\n255\n";
        std::vector<std::uint8_t> bytes(header.begin(), header.end());
        bytes.insert(bytes.end(), item.pixels.begin(), item.pixels.end());
        write_file(dir / name, bytes);
        manifest << name << ' ' << static_cast<int>(item.label) << '\n';
    }
}

namespace {

RawImage read_pgm(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    std::size_t at = 0;
    auto token = [&]() {
        while (at < bytes.size()) {
            if (bytes[at] == '#') {
                while (at < bytes.size() && bytes[at] != '\n') ++at;
            } else if (std::isspace(bytes[at])) {
                ++at;
            } else {
                break;
            }
        }
        std::string t;
        while (at < bytes.size() && !std::isspace(bytes[at])) t.push_back(static_cast<char>(bytes[at++]));
        return t;
    };
    auto number = [&](const char* what) {
        const auto t = token();
        try {
            std::size_t used = 0;
            const auto v = std::stoul(t, &used);
            if (used != t.size()) throw std::invalid_argument(t);
            return v;
        } catch (const std::exception&) {
            throw DataError("malformed PGM header in " + path.string() + " at byte " + std::to_string(at) + ": bad " +
                            what + " '" + t + "'");
        }
    };
    if (token() != "P5") throw DataError("malformed PGM header in " + path.string() + " at byte 0: expected P5");
    const auto w = number("width");
    const auto h = number("height");
    const auto maxval = number("maxval");
    if (maxval != 255 || w == 0 || h == 0 || w > 65535 || h > 65535) {
        throw DataError("malformed PGM header in " + path.string() + ": need maxval 255 and extent in [1, 65535]");
    }
    ++at;  // single whitespace after maxval
    RawImage img;
    img.width = static_cast<std::uint16_t>(w);
    img.height = static_cast<std::uint16_t>(h);
    if (at + w * h > bytes.size()) {
        throw DataError("truncated pixel data in " + path.string() + " at byte " + std::to_string(at) + ": expected " +
                        std::to_string(w * h) + " bytes, have " +
                        std::to_string(bytes.size() > at ? bytes.size() - at : 0));
    }
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(at),
                      bytes.begin() + static_cast<std::ptrdiff_t>(at + w * h));
    return img;
}

}  // namespace

std::vector<RawImage> read_pgm_directory(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.txt";
    std::ifstream manifest(manifest_path);
    if (!manifest) throw DataError("cannot open manifest " + manifest_path.string());
    std::vector<RawImage> items;
    std::string line;
    for (std::size_t lineno = 1; std::getline(manifest, line); ++lineno) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream fields(line);
        std::string rel, label, extra;
        if (!(fields >> rel >> label) || (fields >> extra)) {
            throw DataError("manifest line " + std::to_string(lineno) + ": expected '<relative-path> <label>'");
        }
        if (label != "0" && label != "1") {
            throw DataError("manifest line " + std::to_string(lineno) + ": label '" + label + "' outside {0,1}");
        }
        auto img = read_pgm(dir / rel);
        img.label = static_cast<std::uint8_t>(label[0] - '0');
        img.source_id = rel;
        items.push_back(std::move(img));
    }
    return items;
}

Tensor normalize(const Tensor& images) {
    Tensor out(images.shape());
    for (std::size_t i = 0; i < images.size(); ++i) {
        const float v = images[i];
        if (!(v >= 0.0f && v <= 255.0f)) {
            throw DataError("normalize: pixel " + std::to_string(v) + " at element " + std::to_string(i) +
                            " outside [0, 255]");
        }
        out[i] = v / 255.0f;
    }
    return out;
}

Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
    if (image.rank() != 2) throw ShapeError("resize_bilinear: expected H×W, got " + shape_str(image.shape()));
    if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: output extent must be positive");
    const std::size_t in_h = image.dim(0), in_w = image.dim(1);
    if (in_h == out_h && in_w == out_w) return image;
    auto source = [](std::size_t dst, std::size_t in, std::size_t out, std::size_t& lo, std::size_t& hi, double& frac) {
        double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        lo = static_cast<std::size_t>(std::floor(s));
        hi = std::min(lo + 1, in - 1);
        frac = s - static_cast<double>(lo);
    };
    Tensor out({out_h, out_w});
    for (std::size_t y = 0; y < out_h; ++y) {
        std::size_t y0, y1;
        double fy;
        source(y, in_h, out_h, y0, y1, fy);
        for (std::size_t x = 0; x < out_w; ++x) {
            std::size_t x0, x1;
            double fx;
            source(x, in_w, out_w, x0, x1, fx);
            const double top = image[y0 * in_w + x0] * (1 - fx) + image[y0 * in_w + x1] * fx;
            const double bottom = image[y1 * in_w + x0] * (1 - fx) + image[y1 * in_w + x1] * fx;
            out[y * out_w + x] = static_cast<float>(top * (1 - fy) + bottom * fy);
        }
    }
    return out;
}

Dataset to_dataset(std::span<const RawImage> items, std::optional<std::size_t> side) {
    if (items.empty()) throw DataError("empty dataset");
    const std::size_t h = side ? *side : items.front().height;
    const std::size_t w = side ? *side : items.front().width;
    Dataset d;
    d.images = Tensor({items.size(), 1, h, w});
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& item = items[i];
        if (!side && (item.height != h || item.width != w)) {
            throw DataError("image " + std::to_string(i) + " is " + std::to_string(item.height) + "x" +
                            std::to_string(item.width) + ", expected " + std::to_string(h) + "x" + std::to_string(w) +
                            " (set a target side to resize)");
        }
        Tensor px({item.height, item.width});
        for (std::size_t j = 0; j < item.pixels.size(); ++j) px[j] = item.pixels[j];
        const Tensor img = resize_bilinear(normalize(px), h, w);
        std::copy(img.data().begin(), img.data().end(), d.images.raw() + i * h * w);
        d.labels.push_back(item.label);
        d.source_ids.push_back(item.source_id);
    }
    return d;
}

Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format, std::optional<std::size_t> side) {
    const auto items = format == DatasetFormat::raw ? decode_raw_container(read_file(path)) : read_pgm_directory(path);
    return to_dataset(items, side);
}

void AugmentConfig::validate() const {
    if (!(rotation_lo >= 0.0 && rotation_lo <= rotation_hi && rotation_hi < 360.0)) {
        throw ConfigError("augment.rotation", "need 0 <= lo <= hi < 360");
    }
}

Tensor rotate(const Tensor& image, double degrees) {
    if (image.rank() != 2) throw ShapeError("rotate: expected H×W, got " + shape_str(image.shape()));
    const std::size_t h = image.dim(0), w = image.dim(1);
    const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
    const double rad = degrees * std::numbers::pi / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    auto pixel = [&](std::ptrdiff_t y, std::ptrdiff_t x) -> double {
        if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) || x >= static_cast<std::ptrdiff_t>(w)) return 0.0;
        return image[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
    };
    Tensor out({h, w});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            // Inverse map: rotate the output coordinate by -angle (y axis points down).
            const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
            const double sx = c * dx - s * dy + cx;
            const double sy = s * dx + c * dy + cy;
            const double fx0 = std::floor(sx), fy0 = std::floor(sy);
            const double fx = sx - fx0, fy = sy - fy0;
            const auto x0 = static_cast<std::ptrdiff_t>(fx0), y0 = static_cast<std::ptrdiff_t>(fy0);
            double v = 0.0;
            if (fx == 0.0 && fy == 0.0) {
                v = pixel(y0, x0);
            } else {
                v = (pixel(y0, x0) * (1 - fx) + pixel(y0, x0 + 1) * fx) * (1 - fy) +
                    (pixel(y0 + 1, x0) * (1 - fx) + pixel(y0 + 1, x0 + 1) * fx) * fy;
            }
            out[y * w + x] = static_cast<float>(v);
        }
    }
    return out;
}

Tensor rotate_augment(const Tensor& image, const AugmentConfig& cfg, CounterRng& rng) {
    const double angle = rng.uniform(cfg.rotation_lo, cfg.rotation_hi);
    if (angle == 0.0) return image;
    return rotate(image, angle);
}

namespace {

void check_labels(std::span<const int> labels, std::span<const std::size_t> indices) {
    for (auto i : indices) {
        if (i >= labels.size()) throw DataError("index " + std::to_string(i) + " outside dataset");
        if (labels[i] != 0 && labels[i] != 1) throw DataError("label outside {0,1} at index " + std::to_string(i));
    }
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

}  // namespace

std::vector<std::size_t> oversample_balance(std::span<const int> labels, std::span<const std::size_t> train_indices,
                                            std::uint64_t seed) {
    check_labels(labels, train_indices);
    std::vector<std::size_t> by_class[2];
    for (auto i : train_indices) by_class[labels[i]].push_back(i);
    if (by_class[0].empty() || by_class[1].empty()) {
        throw DataError("oversample_balance: both classes must be present among the training indices");
    }
    const auto& minority = by_class[0].size() < by_class[1].size() ? by_class[0] : by_class[1];
    const std::size_t deficit = std::max(by_class[0].size(), by_class[1].size()) - minority.size();
    std::vector<std::size_t> out(train_indices.begin(), train_indices.end());
    CounterRng rng(seed);
    for (std::size_t i = 0; i < deficit; ++i) out.push_back(minority[rng.below(minority.size())]);
    return out;
}

HoldoutSplit split_holdout(std::span<const int> labels, double train_fraction, std::uint64_t seed) {
    if (labels.size() < 5) throw DataError("split_holdout: need at least 5 items, have " + std::to_string(labels.size()));
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw ConfigError("split.train_fraction", "must lie in (0, 1)");
    }
    const auto idx = all_indices(labels.size());
    check_labels(labels, idx);
    HoldoutSplit split;
    CounterRng rng(seed);
    for (int c = 0; c < 2; ++c) {
        std::vector<std::size_t> members;
        for (auto i : idx) {
            if (labels[i] == c) members.push_back(i);
        }
        if (members.size() < 2) {
            throw DataError("split_holdout: class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                            " item(s), need at least 2");
        }
        rng.shuffle(std::span(members));
        const auto n_test = static_cast<std::size_t>(
            std::floor(static_cast<double>(members.size()) * (1.0 - train_fraction) + 1e-9));
        split.test.insert(split.test.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_test));
        split.train.insert(split.train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_test), members.end());
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

FoldPlan make_stratified_folds(std::span<const int> labels, std::span<const std::size_t> train_indices, std::size_t k,
                               std::uint64_t seed) {
    if (k < 2) throw ConfigError("split.k", "need k >= 2");
    check_labels(labels, train_indices);
    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    plan.folds.resize(k);
    CounterRng rng(seed);
    std::size_t dealer = 0;
    for (int c = 0; c < 2; ++c) {
        std::vector<std::size_t> members;
        for (auto i : train_indices) {
            if (labels[i] == c) members.push_back(i);
        }
        if (members.size() < k) {
            throw DataError("make_stratified_folds: class " + std::to_string(c) + " has " +
                            std::to_string(members.size()) + " item(s), fewer than k=" + std::to_string(k));
        }
        std::sort(members.begin(), members.end());
        rng.shuffle(std::span(members));
        for (auto i : members) plan.folds[dealer++ % k].push_back(i);
    }
    for (auto& f : plan.folds) std::sort(f.begin(), f.end());

    std::set<std::size_t> train(train_indices.begin(), train_indices.end());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (!train.count(i)) plan.holdout.push_back(i);
    }
    return plan;
}

std::vector<std::size_t> FoldPlan::training_indices(std::size_t f) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < folds.size(); ++j) {
        if (j != f) out.insert(out.end(), folds[j].begin(), folds[j].end());
    }
    std::sort(out.begin(), out.end());
    return out;
}

void assert_no_leakage(std::span<const std::size_t> training, std::span<const std::size_t> validation) {
    const std::set<std::size_t> held(validation.begin(), validation.end());
    for (auto i : training) {
        if (held.count(i)) throw DataError("leakage: validation index " + std::to_string(i) + " present in training set");
    }
}

Tensor gather_images(const Dataset& data, std::span<const std::size_t> indices, const AugmentConfig* augment,
                     std::uint64_t augment_stream) {
    const std::size_t h = data.images.dim(2), w = data.images.dim(3), plane = h * w;
    Tensor out({indices.size(), 1, h, w});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const float* src = data.images.raw() + indices[i] * plane;
        if (!augment) {
            std::copy_n(src, plane, out.raw() + i * plane);
            continue;
        }
        Tensor img({h, w}, std::vector<float>(src, src + plane));
        CounterRng rng(derive_seed(augment_stream, {augment->seed, i}));
        const Tensor rotated = rotate_augment(img, *augment, rng);
        std::copy(rotated.data().begin(), rotated.data().end(), out.raw() + i * plane);
    }
    return out;
}

std::vector<int> gather_labels(const Dataset& data, std::span<const std::size_t> indices) {
    std::vector<int> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(data.labels.at(i));
    return out;
}

}  // namespace kd
