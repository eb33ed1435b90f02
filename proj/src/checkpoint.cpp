#include <fmt/core.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "kd/experiment.hpp"

namespace kd {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'K', 'D', 'C', 'K'};
// Sanity bounds so a corrupted count cannot trigger a huge allocation.
constexpr std::uint32_t kMaxString = 4096;
constexpr std::uint32_t kMaxRank = 8;

class Writer {
   public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    template <typename U>
    void le(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u32(std::size_t v) {
        if (v > 0xffffffffULL) throw DataError("checkpoint: value " + std::to_string(v) + " exceeds 32 bits");
        le(static_cast<std::uint32_t>(v));
    }
    void str(const std::string& s) {
        u32(s.size());
        bytes(s.data(), s.size());
    }
    void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
    std::vector<std::uint8_t>& buffer() { return out_; }

   private:
    std::vector<std::uint8_t> out_;
};

class Reader {
   public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

    void need(std::size_t n, const char* what) const {
        if (pos_ + n > b_.size()) {
            throw CheckpointError(CheckpointFault::truncated,
                                  "truncated while reading " + std::string(what) + ": expected at least " +
                                      std::to_string(pos_ + n) + " bytes, file has " + std::to_string(b_.size()));
        }
    }
    template <typename U>
    U le(const char* what) {
        need(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
        pos_ += sizeof(U);
        return v;
    }
    std::uint32_t u32(const char* what) { return le<std::uint32_t>(what); }
    std::string str(const char* what) {
        const auto n = u32(what);
        if (n > kMaxString) throw CheckpointError(CheckpointFault::malformed, std::string(what) + " length " + std::to_string(n));
        need(n, what);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    float f32(const char* what) { return std::bit_cast<float>(le<std::uint32_t>(what)); }
    double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }
    std::size_t pos() const { return pos_; }

   private:
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelGraph& model, std::uint64_t config_hash, std::uint64_t seed) {
    Writer w;
    w.bytes(kMagic.data(), kMagic.size());
    w.le(kCheckpointVersion);
    w.le(static_cast<std::uint8_t>(model.kind()));
    for (auto d : model.input_shape()) w.u32(d);
    w.u32(model.classes());

    const auto& layers = model.layers();
    w.u32(layers.size() - 1);
    for (std::size_t i = 1; i < layers.size(); ++i) {
        const auto& s = layers[i];
        w.le(static_cast<std::uint8_t>(s.kind));
        w.str(s.name);
        w.str(s.branch);
        w.u32(s.inputs.size());
        for (auto in : s.inputs) w.u32(in);
        w.u32(s.channels);
        w.u32(s.kernel);
        w.u32(s.stride);
        w.u32(s.padding);
        w.f64(s.rate);
    }

    w.u32(model.params().size());
    for (const auto& p : model.params()) {
        w.str(p.name);
        w.u32(p.value.rank());
        for (auto d : p.value.shape()) w.u32(d);
        for (float v : p.value.data()) w.f32(v);
    }
    w.le(config_hash);
    w.le(seed);
    auto& out = w.buffer();
    const auto checksum = fnv1a64(out.data(), out.size());
    w.le(checksum);
    return std::move(out);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, std::optional<std::uint64_t> expected_config_hash) {
    Reader r(bytes);
    r.need(kMagic.size(), "magic");
    if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
        throw CheckpointError(CheckpointFault::bad_magic, "bad magic (not a KDCK file)");
    }
    for (std::size_t i = 0; i < kMagic.size(); ++i) r.le<std::uint8_t>("magic");
    const auto version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw CheckpointError(CheckpointFault::version_mismatch, "version " + std::to_string(version) +
                                                                     ", this build reads version " +
                                                                     std::to_string(kCheckpointVersion));
    }
    const auto kind = r.le<std::uint8_t>("model kind");
    if (kind > static_cast<std::uint8_t>(ModelKind::custom)) {
        throw CheckpointError(CheckpointFault::malformed, "unknown model kind " + std::to_string(kind));
    }
    Shape input(3);
    for (auto& d : input) d = r.u32("input shape");
    const auto classes = r.u32("class count");

    auto malformed = [](const std::string& what) { return CheckpointError(CheckpointFault::malformed, what); };
    std::optional<ModelGraph> model;
    try {
        model.emplace(static_cast<ModelKind>(kind), input, classes);
    } catch (const Error& e) {
        throw malformed(e.what());
    }
    const auto n_layers = r.u32("layer count");
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        LayerSpec s;
        const auto layer_kind = r.le<std::uint8_t>("layer kind");
        if (layer_kind == 0 || layer_kind > static_cast<std::uint8_t>(LayerKind::log_softmax)) {
            throw malformed("layer " + std::to_string(i + 1) + ": unknown kind " + std::to_string(layer_kind));
        }
        s.kind = static_cast<LayerKind>(layer_kind);
        s.name = r.str("layer name");
        s.branch = r.str("layer branch");
        const auto n_inputs = r.u32("layer inputs");
        if (n_inputs > 2) throw malformed("layer " + std::to_string(i + 1) + ": " + std::to_string(n_inputs) + " inputs");
        for (std::uint32_t k = 0; k < n_inputs; ++k) s.inputs.push_back(r.u32("layer input"));
        s.channels = r.u32("layer channels");
        s.kernel = r.u32("layer kernel");
        s.stride = r.u32("layer stride");
        s.padding = r.u32("layer padding");
        s.rate = r.f64("layer rate");
        try {
            model->add(std::move(s));
        } catch (const Error& e) {
            throw malformed("layer " + std::to_string(i + 1) + ": " + e.what());
        }
    }

    const auto n_params = r.u32("parameter count");
    if (n_params != model->params().size()) {
        throw malformed("expected " + std::to_string(model->params().size()) + " parameter tensors, file lists " +
                        std::to_string(n_params));
    }
    for (auto& p : model->params()) {
        const auto name = r.str("parameter name");
        if (name != p.name) throw malformed("parameter '" + name + "' where '" + p.name + "' was expected");
        const auto rank = r.u32("parameter rank");
        if (rank > kMaxRank) throw malformed("parameter '" + name + "' rank " + std::to_string(rank));
        Shape shape(rank);
        for (auto& d : shape) d = r.u32("parameter shape");
        if (shape != p.value.shape()) {
            throw malformed("parameter '" + name + "' shape " + shape_str(shape) + ", layers imply " +
                            shape_str(p.value.shape()));
        }
        r.need(p.value.size() * 4, "parameter data");
        for (auto& v : p.value.data()) v = r.f32("parameter data");
    }

    Checkpoint ck{std::move(*model), 0, 0};
    ck.config_hash = r.le<std::uint64_t>("config hash");
    ck.seed = r.le<std::uint64_t>("seed");
    const auto body = r.pos();
    const auto stored = r.le<std::uint64_t>("checksum");
    if (r.pos() != bytes.size()) {
        throw malformed(std::to_string(bytes.size() - r.pos()) + " trailing bytes after checksum");
    }
    if (fnv1a64(bytes.data(), body) != stored) {
        throw CheckpointError(CheckpointFault::checksum_mismatch, "checksum mismatch (file is corrupted)");
    }
    if (expected_config_hash && *expected_config_hash != ck.config_hash) {
        throw CheckpointError(CheckpointFault::hash_mismatch,
                              fmt::format("config hash {:016x} does not match the current config {:016x}",
                                          ck.config_hash, *expected_config_hash));
    }
    return ck;
}

void save_checkpoint(const ModelGraph& model, const std::filesystem::path& path, std::uint64_t config_hash,
                     std::uint64_t seed) {
    const auto bytes = encode_checkpoint(model, config_hash, seed);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ExitCode::data, "cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ExitCode::data, "write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_config_hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PrerequisiteError("checkpoint not found: " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_checkpoint(bytes, expected_config_hash);
    } catch (const CheckpointError& e) {
        throw CheckpointError(e.fault(), std::string(e.what()).substr(12) + " [" + path.string() + "]");
    }
}

}  // namespace kd
