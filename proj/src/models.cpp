#include "kd/models.hpp"

#include <cmath>
#include <cstring>

#include "kd/rng.hpp"

namespace kd {

const char* to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::input: return "input";
        case LayerKind::conv: return "conv";
        case LayerKind::depthwise_conv: return "depthwise-conv";
        case LayerKind::dense: return "dense";
        case LayerKind::relu: return "relu";
        case LayerKind::max_pool: return "pool";
        case LayerKind::global_avg_pool: return "global-avg-pool";
        case LayerKind::dropout: return "dropout";
        case LayerKind::concat: return "concat";
        case LayerKind::residual_add: return "residual-add";
        case LayerKind::flatten: return "flatten";
        case LayerKind::log_softmax: return "log-softmax";
    }
    return "unknown";
}

void ArchScale::validate() const {
    auto fail = [](const char* key, const std::string& why) { throw ConfigError(key, why); };
    if (input_side < 8) fail("arch.input_side", "must be >= 8");
    if (base_width == 0) fail("arch.base_width", "must be positive");
    if (head_width == 0) fail("arch.head_width", "must be positive");
    if (branch_stages == 0) fail("arch.branch_stages", "must be positive");
    if (student_blocks == 0) fail("arch.student_blocks", "must be positive");
    if (student_expansion == 0) fail("arch.student_expansion", "must be positive");
    if ((input_side >> branch_stages) == 0) {
        fail("arch.branch_stages", "input side " + std::to_string(input_side) + " leaves no spatial extent after " +
                                       std::to_string(branch_stages) + " halvings");
    }
}

ModelGraph::ModelGraph(ModelKind kind, Shape input_shape, std::size_t classes)
    : kind_(kind), input_shape_(std::move(input_shape)), classes_(classes) {
    if (classes_ < 2) throw ConfigError("classes", "need at least 2 classes");
    if (input_shape_.size() != 3) throw ShapeError("model input must be C×H×W, got " + shape_str(input_shape_));
    LayerSpec in;
    in.kind = LayerKind::input;
    in.name = "input";
    push(std::move(in), input_shape_);
}

const Shape& ModelGraph::shape_of(std::size_t node) const {
    if (node >= shapes_.size()) throw ShapeError("layer input " + std::to_string(node) + " does not exist yet");
    return shapes_[node];
}

std::size_t ModelGraph::push(LayerSpec spec, Shape out) {
    layers_.push_back(std::move(spec));
    shapes_.push_back(std::move(out));
    return layers_.size() - 1;
}

std::size_t ModelGraph::add_param(std::string name, Shape shape) {
    Tensor value(std::move(shape));
    value.set_requires_grad(true);
    params_.push_back({std::move(name), std::move(value)});
    return params_.size() - 1;
}

std::size_t ModelGraph::add(LayerSpec spec) {
    auto need_inputs = [&](std::size_t n) {
        if (spec.inputs.size() != n) {
            throw ShapeError(std::string(to_string(spec.kind)) + " takes " + std::to_string(n) + " input(s)");
        }
    };
    auto need_rank = [&](const Shape& s, std::size_t r) {
        if (s.size() != r) {
            throw ShapeError(std::string(to_string(spec.kind)) + " '" + spec.name + "' expects rank " +
                             std::to_string(r) + " input, got " + shape_str(s));
        }
    };
    spec.params.clear();
    Shape out;
    switch (spec.kind) {
        case LayerKind::input:
            throw ShapeError("input node is implicit");
        case LayerKind::conv: {
            need_inputs(1);
            const auto& s = shape_of(spec.inputs[0]);
            need_rank(s, 3);
            if (spec.channels == 0 || spec.kernel == 0) throw ShapeError("conv needs channels and kernel");
            out = {spec.channels, ops::conv_out_extent(s[1], spec.kernel, spec.stride, spec.padding, "height"),
                   ops::conv_out_extent(s[2], spec.kernel, spec.stride, spec.padding, "width")};
            spec.params.push_back(add_param(spec.name + ".weight", {spec.channels, s[0], spec.kernel, spec.kernel}));
            spec.params.push_back(add_param(spec.name + ".bias", {spec.channels}));
            break;
        }
        case LayerKind::depthwise_conv: {
            need_inputs(1);
            const auto& s = shape_of(spec.inputs[0]);
            need_rank(s, 3);
            spec.channels = s[0];
            out = {s[0], ops::conv_out_extent(s[1], spec.kernel, spec.stride, spec.padding, "height"),
                   ops::conv_out_extent(s[2], spec.kernel, spec.stride, spec.padding, "width")};
            spec.params.push_back(add_param(spec.name + ".weight", {s[0], 1, spec.kernel, spec.kernel}));
            spec.params.push_back(add_param(spec.name + ".bias", {s[0]}));
            break;
        }
        case LayerKind::dense: {
            need_inputs(1);
            const auto& s = shape_of(spec.inputs[0]);
            need_rank(s, 1);
            if (spec.channels == 0) throw ShapeError("dense needs a positive unit count");
            out = {spec.channels};
            spec.params.push_back(add_param(spec.name + ".weight", {s[0], spec.channels}));
            spec.params.push_back(add_param(spec.name + ".bias", {spec.channels}));
            break;
        }
        case LayerKind::relu:
        case LayerKind::dropout:
        case LayerKind::log_softmax:
            need_inputs(1);
            out = shape_of(spec.inputs[0]);
            if (spec.kind == LayerKind::dropout && !(spec.rate >= 0.0 && spec.rate < 1.0)) {
                throw ConfigError("dropout", "rate must lie in [0, 1)");
            }
            if (spec.kind == LayerKind::log_softmax) need_rank(out, 1);
            break;
        case LayerKind::max_pool: {
            need_inputs(1);
            const auto& s = shape_of(spec.inputs[0]);
            need_rank(s, 3);
            out = {s[0], ops::conv_out_extent(s[1], spec.kernel, spec.stride, 0, "height"),
                   ops::conv_out_extent(s[2], spec.kernel, spec.stride, 0, "width")};
            break;
        }
        case LayerKind::global_avg_pool: {
            need_inputs(1);
            const auto& s = shape_of(spec.inputs[0]);
            need_rank(s, 3);
            out = {s[0]};
            break;
        }
        case LayerKind::flatten: {
            need_inputs(1);
            out = {shape_numel(shape_of(spec.inputs[0]))};
            break;
        }
        case LayerKind::concat: {
            need_inputs(2);
            const auto& a = shape_of(spec.inputs[0]);
            const auto& b = shape_of(spec.inputs[1]);
            need_rank(a, 3);
            need_rank(b, 3);
            if (a[1] != b[1] || a[2] != b[2]) {
                throw ShapeError("concat: spatial " + shape_str(a) + " vs " + shape_str(b));
            }
            out = {a[0] + b[0], a[1], a[2]};
            break;
        }
        case LayerKind::residual_add: {
            need_inputs(2);
            const auto& a = shape_of(spec.inputs[0]);
            if (a != shape_of(spec.inputs[1])) {
                throw ShapeError("residual-add: " + shape_str(a) + " vs " + shape_str(shape_of(spec.inputs[1])));
            }
            out = a;
            break;
        }
    }
    return push(std::move(spec), std::move(out));
}

namespace {

LayerSpec spec_of(LayerKind kind, std::vector<std::size_t> inputs, std::string name, std::string branch) {
    LayerSpec s;
    s.kind = kind;
    s.inputs = std::move(inputs);
    s.name = std::move(name);
    s.branch = std::move(branch);
    return s;
}

}  // namespace

std::size_t ModelGraph::conv(std::size_t in, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                             std::size_t padding, std::string name, std::string branch) {
    auto s = spec_of(LayerKind::conv, {in}, std::move(name), std::move(branch));
    s.channels = out_channels;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    return add(std::move(s));
}

std::size_t ModelGraph::depthwise_conv(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding,
                                       std::string name, std::string branch) {
    auto s = spec_of(LayerKind::depthwise_conv, {in}, std::move(name), std::move(branch));
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    return add(std::move(s));
}

std::size_t ModelGraph::dense(std::size_t in, std::size_t units, std::string name, std::string branch) {
    auto s = spec_of(LayerKind::dense, {in}, std::move(name), std::move(branch));
    s.channels = units;
    return add(std::move(s));
}

std::size_t ModelGraph::relu(std::size_t in, std::string branch) {
    return add(spec_of(LayerKind::relu, {in}, "relu", std::move(branch)));
}

std::size_t ModelGraph::max_pool(std::size_t in, std::size_t window, std::size_t stride, std::string branch) {
    auto s = spec_of(LayerKind::max_pool, {in}, "pool", std::move(branch));
    s.kernel = window;
    s.stride = stride;
    return add(std::move(s));
}

std::size_t ModelGraph::global_avg_pool(std::size_t in, std::string branch) {
    return add(spec_of(LayerKind::global_avg_pool, {in}, "gap", std::move(branch)));
}

std::size_t ModelGraph::dropout(std::size_t in, double rate, std::string branch) {
    auto s = spec_of(LayerKind::dropout, {in}, "dropout", std::move(branch));
    s.rate = rate;
    return add(std::move(s));
}

std::size_t ModelGraph::concat(std::size_t a, std::size_t b) {
    return add(spec_of(LayerKind::concat, {a, b}, "concat", {}));
}

std::size_t ModelGraph::residual_add(std::size_t a, std::size_t b, std::string branch) {
    return add(spec_of(LayerKind::residual_add, {a, b}, "add", std::move(branch)));
}

std::size_t ModelGraph::flatten(std::size_t in, std::string branch) {
    return add(spec_of(LayerKind::flatten, {in}, "flatten", std::move(branch)));
}

std::size_t ModelGraph::log_softmax(std::size_t in) {
    return add(spec_of(LayerKind::log_softmax, {in}, "log_softmax", {}));
}

void ModelGraph::initialize(std::uint64_t seed) {
    CounterRng rng(seed);
    for (auto& p : params_) {
        auto& t = p.value;
        if (t.rank() == 1) {
            std::fill(t.data().begin(), t.data().end(), 0.0f);
            continue;
        }
        // conv weight O×I×K×K: fan-in I·K·K; dense weight F×G: fan-in F.
        const std::size_t fan_in = t.rank() == 4 ? t.dim(1) * t.dim(2) * t.dim(3) : t.dim(0);
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
    }
}

void ModelGraph::set_trainable(bool on) {
    for (auto& p : params_) p.value.set_requires_grad(on);
}

bool ModelGraph::trainable() const {
    for (const auto& p : params_) {
        if (p.value.requires_grad()) return true;
    }
    return false;
}

void ModelGraph::validate() const {
    const Shape& out = shapes_.back();
    if (out.size() != 1 || out[0] != classes_) {
        throw ShapeError("model output " + shape_str(out) + " does not match class count " + std::to_string(classes_));
    }
    if (kind_ == ModelKind::teacher) {
        std::size_t merges = 0;
        for (const auto& l : layers_) {
            if (l.kind != LayerKind::concat) continue;
            ++merges;
            const auto& a = layers_[l.inputs[0]];
            const auto& b = layers_[l.inputs[1]];
            if (a.branch.empty() || b.branch.empty() || a.branch == b.branch) {
                throw ShapeError("teacher concat must merge two distinct named branches");
            }
        }
        if (merges != 1) throw ShapeError("teacher must contain exactly one concat, found " + std::to_string(merges));
    }
}

ModelGraph build_mini_teacher(const ArchScale& scale, std::size_t classes) {
    scale.validate();
    ModelGraph g(ModelKind::teacher, {1, scale.input_side, scale.input_side}, classes);

    // Branch a: plain stacked conv + relu + pool (VGG motif).
    std::size_t a = g.input();
    for (std::size_t s = 0; s < scale.branch_stages; ++s) {
        const std::size_t width = scale.base_width << s;
        a = g.conv(a, width, 3, 1, 1, "a.conv" + std::to_string(s), "a");
        a = g.relu(a, "a");
        a = g.max_pool(a, 2, 2, "a");
    }

    // Branch b: strided projection then pre-activation residual blocks
    // (ResNetV2 motif).
    std::size_t b = g.input();
    for (std::size_t s = 0; s < scale.branch_stages; ++s) {
        const std::size_t width = scale.base_width << s;
        const std::string stage = "b.stage" + std::to_string(s);
        b = g.conv(b, width, 3, 2, 1, stage + ".down", "b");
        for (std::size_t r = 0; r < scale.residual_blocks; ++r) {
            const std::string block = stage + ".block" + std::to_string(r);
            std::size_t x = g.relu(b, "b");
            x = g.conv(x, width, 3, 1, 1, block + ".conv0", "b");
            x = g.relu(x, "b");
            x = g.conv(x, width, 3, 1, 1, block + ".conv1", "b");
            b = g.residual_add(b, x, "b");
        }
    }
    b = g.relu(b, "b");

    std::size_t h = g.concat(a, b);
    // 1×1 head without activation, shrinking channels 4× as 4096 -> 1024 does.
    const std::size_t merged = g.node_shapes()[h][0];
    h = g.conv(h, std::max<std::size_t>(1, merged / 4), 1, 1, 0, "head.conv1x1");
    h = g.flatten(h);
    h = g.dense(h, scale.head_width, "head.fc");
    h = g.relu(h);
    h = g.dropout(h, 0.5);
    g.dense(h, classes, "head.out");
    g.validate();
    return g;
}

ModelGraph build_mini_student(const ArchScale& scale, std::size_t classes) {
    scale.validate();
    ModelGraph g(ModelKind::student, {1, scale.input_side, scale.input_side}, classes);
    std::size_t x = g.conv(g.input(), scale.base_width, 3, 2, 1, "stem");
    x = g.relu(x);
    std::size_t width = scale.base_width;
    for (std::size_t i = 0; i < scale.student_blocks; ++i) {
        // Every odd block downsamples and doubles the width.
        const bool down = i % 2 == 1 && g.node_shapes()[x][1] >= 4;
        const std::size_t stride = down ? 2 : 1;
        const std::size_t out_width = down ? width * 2 : width;
        const std::size_t hidden = width * scale.student_expansion;
        const std::string name = "block" + std::to_string(i);
        std::size_t y = g.conv(x, hidden, 1, 1, 0, name + ".expand");
        y = g.relu(y);
        y = g.depthwise_conv(y, 3, stride, 1, name + ".depthwise");
        y = g.relu(y);
        y = g.conv(y, out_width, 1, 1, 0, name + ".project");
        if (stride == 1 && out_width == width) y = g.residual_add(x, y);
        x = y;
        width = out_width;
    }
    x = g.global_avg_pool(x);
    g.dense(x, classes, "classifier");
    g.validate();
    return g;
}

namespace {

template <typename Emit>
void walk(const ModelGraph& model, std::vector<Var<float>>& values, Tape<float>& tape, bool training,
          std::uint64_t seed, Emit&& emit) {
    const auto& layers = model.layers();
    const auto& params = model.params();
    auto param = [&](const LayerSpec& l, std::size_t i) { return tape.leaf(params[l.params[i]].value); };
    for (std::size_t i = 1; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const auto in = values[l.inputs[0]];
        Var<float> out;
        switch (l.kind) {
            case LayerKind::conv:
                out = ad::conv2d(in, param(l, 0), param(l, 1), {l.stride, l.padding});
                break;
            case LayerKind::depthwise_conv:
                out = ad::depthwise_conv2d(in, param(l, 0), param(l, 1), {l.stride, l.padding});
                break;
            case LayerKind::dense:
                out = ad::dense(in, param(l, 0), param(l, 1));
                break;
            case LayerKind::relu:
                out = ad::relu(in);
                break;
            case LayerKind::max_pool:
                out = ad::max_pool2d(in, l.kernel, l.stride);
                break;
            case LayerKind::global_avg_pool:
                out = ad::global_avg_pool2d(in);
                break;
            case LayerKind::dropout:
                out = ad::dropout(in, l.rate, training, derive_seed(seed, {i}));
                break;
            case LayerKind::concat:
                out = ad::concat_channels(in, values[l.inputs[1]]);
                break;
            case LayerKind::residual_add:
                out = ad::add(in, values[l.inputs[1]]);
                break;
            case LayerKind::flatten:
                out = ad::flatten(in);
                break;
            case LayerKind::log_softmax:
                out = ad::log_softmax(in);
                break;
            case LayerKind::input:
                throw ShapeError("unexpected input node");
        }
        values.push_back(out);
        emit(i, out);
    }
}

void check_batch(const ModelGraph& model, const Shape& batch) {
    const auto& want = model.input_shape();
    if (batch.size() != 4 || batch[1] != want[0] || batch[2] != want[1] || batch[3] != want[2]) {
        throw ShapeError("batch " + shape_str(batch) + " does not match model input N×" + shape_str(want));
    }
}

}  // namespace

Var<float> forward(Tape<float>& tape, const ModelGraph& model, Var<float> batch, bool training, std::uint64_t seed) {
    check_batch(model, batch.shape());
    std::vector<Var<float>> values{batch};
    values.reserve(model.layers().size());
    walk(model, values, tape, training, seed, [](std::size_t, Var<float>) {});
    return values.back();
}

std::vector<Tensor> forward_all(const ModelGraph& model, const Tensor& batch, bool training, std::uint64_t seed) {
    check_batch(model, batch.shape());
    Tape<float> tape;
    tape.set_grad_enabled(false);
    std::vector<Var<float>> values{tape.leaf(batch)};
    walk(model, values, tape, training, seed, [](std::size_t, Var<float>) {});
    std::vector<Tensor> out;
    for (const auto& v : values) out.push_back(v.value());
    return out;
}

Tensor forward(const ModelGraph& model, const Tensor& batch, bool training, std::uint64_t seed) {
    check_batch(model, batch.shape());
    Tape<float> tape;
    tape.set_grad_enabled(false);
    std::vector<Var<float>> values{tape.leaf(batch)};
    values.reserve(model.layers().size());
    walk(model, values, tape, training, seed, [](std::size_t, Var<float>) {});
    return values.back().value();
}

std::size_t count_params(const ModelGraph& model) {
    std::size_t total = 0;
    for (const auto& p : model.params()) total += p.value.size();
    return total;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) throw ShapeError("argmax_rows: logits must be N×K, got " + shape_str(logits.shape()));
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j) {
            if (logits[i * k + j] > logits[i * k + best]) best = j;
        }
        out[i] = static_cast<int>(best);
    }
    return out;
}

std::vector<int> predict(const ModelGraph& model, const Tensor& batch) {
    return argmax_rows(forward(model, batch, false));
}

std::uint64_t param_hash(const ModelGraph& model) {
    std::uint64_t h = kFnvOffset;
    for (const auto& p : model.params()) h = fnv1a64(p.value.raw(), p.value.size() * sizeof(float), h);
    return h;
}

}  // namespace kd
