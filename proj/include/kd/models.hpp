#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kd/autodiff.hpp"

namespace kd {

enum class LayerKind : std::uint8_t {
    input = 0,
    conv = 1,
    depthwise_conv = 2,
    dense = 3,
    relu = 4,
    max_pool = 5,
    global_avg_pool = 6,
    dropout = 7,
    concat = 8,
    residual_add = 9,
    flatten = 10,
    log_softmax = 11,
};

const char* to_string(LayerKind kind);

struct LayerSpec {
    LayerKind kind = LayerKind::input;
    std::string name;
    /// Teacher branch tag ("a", "b"), empty on the shared trunk.
    std::string branch;
    std::vector<std::size_t> inputs;
    std::size_t channels = 0;  // conv output channels / dense units
    std::size_t kernel = 0;    // conv kernel side / pooling window
    std::size_t stride = 1;
    std::size_t padding = 0;
    double rate = 0.0;  // dropout
    /// Indices into ModelGraph::params(), weight first then bias.
    std::vector<std::size_t> params;
};

struct NamedParam {
    std::string name;
    Tensor value;
};

enum class ModelKind : std::uint8_t { teacher = 0, student = 1, custom = 2 };

/// Desk-scale sizing of the miniature networks.
struct ArchScale {
    std::size_t input_side = 32;
    std::size_t base_width = 8;
    /// Downsampling stages per teacher branch; each halves the spatial side.
    std::size_t branch_stages = 2;
    /// Pre-activation residual blocks per stage of the residual branch.
    std::size_t residual_blocks = 1;
    std::size_t student_blocks = 3;
    std::size_t student_expansion = 2;
    std::size_t head_width = 64;

    void validate() const;
};

/// Layer DAG with owned parameters. Nodes are stored in evaluation order;
/// node 0 is the input.
class ModelGraph {
   public:
    /// `input_shape` is C×H×W of one sample.
    ModelGraph(ModelKind kind, Shape input_shape, std::size_t classes);

    std::size_t input() const noexcept { return 0; }

    std::size_t conv(std::size_t in, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                     std::size_t padding, std::string name, std::string branch = {});
    std::size_t depthwise_conv(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding,
                               std::string name, std::string branch = {});
    std::size_t dense(std::size_t in, std::size_t units, std::string name, std::string branch = {});
    std::size_t relu(std::size_t in, std::string branch = {});
    std::size_t max_pool(std::size_t in, std::size_t window, std::size_t stride, std::string branch = {});
    std::size_t global_avg_pool(std::size_t in, std::string branch = {});
    std::size_t dropout(std::size_t in, double rate, std::string branch = {});
    std::size_t concat(std::size_t a, std::size_t b);
    std::size_t residual_add(std::size_t a, std::size_t b, std::string branch = {});
    std::size_t flatten(std::size_t in, std::string branch = {});
    std::size_t log_softmax(std::size_t in);

    /// Append a node from a serialized spec; parameter tensors are allocated
    /// from the inferred shapes and zero-filled.
    std::size_t add(LayerSpec spec);

    /// Fan-in-scaled uniform weights, zero biases.
    void initialize(std::uint64_t seed);

    ModelKind kind() const noexcept { return kind_; }
    const Shape& input_shape() const noexcept { return input_shape_; }
    std::size_t classes() const noexcept { return classes_; }
    const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    /// Per-sample output shape of each node (no batch axis).
    const std::vector<Shape>& node_shapes() const noexcept { return shapes_; }
    const std::vector<NamedParam>& params() const noexcept { return params_; }
    std::vector<NamedParam>& params() noexcept { return params_; }

    void set_trainable(bool on);
    bool trainable() const;

    /// Checks end-to-end shapes, the class-count output and (for teachers)
    /// the single two-branch merge.
    void validate() const;

   private:
    std::size_t push(LayerSpec spec, Shape out);
    std::size_t add_param(std::string name, Shape shape);
    const Shape& shape_of(std::size_t node) const;

    ModelKind kind_;
    Shape input_shape_;
    std::size_t classes_;
    std::vector<LayerSpec> layers_;
    std::vector<Shape> shapes_;
    std::vector<NamedParam> params_;
};

ModelGraph build_mini_teacher(const ArchScale& scale, std::size_t classes);
ModelGraph build_mini_student(const ArchScale& scale, std::size_t classes);

/// Record a forward pass on `tape`; returns the output node (logits).
Var<float> forward(Tape<float>& tape, const ModelGraph& model, Var<float> batch, bool training,
                   std::uint64_t seed);

/// Output of every node for `batch` (N×C×H×W); used for shape checks.
std::vector<Tensor> forward_all(const ModelGraph& model, const Tensor& batch, bool training, std::uint64_t seed);

Tensor forward(const ModelGraph& model, const Tensor& batch, bool training, std::uint64_t seed = 0);

std::size_t count_params(const ModelGraph& model);

/// Row-wise argmax; ties go to the lower index.
std::vector<int> argmax_rows(const Tensor& logits);
std::vector<int> predict(const ModelGraph& model, const Tensor& batch);

/// FNV-1a over all parameter bytes; used to prove weights did not move.
std::uint64_t param_hash(const ModelGraph& model);

}  // namespace kd
