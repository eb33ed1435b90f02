#include <doctest.h>

#include <cmath>

#include "kd/distill.hpp"
#include "kd/models.hpp"

using namespace kd;

namespace {

Tensor random_batch(std::size_t n, std::size_t side, std::uint64_t seed) {
    CounterRng rng(seed);
    Tensor t({n, 1, side, side});
    for (auto& v : t.data()) v = static_cast<float>(rng.uniform());
    return t;
}

// Output node index of the two branch tails feeding the teacher's concat.
std::pair<std::size_t, std::size_t> concat_inputs(const ModelGraph& m) {
    for (const auto& l : m.layers()) {
        if (l.kind == LayerKind::concat) return {l.inputs.at(0), l.inputs.at(1)};
    }
    FAIL("no concat node");
    return {0, 0};
}

}  // namespace

TEST_CASE("default teacher builds with a two-way head") {
    const auto t = build_mini_teacher({}, 2);
    t.validate();
    CHECK(t.node_shapes().back() == Shape{2});
    CHECK(t.kind() == ModelKind::teacher);

    std::size_t concats = 0;
    for (const auto& l : t.layers()) concats += l.kind == LayerKind::concat;
    CHECK(concats == 1);

    const auto [a, b] = concat_inputs(t);
    CHECK(t.layers()[a].branch != t.layers()[b].branch);
    const auto& sa = t.node_shapes()[a];
    const auto& sb = t.node_shapes()[b];
    CHECK(sa == sb);
    for (std::size_t i = 0; i < t.layers().size(); ++i) {
        if (t.layers()[i].kind == LayerKind::concat) CHECK(t.node_shapes()[i][0] == 2 * sa[0]);
    }
}

TEST_CASE("concat doubles channels for several scales") {
    for (std::size_t width : {2u, 4u, 8u}) {
        for (std::size_t stages : {1u, 2u, 3u}) {
            ArchScale s;
            s.base_width = width;
            s.branch_stages = stages;
            const auto t = build_mini_teacher(s, 2);
            const auto [a, b] = concat_inputs(t);
            CHECK(t.node_shapes()[a] == t.node_shapes()[b]);
        }
    }
}

TEST_CASE("teacher head: unactivated 1x1 conv, FC-64, dropout 0.5") {
    const auto t = build_mini_teacher({}, 2);
    const auto& layers = t.layers();
    std::size_t concat = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].kind == LayerKind::concat) concat = i;
    }
    const auto& merge = layers.at(concat + 1);
    CHECK(merge.kind == LayerKind::conv);
    CHECK(merge.kernel == 1);
    CHECK(layers.at(concat + 2).kind != LayerKind::relu);
    bool head = false, drop = false;
    for (const auto& l : layers) {
        head = head || (l.kind == LayerKind::dense && l.channels == 64);
        drop = drop || (l.kind == LayerKind::dropout && l.rate == 0.5);
    }
    CHECK(head);
    CHECK(drop);
}

TEST_CASE("student is under a tenth of the teacher") {
    const auto t = build_mini_teacher({}, 2);
    const auto s = build_mini_student({}, 2);
    s.validate();
    CHECK(s.node_shapes().back() == Shape{2});
    CHECK(static_cast<double>(count_params(s)) / static_cast<double>(count_params(t)) < 0.10);
}

TEST_CASE("student uses depthwise convs and skips residuals on stride-2 blocks") {
    const auto s = build_mini_student({}, 2);
    bool depthwise = false;
    for (const auto& l : s.layers()) {
        depthwise = depthwise || l.kind == LayerKind::depthwise_conv;
        if (l.kind != LayerKind::residual_add) continue;
        // The residual's two inputs agree in shape, so the block kept stride 1.
        CHECK(s.node_shapes()[l.inputs[0]] == s.node_shapes()[l.inputs[1]]);
    }
    CHECK(depthwise);
    std::size_t downsampling = 0;
    for (std::size_t i = 0; i < s.layers().size(); ++i) {
        const auto& l = s.layers()[i];
        if (l.kind != LayerKind::depthwise_conv || l.stride != 2) continue;
        // The block's projection output is never the branch side of a residual add.
        ++downsampling;
        const std::size_t project = i + 2;
        CHECK(s.layers()[project].kind == LayerKind::conv);
        for (const auto& m : s.layers()) {
            if (m.kind == LayerKind::residual_add) CHECK(m.inputs[1] != project);
        }
    }
    CHECK(downsampling > 0);
}

TEST_CASE("forward: shapes, finiteness and determinism") {
    auto t = build_mini_teacher({}, 2);
    auto s = build_mini_student({}, 2);
    t.initialize(1);
    s.initialize(2);
    const auto batch = random_batch(4, 32, 3);
    for (const ModelGraph* m : {&t, &s}) {
        const auto a = forward(*m, batch, false);
        CHECK(a.shape() == Shape{4, 2});
        CHECK(all_finite(a));
        CHECK(a == forward(*m, batch, false));
        CHECK(forward(*m, batch, true, 9) == forward(*m, batch, true, 9));
    }
    // Dropout makes training mode differ from inference for the teacher.
    CHECK_FALSE(forward(t, batch, true, 9) == forward(t, batch, false));
}

TEST_CASE("forward rejects a mismatched batch") {
    auto s = build_mini_student({}, 2);
    CHECK_THROWS_AS(forward(s, random_batch(2, 16, 1), false), ShapeError);
}

TEST_CASE("single dense layer equals the dense op") {
    ModelGraph m(ModelKind::custom, {1, 2, 2}, 3);
    m.dense(m.flatten(m.input()), 3, "fc");
    m.initialize(5);
    const auto batch = random_batch(2, 2, 4);
    const auto expect = ops::dense(batch.reshaped({2, 4}), m.params()[0].value, m.params()[1].value);
    CHECK(forward(m, batch, false) == expect);
}

TEST_CASE("count_params examples") {
    ModelGraph dense(ModelKind::custom, {10, 1, 1}, 5);
    dense.dense(dense.flatten(dense.input()), 5, "fc");
    CHECK(count_params(dense) == 55);

    ModelGraph conv(ModelKind::custom, {2, 6, 6}, 4);
    conv.conv(conv.input(), 4, 3, 1, 0, "c");
    CHECK(count_params(conv) == 76);

    ModelGraph sep(ModelKind::custom, {8, 6, 6}, 16);
    sep.conv(sep.depthwise_conv(sep.input(), 3, 1, 1, "dw"), 16, 1, 1, 0, "pw");
    CHECK(count_params(sep) == 224);
}

TEST_CASE("predict: argmax with ties to the lower index") {
    CHECK(argmax_rows(Tensor({1, 2}, std::vector<float>{0.1f, 2.0f})) == std::vector<int>{1});
    CHECK(argmax_rows(Tensor({1, 2}, std::vector<float>{1.0f, 1.0f})) == std::vector<int>{0});
}

TEST_CASE("predict is invariant under temperature") {
    CounterRng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor64 z({6, 3});
        for (auto& v : z.data()) v = rng.uniform(-20, 20);
        Tensor zf = z.cast<float>();
        const auto base = argmax_rows(zf);
        for (double t : {0.1, 0.5, 1.0, 4.0, 10.0, 100.0}) {
            CHECK(argmax_rows(softmax_temperature(z, t).probs.cast<float>()) == base);
        }
    }
}

TEST_CASE("ArchScale validation") {
    ArchScale s;
    s.input_side = 4;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = {};
    s.base_width = 0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = {};
    s.input_side = 8;
    s.branch_stages = 6;
    CHECK_THROWS(build_mini_teacher(s, 2));
    CHECK_THROWS(build_mini_student({}, 1));
}

TEST_CASE("freezing and param_hash") {
    auto s = build_mini_student({}, 2);
    s.initialize(3);
    CHECK(s.trainable());
    s.set_trainable(false);
    CHECK_FALSE(s.trainable());
    const auto h = param_hash(s);
    CHECK(h == param_hash(s));
    s.params()[0].value[0] += 1.0f;
    CHECK(h != param_hash(s));
}
