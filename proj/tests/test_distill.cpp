#include <doctest.h>

#include <cmath>

#include "kd/distill.hpp"

using namespace kd;

namespace {

Tensor64 row(std::vector<double> v) {
    const std::size_t k = v.size();
    return Tensor64({1, k}, std::move(v));
}

SoftDistribution dist(std::vector<double> p) { return {row(std::move(p))}; }

double entropy(const Tensor64& p) {
    double h = 0;
    for (double v : p.data()) h -= v * std::log(v);
    return h;
}

// Separable toy dataset: label 1 iff the mean of the image is above 0.5.
Dataset toy_dataset(std::size_t n, std::uint64_t seed) {
    CounterRng rng(seed);
    Dataset d;
    d.images = Tensor({n, 1, 8, 8});
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 2);
        const double base = label ? 0.7 : 0.3;
        for (std::size_t p = 0; p < 64; ++p) d.images[i * 64 + p] = static_cast<float>(base + 0.1 * rng.normal());
        d.labels.push_back(label);
        d.source_ids.push_back("toy-" + std::to_string(i));
    }
    return d;
}

ArchScale tiny_scale() {
    ArchScale s;
    s.input_side = 8;
    s.base_width = 2;
    s.branch_stages = 1;
    s.student_blocks = 1;
    s.head_width = 8;
    return s;
}

}  // namespace

TEST_CASE("softmax_temperature examples") {
    for (double t : {0.5, 1.0, 7.0}) {
        const auto p = softmax_temperature(row({0, 0, 0}), t).probs;
        for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));
    }
    const auto p = softmax_temperature(row({2, 0}), 2.0).probs;
    CHECK(std::abs(p[0] - 0.7311) < 1e-4);
    CHECK(std::abs(p[1] - 0.2689) < 1e-4);
    for (double t : {0.5, 1.0, 10.0}) {
        const auto q = softmax_temperature(row({3, 1, -2}), t).probs;
        CHECK(q[0] > q[1]);
        CHECK(q[0] > q[2]);
    }
    CHECK_THROWS_AS(softmax_temperature(row({1, 2}), 0.0), ConfigError);
    CHECK_THROWS_AS(softmax_temperature(row({1, 2}), -1.0), ConfigError);
}

TEST_CASE("kl_divergence examples") {
    CHECK(kl_divergence(dist({0.3, 0.7}), dist({0.3, 0.7})) == 0.0);
    const double a = kl_divergence(dist({0.5, 0.5}), dist({0.9, 0.1}));
    const double b = kl_divergence(dist({0.9, 0.1}), dist({0.5, 0.5}));
    CHECK(std::abs(a - 0.510826) < 1e-4);
    CHECK(std::abs(b - 0.368064) < 1e-4);
    CHECK(a != b);
    // Zero reference mass contributes nothing; zero approx mass is floored.
    CHECK(kl_divergence(dist({1.0, 0.0}), dist({0.5, 0.5})) == doctest::Approx(std::log(2.0)));
    CHECK(std::isfinite(kl_divergence(dist({0.5, 0.5}), dist({1.0, 0.0}))));
    CHECK_THROWS_AS(kl_divergence(dist({0.5, 0.5}), dist({0.2, 0.3, 0.5})), ShapeError);
}

TEST_CASE("cross_entropy_hard examples") {
    const std::vector<int> zero{0}, one{1};
    CHECK(cross_entropy_hard(row({0, 0}), zero) == doctest::Approx(std::log(2.0)));
    const double stable = cross_entropy_hard(row({1000, 0}), zero);
    CHECK(std::isfinite(stable));
    CHECK(stable < 1e-12);
    CHECK(std::abs(cross_entropy_hard(row({2, 0}), one) - 2.126928) < 1e-4);
    const std::vector<int> bad{2};
    CHECK_THROWS(cross_entropy_hard(row({2, 0}), bad));
}

TEST_CASE("kd_loss examples") {
    const std::vector<int> lab{0};
    DistillConfig one{1.0, 4.0};
    CHECK(std::abs(kd_loss(row({1.5, -0.3}), row({1.5, -0.3}), lab, one)) < 1e-12);

    DistillConfig zero{0.0, 4.0};
    CHECK(kd_loss(row({1.5, -0.3}), row({-2, 3}), lab, zero) == cross_entropy_hard(row({1.5, -0.3}), lab));

    // 64-bit oracle value from tests/oracles/derive_values.py.
    DistillConfig mix{0.5, 2.0};
    CHECK(std::abs(kd_loss(row({1, 0}), row({2, 0}), lab, mix) - 0.209320) < 1e-5);
    CHECK(std::abs(kd_loss(row({1, 0}), row({2, 0}), lab, mix) - 0.2094) < 1e-3);

    CHECK_THROWS_AS(kd_loss(row({1, 0}), row({2, 0}), lab, DistillConfig{1.5, 4.0}), ConfigError);
    CHECK_THROWS_AS(kd_loss(row({1, 0}), row({2, 0}), lab, DistillConfig{0.5, 0.0}), ConfigError);
    CHECK_THROWS_AS(kd_loss(row({1, 0}), row({2, 0, 1}), lab, mix), ShapeError);
}

TEST_CASE("kd_loss direction flag swaps the KL arguments") {
    const std::vector<int> lab{0};
    DistillConfig fwd{1.0, 1.0, KlDirection::teacher_reference};
    DistillConfig rev{1.0, 1.0, KlDirection::student_reference};
    const auto s = row({1, 0}), t = row({3, 0});
    CHECK(kd_loss(s, t, lab, fwd) ==
          doctest::Approx(kl_divergence(softmax_temperature(t, 1), softmax_temperature(s, 1))));
    CHECK(kd_loss(s, t, lab, rev) ==
          doctest::Approx(kl_divergence(softmax_temperature(s, 1), softmax_temperature(t, 1))));
}

TEST_CASE("teacher logits receive no gradient") {
    Tape<double> tape;
    Tensor64 s = row({0.2, -0.4}), t = row({1.0, 0.5});
    s.set_requires_grad(true);
    t.set_requires_grad(true);
    const std::vector<int> lab{1};
    const auto vs = tape.leaf(s);
    const auto vt = tape.leaf(t);
    tape.backward(ad::kd_loss(vs, vt, lab, DistillConfig{}));
    CHECK(tape.grad(vs) != nullptr);
    CHECK(tape.grad(vt) == nullptr);
}

TEST_CASE("softmax and KL properties") {
    CounterRng rng(5);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t k = 2 + rng.below(6);
        Tensor64 z({3, k});
        const double mag = trial % 3 == 0 ? 1000.0 : 10.0;
        for (auto& v : z.data()) v = rng.uniform(-mag, mag);
        for (double t : {0.1, 1.0, 4.0, 100.0}) {
            const auto p = softmax_temperature(z, t).probs;
            for (std::size_t r = 0; r < 3; ++r) {
                double s = 0;
                for (std::size_t c = 0; c < k; ++c) s += p[r * k + c];
                CHECK(std::abs(s - 1.0) < 1e-6);
            }
        }

        Tensor64 one({1, k});
        for (auto& v : one.data()) v = rng.uniform(-5, 5);
        double prev = -1.0;
        for (double t : {0.5, 1.0, 2.0, 4.0, 8.0}) {
            const double h = entropy(softmax_temperature(one, t).probs);
            CHECK(h >= prev - 1e-12);
            prev = h;
        }

        Tensor64 other({1, k});
        for (auto& v : other.data()) v = rng.uniform(-5, 5);
        const auto p = softmax_temperature(one, 1.0), q = softmax_temperature(other, 1.0);
        CHECK(kl_divergence(p, q) >= 0.0);
        CHECK(kl_divergence(p, p) == doctest::Approx(0.0).epsilon(1e-12));
    }
}

TEST_CASE("kd_loss is continuous in alpha") {
    const std::vector<int> lab{1, 0};
    const Tensor64 s({2, 2}, std::vector<double>{0.3, -0.2, 1.1, 0.4});
    const Tensor64 t({2, 2}, std::vector<double>{-1.0, 2.0, 2.5, -0.5});
    const double ce = cross_entropy_hard(s, lab);
    const double kl =
        kl_divergence(softmax_temperature(t, 4.0), softmax_temperature(s, 4.0)) * 16.0;
    double prev = kd_loss(s, t, lab, {0.0, 4.0});
    for (int i = 1; i <= 20; ++i) {
        const double a = i / 20.0;
        const double cur = kd_loss(s, t, lab, {a, 4.0});
        CHECK(cur == doctest::Approx(a * kl + (1 - a) * ce));
        CHECK(std::abs(cur - prev) <= 0.05 * (std::abs(kl) + std::abs(ce)) + 1e-12);
        prev = cur;
    }
}

TEST_CASE("train_distill keeps the teacher frozen") {
    const auto data = toy_dataset(40, 1);
    std::vector<std::size_t> idx(40);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    auto teacher = build_mini_teacher(tiny_scale(), 2);
    teacher.initialize(2);
    TrainConfig tc;
    tc.learning_rate = 1e-2;
    tc.batch_size = 8;
    tc.epochs = 2;
    train_supervised(teacher, data, idx, tc);

    auto student = build_mini_student(tiny_scale(), 2);
    student.initialize(3);
    CHECK_THROWS_AS(train_distill(teacher, student, data, idx, DistillConfig{}, tc), Error);

    teacher.set_trainable(false);
    const auto before = param_hash(teacher);
    const auto student_before = param_hash(student);

    TrainConfig none = tc;
    none.epochs = 0;
    const auto r0 = train_distill(teacher, student, data, idx, DistillConfig{}, none);
    CHECK(r0.loss_history.empty());
    CHECK(param_hash(student) == student_before);

    const auto r = train_distill(teacher, student, data, idx, DistillConfig{}, tc);
    CHECK(r.loss_history.size() == 2);
    CHECK(param_hash(teacher) == before);
    CHECK(param_hash(student) != student_before);
    for (double l : r.loss_history) CHECK(std::isfinite(l));
}

TEST_CASE("train_distill rejects mismatched models") {
    const auto data = toy_dataset(20, 1);
    std::vector<std::size_t> idx{0, 1, 2, 3};
    auto teacher = build_mini_teacher(tiny_scale(), 2);
    teacher.set_trainable(false);
    auto s = tiny_scale();
    s.input_side = 16;
    auto student = build_mini_student(s, 2);
    CHECK_THROWS(train_distill(teacher, student, data, idx, DistillConfig{}, TrainConfig{}));
}
