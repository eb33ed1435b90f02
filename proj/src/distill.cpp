#include "kd/distill.hpp"

#include <spdlog/spdlog.h>

#include <cmath>

namespace kd {

void DistillConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha", "must lie in [0, 1]");
    if (!(temperature > 0.0)) throw ConfigError("temperature", "must be > 0");
}

SoftDistribution softmax_temperature(const Tensor64& logits, double temperature) {
    if (!(temperature > 0.0)) throw ConfigError("temperature", "must be > 0");
    Tensor64 scaled = logits;
    for (auto& v : scaled.data()) v /= temperature;
    auto probs = ops::log_softmax(scaled);
    for (auto& v : probs.data()) v = std::exp(v);
    return {std::move(probs)};
}

SoftDistribution softmax_temperature(const Tensor& logits, double temperature) {
    return softmax_temperature(logits.cast<double>(), temperature);
}

double kl_divergence(const SoftDistribution& reference, const SoftDistribution& approx) {
    const auto& r = reference.probs;
    const auto& a = approx.probs;
    if (r.shape() != a.shape() || r.rank() != 2) {
        throw ShapeError("kl_divergence: " + shape_str(r.shape()) + " vs " + shape_str(a.shape()));
    }
    double acc = 0.0;
    std::size_t clamped = 0;
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (r[i] <= 0.0) continue;
        double q = a[i];
        if (q < kProbabilityFloor) {
            q = kProbabilityFloor;
            ++clamped;
        }
        acc += r[i] * std::log(r[i] / q);
    }
    if (clamped) spdlog::info("kl_divergence: {} probabilities floored at {:g}", clamped, kProbabilityFloor);
    return acc / static_cast<double>(r.dim(0));
}

double cross_entropy_hard(const Tensor64& logits, std::span<const int> labels) {
    Tape<double> tape;
    return ad::cross_entropy(tape.constant(logits), labels).value()[0];
}

double cross_entropy_hard(const Tensor& logits, std::span<const int> labels) {
    return cross_entropy_hard(logits.cast<double>(), labels);
}

double kd_loss(const Tensor64& student_logits, const Tensor64& teacher_logits, std::span<const int> labels,
               const DistillConfig& cfg) {
    Tape<double> tape;
    std::size_t clamped = 0;
    const double loss =
        ad::kd_loss(tape.constant(student_logits), tape.constant(teacher_logits), labels, cfg, &clamped).value()[0];
    if (clamped) spdlog::info("kd_loss: {} probabilities floored at {:g}", clamped, kProbabilityFloor);
    return loss;
}

TrainResult train_distill(const ModelGraph& teacher, ModelGraph& student, const Dataset& data,
                          std::span<const std::size_t> indices, const DistillConfig& cfg, const TrainConfig& train,
                          const AugmentConfig* augment) {
    cfg.validate();
    if (teacher.trainable()) throw Error(ExitCode::config, "teacher must be frozen (non-trainable) for distillation");
    if (teacher.classes() != student.classes() || teacher.input_shape() != student.input_shape()) {
        throw ShapeError("teacher and student disagree on input shape or class count");
    }
    std::size_t clamped_total = 0;
    auto result = train_loop(student, data, indices, train, augment,
                             [&](Tape<float>& tape, Var<float> logits, const Tensor& images, std::span<const int> labels) {
                                 const Tensor soft_targets = forward(teacher, images, false);
                                 std::size_t clamped = 0;
                                 auto loss = ad::kd_loss(logits, tape.constant(soft_targets), labels, cfg, &clamped);
                                 clamped_total += clamped;
                                 return loss;
                             });
    if (clamped_total) {
        spdlog::info("distillation: {} KL terms hit the {:g} probability floor", clamped_total, kProbabilityFloor);
    }
    return result;
}

}  // namespace kd
