#pragma once

#include <array>
#include <span>

#include "kd/autodiff.hpp"
#include "kd/training.hpp"

namespace kd {

/// Which distribution anchors the KL term.
enum class KlDirection {
    /// KL(teacher ‖ student): the teacher's soft targets are the reference.
    teacher_reference,
    /// KL(student ‖ teacher).
    student_reference,
};

struct DistillConfig {
    double alpha = 0.9;
    double temperature = 4.0;
    KlDirection kl_direction = KlDirection::teacher_reference;

    void validate() const;
};

inline constexpr std::array<double, 3> kAlphaGrid = {0.5, 0.7, 0.9};
inline constexpr std::array<double, 3> kTemperatureGrid = {2.0, 4.0, 8.0};

/// Probability floor applied to the approximating distribution in KL.
inline constexpr double kProbabilityFloor = 1e-12;

/// Per-sample class probabilities, rows summing to 1.
struct SoftDistribution {
    Tensor64 probs;
};

SoftDistribution softmax_temperature(const Tensor64& logits, double temperature);
SoftDistribution softmax_temperature(const Tensor& logits, double temperature);

/// Mean over samples of sum_k ref_k ln(ref_k / approx_k), in nats.
double kl_divergence(const SoftDistribution& reference, const SoftDistribution& approx);

/// Mean of -log_softmax(logits)[label] at T = 1.
double cross_entropy_hard(const Tensor64& logits, std::span<const int> labels);
double cross_entropy_hard(const Tensor& logits, std::span<const int> labels);

namespace ad {

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
    return nll_loss(log_softmax(logits), labels);
}

/// alpha · KL(soft teacher, soft student) · T² + (1 − alpha) · CE(student, labels).
/// The teacher logits are detached, so only the student path is differentiable.
template <typename T>
Var<T> kd_loss(Var<T> student_logits, Var<T> teacher_logits, std::span<const int> labels, const DistillConfig& cfg,
               std::size_t* clamped = nullptr) {
    cfg.validate();
    if (student_logits.shape() != teacher_logits.shape()) {
        throw ShapeError("kd_loss: student " + shape_str(student_logits.shape()) + " vs teacher " +
                         shape_str(teacher_logits.shape()));
    }
    auto& tape = *student_logits.tape;
    const T inv_t = static_cast<T>(1.0 / cfg.temperature);
    const auto teacher = tape.constant(teacher_logits.value());
    const auto log_q = log_softmax(scale(teacher, inv_t));
    const auto log_p = log_softmax(scale(student_logits, inv_t));
    const auto kl = cfg.kl_direction == KlDirection::teacher_reference
                        ? kl_from_log(log_q, log_p, kProbabilityFloor, clamped)
                        : kl_from_log(log_p, log_q, kProbabilityFloor, clamped);
    const auto soft = scale(kl, static_cast<T>(cfg.alpha * cfg.temperature * cfg.temperature));
    const auto hard = scale(cross_entropy(student_logits, labels), static_cast<T>(1.0 - cfg.alpha));
    return add(soft, hard);
}

}  // namespace ad

/// Scalar KD loss in 64-bit.
double kd_loss(const Tensor64& student_logits, const Tensor64& teacher_logits, std::span<const int> labels,
               const DistillConfig& cfg);

/// Train `student` against a frozen `teacher` on the same (augmented)
/// batches. The teacher runs in inference mode; a trainable teacher is
/// rejected.
TrainResult train_distill(const ModelGraph& teacher, ModelGraph& student, const Dataset& data,
                          std::span<const std::size_t> indices, const DistillConfig& cfg, const TrainConfig& train,
                          const AugmentConfig* augment = nullptr);

}  // namespace kd
