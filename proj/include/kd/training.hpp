#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "kd/data.hpp"
#include "kd/metrics.hpp"
#include "kd/models.hpp"

namespace kd {

struct TrainConfig {
    double learning_rate = 1e-5;
    std::size_t batch_size = 32;
    std::size_t epochs = 30;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Adam moments for a list of parameters. Moments are created on the
/// first step; an empty state is the fresh-optimizer state.
struct AdamState {
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// One bias-corrected Adam update. A null gradient counts as zero.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state, double lr);

struct TrainResult {
    /// Mean loss per epoch.
    std::vector<double> loss_history;
};

/// Loss for one mini-batch given the recorded student logits.
using BatchLoss =
    std::function<Var<float>(Tape<float>& tape, Var<float> logits, const Tensor& images, std::span<const int> labels)>;

/// Shared mini-batch loop: seeded per-epoch shuffle, optional rotation
/// augmentation, forward, `loss`, backward, Adam. Trains `model` in place.
TrainResult train_loop(ModelGraph& model, const Dataset& data, std::span<const std::size_t> indices,
                       const TrainConfig& cfg, const AugmentConfig* augment, const BatchLoss& loss);

/// Cross-entropy training on `indices` (a multiset; duplicates are kept).
TrainResult train_supervised(ModelGraph& model, const Dataset& data, std::span<const std::size_t> indices,
                             const TrainConfig& cfg, const AugmentConfig* augment = nullptr);

/// Inference-mode confusion counts over `indices`, class 1 positive.
ConfusionCounts evaluate_model(const ModelGraph& model, const Dataset& data, std::span<const std::size_t> indices);

}  // namespace kd
