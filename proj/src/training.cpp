#include "kd/training.hpp"

#include <spdlog/spdlog.h>

#include <cmath>

#include "kd/distill.hpp"

namespace kd {

namespace {
// Stream tags for derive_seed.
constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kAugmentStream = 2;
constexpr std::uint64_t kDropoutStream = 3;
constexpr std::size_t kEvalBatch = 256;
}  // namespace

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate", "must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state, double lr) {
    if (params.size() != grads.size()) {
        throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters, " +
                         std::to_string(grads.size()) + " gradients");
    }
    if (state.first_moment.empty()) {
        for (const auto* p : params) {
            state.first_moment.emplace_back(p->shape());
            state.second_moment.emplace_back(p->shape());
        }
    }
    if (state.first_moment.size() != params.size()) throw ShapeError("adam_step: optimizer state size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.first_moment[i].shape() != params[i]->shape() ||
            (grads[i] && grads[i]->shape() != params[i]->shape())) {
            throw ShapeError("adam_step: parameter " + std::to_string(i) + " shape " + shape_str(params[i]->shape()) +
                             " disagrees with its gradient or moments");
        }
    }

    ++state.step;
    const double b1 = state.beta1, b2 = state.beta2;
    const double correction1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double correction2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i];
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double g = grads[i] ? (*grads[i])[j] : 0.0;
            const double mj = b1 * m[j] + (1.0 - b1) * g;
            const double vj = b2 * v[j] + (1.0 - b2) * g * g;
            m[j] = static_cast<float>(mj);
            v[j] = static_cast<float>(vj);
            const double m_hat = mj / correction1;
            const double v_hat = vj / correction2;
            p[j] = static_cast<float>(p[j] - lr * m_hat / (std::sqrt(v_hat) + state.epsilon));
        }
    }
}

TrainResult train_loop(ModelGraph& model, const Dataset& data, std::span<const std::size_t> indices,
                       const TrainConfig& cfg, const AugmentConfig* augment, const BatchLoss& loss) {
    cfg.validate();
    if (indices.empty()) throw DataError("training set is empty");
    if (!model.trainable()) throw Error(ExitCode::config, "model parameters are frozen; nothing to train");

    std::vector<Tensor*> params;
    for (auto& p : model.params()) params.push_back(&p.value);
    AdamState adam;
    TrainResult result;
    std::vector<std::size_t> order(indices.begin(), indices.end());

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        CounterRng shuffle(derive_seed(cfg.seed, {kShuffleStream, epoch}));
        shuffle.shuffle(std::span(order));
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            const std::span<const std::size_t> batch_idx(order.data() + start, stop - start);
            const std::uint64_t batch_seed = derive_seed(cfg.seed, {epoch, batches});
            const Tensor images =
                gather_images(data, batch_idx, augment, derive_seed(batch_seed, {kAugmentStream}));
            const auto labels = gather_labels(data, batch_idx);

            Tape<float> tape;
            const auto logits = forward(tape, model, tape.leaf(images), true, derive_seed(batch_seed, {kDropoutStream}));
            const auto objective = loss(tape, logits, images, labels);
            const double value = objective.value()[0];
            if (!std::isfinite(value)) {
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batches));
            }
            tape.backward(objective);

            std::vector<const Tensor*> grads;
            for (const auto* p : params) grads.push_back(tape.grad_for(*p));
            adam_step(params, grads, adam, cfg.learning_rate);
            loss_sum += value;
            ++batches;
        }
        result.loss_history.push_back(loss_sum / static_cast<double>(batches));
        spdlog::debug("epoch {} loss {:.6f}", epoch + 1, result.loss_history.back());
    }
    return result;
}

TrainResult train_supervised(ModelGraph& model, const Dataset& data, std::span<const std::size_t> indices,
                             const TrainConfig& cfg, const AugmentConfig* augment) {
    return train_loop(model, data, indices, cfg, augment,
                      [](Tape<float>&, Var<float> logits, const Tensor&, std::span<const int> labels) {
                          return ad::cross_entropy(logits, labels);
                      });
}

ConfusionCounts evaluate_model(const ModelGraph& model, const Dataset& data, std::span<const std::size_t> indices) {
    ConfusionCounts total;
    for (std::size_t start = 0; start < indices.size(); start += kEvalBatch) {
        const auto batch = indices.subspan(start, std::min(kEvalBatch, indices.size() - start));
        const auto predicted = predict(model, gather_images(data, batch, nullptr, 0));
        const auto c = tally(predicted, gather_labels(data, batch));
        total.tp += c.tp;
        total.tn += c.tn;
        total.fp += c.fp;
        total.fn += c.fn;
    }
    return total;
}

}  // namespace kd
