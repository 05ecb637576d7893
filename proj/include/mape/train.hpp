#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mape/data.hpp"
#include "mape/forward.hpp"
#include "mape/model.hpp"
#include "mape/rng.hpp"

namespace mape {

struct TrainHParams {
    int epochs = 40;
    int batch_size = 32;
    double learning_rate = 0.5;
    double momentum = 0.9;
    std::uint64_t seed = 1;
};

struct TrainResult {
    ModelState state;
    double final_train_accuracy = 0.0;
    double final_test_accuracy = 0.0;
    double final_loss = 0.0;
};

inline double split_accuracy(const ModelState& state, const Split& split);

// From-scratch training with gradient descent plus momentum. Deterministic
// for a fixed (config, seed, data) triple.
inline TrainResult train(const ModelConfig& cfg, const Split& data, const TrainHParams& hp,
                         const Split* test_split = nullptr) {
    cfg.validate();
    TrainResult result;
    result.state = init_model(cfg);
    if (hp.epochs == 0 || data.empty()) {
        if (!data.empty()) {
            result.final_train_accuracy = split_accuracy(result.state, data);
        }
        if (test_split != nullptr && !test_split->empty()) {
            result.final_test_accuracy = split_accuracy(result.state, *test_split);
        }
        return result;
    }

    const Vec gates = ones_gates(cfg);
    ModelState velocity = zeros_like(result.state);
    Rng rng(hp.seed);

    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }

    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < data.size();
             start += static_cast<std::size_t>(hp.batch_size)) {
            const std::size_t stop =
                std::min(data.size(), start + static_cast<std::size_t>(hp.batch_size));
            Split view;
            view.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i) {
                view.push_back(data[order[i]]);
            }
            const Batch batch = Batch::from_split(view);
            LossGrads lg = loss_and_grads(result.state, gates, batch);
            result.final_loss = lg.loss;
            // v = momentum * v - lr * g ; theta += v
            add_scaled(velocity, velocity, hp.momentum - 1.0);
            add_scaled(velocity, lg.param_grads, -hp.learning_rate);
            add_scaled(result.state, velocity, 1.0);
        }
    }

    result.final_train_accuracy = split_accuracy(result.state, data);
    if (test_split != nullptr && !test_split->empty()) {
        result.final_test_accuracy = split_accuracy(result.state, *test_split);
    }
    return result;
}

// Argmax accuracy; logit ties resolve to the lowest class index.
inline double split_accuracy(const ModelState& state, const Split& split) {
    if (split.empty()) {
        throw std::invalid_argument("split_accuracy: empty split");
    }
    const Vec gates = ones_gates(state.config);
    std::size_t correct = 0;
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < split.size(); start += kChunk) {
        const std::size_t stop = std::min(split.size(), start + kChunk);
        const Batch batch = Batch::from_samples(split, start, stop);
        const Mat logits = forward_logits(state, gates, batch);
        for (std::size_t b = 0; b < logits.rows; ++b) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < logits.cols; ++c) {
                if (logits(b, c) > logits(b, best)) {
                    best = c;
                }
            }
            if (static_cast<std::int32_t>(best) == batch.labels[b]) {
                ++correct;
            }
        }
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

}  // namespace mape
