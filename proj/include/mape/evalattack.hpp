#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "mape/data.hpp"
#include "mape/forward.hpp"
#include "mape/model.hpp"
#include "mape/rng.hpp"
#include "mape/train.hpp"

namespace mape {
namespace eval {

struct MetricsReport {
    double forget_acc = 0.0;
    double retain_acc = 0.0;
    double test_acc = 0.0;
    double mia_score = 0.0;
    double params_changed_fraction = 0.0;
    double wall_time = 0.0;
};

inline double accuracy(const ModelState& state, const Split& split) {
    return split_accuracy(state, split);
}

// Max softmax probability per sample, the membership feature.
inline Vec confidences(const ModelState& state, const Split& split) {
    if (split.empty()) {
        throw std::invalid_argument("confidences: empty split");
    }
    const Vec gates = ones_gates(state.config);
    Vec out;
    out.reserve(split.size());
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < split.size(); start += kChunk) {
        const std::size_t stop = std::min(split.size(), start + kChunk);
        const Batch batch = Batch::from_samples(split, start, stop);
        const Mat logits = forward_logits(state, gates, batch);
        for (std::size_t b = 0; b < logits.rows; ++b) {
            const Vec p = softmax_row(logits, b);
            double best = p[0];
            for (const double v : p) {
                best = std::max(best, v);
            }
            out.push_back(best);
        }
    }
    return out;
}

// Best balanced accuracy of the rule "member iff feature >= threshold" over
// every threshold the two samples induce. 0.5 means indistinguishable.
inline double best_threshold_balanced_accuracy(const Vec& member_features,
                                               const Vec& nonmember_features) {
    if (member_features.empty() || nonmember_features.empty()) {
        throw std::invalid_argument("mia: empty feature set");
    }
    struct Entry {
        double value;
        bool member;
    };
    std::vector<Entry> entries;
    entries.reserve(member_features.size() + nonmember_features.size());
    for (const double v : member_features) {
        entries.push_back({v, true});
    }
    for (const double v : nonmember_features) {
        entries.push_back({v, false});
    }
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return a.value < b.value; });

    const double m = static_cast<double>(member_features.size());
    const double n = static_cast<double>(nonmember_features.size());
    // Sweep thresholds from below the minimum upward. members_ge / nonmembers_ge
    // count features >= current threshold.
    double members_ge = m;
    double nonmembers_ge = n;
    double best = 0.5 * (members_ge / m + 1.0 - nonmembers_ge / n);
    std::size_t i = 0;
    while (i < entries.size()) {
        // advance threshold just above entries[i].value
        const double v = entries[i].value;
        while (i < entries.size() && entries[i].value == v) {
            if (entries[i].member) {
                members_ge -= 1.0;
            } else {
                nonmembers_ge -= 1.0;
            }
            ++i;
        }
        best = std::max(best, 0.5 * (members_ge / m + 1.0 - nonmembers_ge / n));
    }
    return best;
}

// Confidence-based membership inference: forget samples are members, held-out
// test samples are non-members.
inline double mia_confidence(const ModelState& state, const Split& forget, const Split& heldout) {
    return best_threshold_balanced_accuracy(confidences(state, forget),
                                            confidences(state, heldout));
}

struct MetricsInputs {
    const Split* forget = nullptr;
    const Split* retain = nullptr;
    const Split* test = nullptr;
};

inline MetricsReport compute_metrics(const ModelState& state, const MetricsInputs& data,
                                     const ModelState* pre_state = nullptr) {
    MetricsReport r;
    if (data.forget != nullptr && !data.forget->empty()) {
        r.forget_acc = accuracy(state, *data.forget);
    }
    if (data.retain != nullptr && !data.retain->empty()) {
        r.retain_acc = accuracy(state, *data.retain);
    }
    if (data.test != nullptr && !data.test->empty()) {
        r.test_acc = accuracy(state, *data.test);
        if (data.forget != nullptr && !data.forget->empty()) {
            r.mia_score = mia_confidence(state, *data.forget, *data.test);
        }
    }
    if (pre_state != nullptr) {
        r.params_changed_fraction = diff_census(state, *pre_state).changed_fraction();
    }
    return r;
}

// ---------------------------------------------------------------------------
// Relearning attack
// ---------------------------------------------------------------------------

struct RelearnTrajectory {
    std::vector<double> forget_acc;  // one entry per relearning epoch
    std::vector<double> mia;
    std::optional<int> epochs_to_recover;  // first epoch at/above the threshold
};

struct RelearnHParams {
    double learning_rate = 0.05;
    int batch_size = 32;
    std::uint64_t seed = 1;
};

// Draws the relearning set from the retain split (forget-disjoint by
// construction of the splits).
inline Split draw_relearn_set(const Split& retain, double fraction, std::uint64_t seed) {
    if (fraction <= 0.0 || fraction > 1.0) {
        throw std::invalid_argument("draw_relearn_set: fraction outside (0, 1]");
    }
    std::vector<std::size_t> order(retain.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    Rng rng(seed);
    rng.shuffle(order);
    const auto count = static_cast<std::size_t>(fraction * static_cast<double>(retain.size()));
    Split out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(retain[order[i]]);
    }
    return out;
}

// Fine-tunes the unlearned model on the relearning set, recording forget
// accuracy and MIA after every epoch. recovery_threshold is typically the
// pre-unlearning forget accuracy minus 0.05.
inline RelearnTrajectory relearn_attack(const ModelState& state, const Split& relearn_set,
                                        const Split& forget, const Split& heldout, int epochs,
                                        double recovery_threshold, const RelearnHParams& hp) {
    if (relearn_set.empty()) {
        throw std::invalid_argument("relearn_attack: empty relearning set");
    }
    std::set<std::int64_t> forget_ids;
    for (const Sample& s : forget) {
        forget_ids.insert(s.id);
    }
    for (const Sample& s : relearn_set) {
        if (forget_ids.count(s.id)) {
            throw std::invalid_argument("relearn_attack: relearning set overlaps forget split");
        }
    }

    RelearnTrajectory traj;
    ModelState current = state;
    const Vec gates = ones_gates(state.config);
    Rng rng(hp.seed);
    std::vector<std::size_t> order(relearn_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }

    for (int epoch = 1; epoch <= epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < relearn_set.size();
             start += static_cast<std::size_t>(hp.batch_size)) {
            const std::size_t stop =
                std::min(relearn_set.size(), start + static_cast<std::size_t>(hp.batch_size));
            Split view;
            for (std::size_t i = start; i < stop; ++i) {
                view.push_back(relearn_set[order[i]]);
            }
            const Batch batch = Batch::from_split(view);
            LossGrads lg = loss_and_grads(current, gates, batch);
            add_scaled(current, lg.param_grads, -hp.learning_rate);
        }
        const double facc = accuracy(current, forget);
        traj.forget_acc.push_back(facc);
        traj.mia.push_back(mia_confidence(current, forget, heldout));
        if (!traj.epochs_to_recover.has_value() && facc >= recovery_threshold) {
            traj.epochs_to_recover = epoch;
        }
    }
    return traj;
}

}  // namespace eval
}  // namespace mape
