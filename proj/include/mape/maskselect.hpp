#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "mape/fisher.hpp"
#include "mape/linalg.hpp"
#include "mape/mask.hpp"
#include "mape/model.hpp"

namespace mape {
namespace select {

enum class Sense {
    MinimizeRetainLoss,  // MLR: gradient over forget, Fisher over retain
    MaximizeForgetLoss,  // MLF: gradient over retain, Fisher over forget
};

inline const char* sense_name(Sense s) {
    return s == Sense::MinimizeRetainLoss ? "MLR" : "MLF";
}

// Constrained binary mask selection instance. Modules are laid out
// layer-major; each layer contributes heads_per_layer + filters_per_layer
// coordinates (heads first).
struct SelectionProblem {
    Sense sense = Sense::MinimizeRetainLoss;
    Vec grad_vector;              // length n, summed over the gradient split
    Vec fim_diag;                 // length n
    std::vector<Mat> fim_blocks;  // one per layer
    double sparsity = 0.0;
    int num_layers = 0;
    int heads_per_layer = 0;
    int filters_per_layer = 0;

    int modules_per_layer() const { return heads_per_layer + filters_per_layer; }
    int module_count() const { return num_layers * modules_per_layer(); }

    void validate() const {
        const auto n = static_cast<std::size_t>(module_count());
        if (grad_vector.size() != n || fim_diag.size() != n) {
            throw std::invalid_argument("SelectionProblem: dimension mismatch");
        }
        if (fim_blocks.size() != static_cast<std::size_t>(num_layers)) {
            throw std::invalid_argument("SelectionProblem: block count mismatch");
        }
        for (const Mat& b : fim_blocks) {
            if (b.rows != static_cast<std::size_t>(modules_per_layer()) || b.rows != b.cols) {
                throw std::invalid_argument("SelectionProblem: block dimension mismatch");
            }
        }
        if (sparsity < 0.0 || sparsity >= 1.0) {
            throw std::invalid_argument("SelectionProblem: sparsity outside [0, 1)");
        }
    }
};

// score_i = g_i + 0.5 * diag_i
inline Vec importance_scores(const SelectionProblem& problem) {
    problem.validate();
    Vec scores(problem.grad_vector.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = problem.grad_vector[i] + 0.5 * problem.fim_diag[i];
    }
    return scores;
}

// Indices of the k largest values; ties resolve to the lower index.
inline std::vector<int> top_k_indices(const Vec& values, int k) {
    std::vector<int> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return values[static_cast<std::size_t>(a)] > values[static_cast<std::size_t>(b)];
    });
    order.resize(static_cast<std::size_t>(std::min<int>(k, static_cast<int>(values.size()))));
    return order;
}

inline MaskPair make_mask(const SelectionProblem& problem, const std::vector<int>& active) {
    MaskPair m;
    m.num_layers = problem.num_layers;
    m.num_heads = problem.heads_per_layer;
    m.d_ff = problem.filters_per_layer;
    m.head_mask.assign(static_cast<std::size_t>(problem.num_layers) * problem.heads_per_layer, 0);
    m.filter_mask.assign(static_cast<std::size_t>(problem.num_layers) * problem.filters_per_layer, 0);
    m.sparsity = problem.sparsity;
    for (const int idx : active) {
        m.set_module(idx, 1);
    }
    return m;
}

// Activates the floor((1-S)*n) modules with the highest importance scores.
// MLF problems arrive with their splits already swapped, so the same rule
// applies to both senses.
inline MaskPair warm_start(const SelectionProblem& problem) {
    problem.validate();
    const int k = sparsity_budget(problem.sparsity, problem.module_count());
    const Vec scores = importance_scores(problem);
    return make_mask(problem, top_k_indices(scores, k));
}

// (1-m)^T g + 0.5 (1-m)^T B (1-m) for one layer.
inline double layer_objective(const std::vector<std::uint8_t>& mask_l, const Vec& grad_l,
                              const Mat& block_l) {
    const std::size_t m = mask_l.size();
    if (grad_l.size() != m || block_l.rows != m || block_l.cols != m) {
        throw std::invalid_argument("layer_objective: dimension mismatch");
    }
    double linear = 0.0;
    double quad = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (mask_l[i]) {
            continue;
        }
        linear += grad_l[i];
        for (std::size_t j = 0; j < m; ++j) {
            if (!mask_l[j]) {
                quad += block_l(i, j);
            }
        }
    }
    return linear + 0.5 * quad;
}

inline Vec layer_grad(const SelectionProblem& problem, int layer) {
    const auto per_layer = static_cast<std::size_t>(problem.modules_per_layer());
    const auto base = static_cast<std::size_t>(layer) * per_layer;
    return Vec(problem.grad_vector.begin() + static_cast<std::ptrdiff_t>(base),
               problem.grad_vector.begin() + static_cast<std::ptrdiff_t>(base + per_layer));
}

inline std::vector<std::uint8_t> layer_mask(const MaskPair& mask, int layer) {
    const int per_layer = mask.num_heads + mask.d_ff;
    std::vector<std::uint8_t> out(static_cast<std::size_t>(per_layer));
    for (int i = 0; i < per_layer; ++i) {
        out[static_cast<std::size_t>(i)] = mask.module(layer * per_layer + i);
    }
    return out;
}

inline void set_layer_mask(MaskPair& mask, int layer, const std::vector<std::uint8_t>& mask_l) {
    const int per_layer = mask.num_heads + mask.d_ff;
    for (int i = 0; i < per_layer; ++i) {
        mask.set_module(layer * per_layer + i, mask_l[static_cast<std::size_t>(i)]);
    }
}

inline double total_objective(const SelectionProblem& problem, const MaskPair& mask) {
    double total = 0.0;
    for (int l = 0; l < problem.num_layers; ++l) {
        total += layer_objective(layer_mask(mask, l), layer_grad(problem, l),
                                 problem.fim_blocks[static_cast<std::size_t>(l)]);
    }
    return total;
}

// One round of within-layer swaps. Frozen modules are visited in descending
// importance-score order; each visit commits the single best swap with a
// currently active module if it strictly improves the layer objective
// (decreases for MLR, increases for MLF). Layer active counts never change.
inline MaskPair greedy_swap(const SelectionProblem& problem, const MaskPair& start) {
    problem.validate();
    const int budget = sparsity_budget(problem.sparsity, problem.module_count());
    if (start.active_count() > budget) {
        throw std::invalid_argument("greedy_swap: start mask violates sparsity constraint");
    }
    constexpr double kMinImprovement = 1e-12;
    const Vec scores = importance_scores(problem);
    const double sign = problem.sense == Sense::MinimizeRetainLoss ? 1.0 : -1.0;
    const auto per_layer = static_cast<std::size_t>(problem.modules_per_layer());

    MaskPair result = start;
    for (int l = 0; l < problem.num_layers; ++l) {
        const Vec grad_l = layer_grad(problem, l);
        const Mat& block_l = problem.fim_blocks[static_cast<std::size_t>(l)];
        std::vector<std::uint8_t> mask_l = layer_mask(result, l);
        const std::size_t base = static_cast<std::size_t>(l) * per_layer;

        std::vector<int> visit;
        for (std::size_t i = 0; i < per_layer; ++i) {
            if (!mask_l[i]) {
                visit.push_back(static_cast<int>(i));
            }
        }
        std::stable_sort(visit.begin(), visit.end(), [&](int a, int b) {
            return scores[base + static_cast<std::size_t>(a)] >
                   scores[base + static_cast<std::size_t>(b)];
        });

        double current = sign * layer_objective(mask_l, grad_l, block_l);
        for (const int frozen : visit) {
            int best_partner = -1;
            double best_value = current;
            for (std::size_t active = 0; active < per_layer; ++active) {
                if (!mask_l[active]) {
                    continue;
                }
                mask_l[active] = 0;
                mask_l[static_cast<std::size_t>(frozen)] = 1;
                const double value = sign * layer_objective(mask_l, grad_l, block_l);
                mask_l[active] = 1;
                mask_l[static_cast<std::size_t>(frozen)] = 0;
                if (value < best_value - kMinImprovement) {
                    best_value = value;
                    best_partner = static_cast<int>(active);
                }
            }
            if (best_partner >= 0) {
                mask_l[static_cast<std::size_t>(best_partner)] = 0;
                mask_l[static_cast<std::size_t>(frozen)] = 1;
                current = best_value;
            }
        }
        set_layer_mask(result, l, mask_l);
    }
    return result;
}

struct LayerOptimum {
    std::vector<std::uint8_t> mask_l;
    double objective = 0.0;
};

// Exhaustive search over all layer masks with the warm start's active count.
// Test oracle; layers above 20 modules are rejected.
inline LayerOptimum enumerate_optimum(const SelectionProblem& problem, int layer) {
    problem.validate();
    const int m = problem.modules_per_layer();
    if (m > 20) {
        throw std::invalid_argument("enumerate_optimum: layer too large");
    }
    const MaskPair warm = warm_start(problem);
    const std::vector<std::uint8_t> warm_l = layer_mask(warm, layer);
    int k = 0;
    for (const auto v : warm_l) {
        k += v;
    }
    const Vec grad_l = layer_grad(problem, layer);
    const Mat& block_l = problem.fim_blocks[static_cast<std::size_t>(layer)];
    const double sign = problem.sense == Sense::MinimizeRetainLoss ? 1.0 : -1.0;

    LayerOptimum best;
    bool have_best = false;
    std::vector<int> combo(static_cast<std::size_t>(k));
    std::iota(combo.begin(), combo.end(), 0);
    std::vector<std::uint8_t> mask_l(static_cast<std::size_t>(m), 0);
    while (true) {
        std::fill(mask_l.begin(), mask_l.end(), 0);
        for (const int idx : combo) {
            mask_l[static_cast<std::size_t>(idx)] = 1;
        }
        const double value = layer_objective(mask_l, grad_l, block_l);
        if (!have_best || sign * value < sign * best.objective) {
            best.mask_l = mask_l;
            best.objective = value;
            have_best = true;
        }
        if (k == 0) {
            break;
        }
        // next lexicographic combination
        int i = k - 1;
        while (i >= 0 && combo[static_cast<std::size_t>(i)] == m - k + i) {
            --i;
        }
        if (i < 0) {
            break;
        }
        ++combo[static_cast<std::size_t>(i)];
        for (int j = i + 1; j < k; ++j) {
            combo[static_cast<std::size_t>(j)] = combo[static_cast<std::size_t>(j - 1)] + 1;
        }
    }
    return best;
}

inline SelectionProblem problem_from_model(const ModelState& state, Sense sense,
                                           const Split& grad_split, const Split& fim_split,
                                           double sparsity) {
    if (grad_split.empty() || fim_split.empty()) {
        throw std::invalid_argument("mask selection: empty data split");
    }
    SelectionProblem p;
    p.sense = sense;
    p.sparsity = sparsity;
    p.num_layers = state.config.num_layers;
    p.heads_per_layer = state.config.num_heads;
    p.filters_per_layer = state.config.d_ff;
    p.grad_vector = fisher::forget_mask_gradient(state, grad_split);
    fisher::FisherStats stats = fisher::compute_mask_stats(state, fim_split);
    p.fim_diag = std::move(stats.mask_diag);
    p.fim_blocks = std::move(stats.mask_blocks);
    return p;
}

inline SelectionProblem build_mlr_problem(const ModelState& state, const Split& forget,
                                          const Split& retain, double sparsity) {
    return problem_from_model(state, Sense::MinimizeRetainLoss, forget, retain, sparsity);
}

inline SelectionProblem build_mlf_problem(const ModelState& state, const Split& forget,
                                          const Split& retain, double sparsity) {
    return problem_from_model(state, Sense::MaximizeForgetLoss, retain, forget, sparsity);
}

// Pre-computed successive-unlearning mask: the k modules with the largest
// full-dataset diagonal FIM stay active.
inline MaskPair successive_premask(const Vec& full_mask_diag, double sparsity,
                                   const ModelConfig& cfg) {
    if (static_cast<int>(full_mask_diag.size()) != cfg.module_count()) {
        throw std::invalid_argument("successive_premask: dimension mismatch");
    }
    const int k = sparsity_budget(sparsity, cfg.module_count());
    const std::vector<int> active = top_k_indices(full_mask_diag, k);
    return MaskPair::from_active_modules(cfg, sparsity, active);
}

// Gradient-norm baseline: per-module Euclidean norm of the summed forget
// parameter gradient, top-k activated.
inline MaskPair sure_select(const ModelState& state, const Split& forget, double sparsity) {
    if (forget.empty()) {
        throw std::invalid_argument("sure_select: empty forget split");
    }
    const ModelState grad_sum = fisher::forget_param_gradient(state, forget);
    const int n = state.config.module_count();
    Vec norms(static_cast<std::size_t>(n), 0.0);
    for (int idx = 0; idx < n; ++idx) {
        const auto ptrs = module_param_ptrs(grad_sum, idx);
        double sq = 0.0;
        for (const double* p : ptrs) {
            sq += (*p) * (*p);
        }
        norms[static_cast<std::size_t>(idx)] = std::sqrt(sq);
    }
    const int k = sparsity_budget(sparsity, n);
    return MaskPair::from_active_modules(state.config, sparsity, top_k_indices(norms, k));
}

}  // namespace select
}  // namespace mape
