#pragma once

#include <cstdint>
#include <set>
#include <stdexcept>
#include <vector>

#include "mape/data.hpp"
#include "mape/evalattack.hpp"
#include "mape/fisher.hpp"
#include "mape/mask.hpp"
#include "mape/maskselect.hpp"
#include "mape/model.hpp"
#include "mape/unlearn.hpp"

namespace mape {
namespace successive {

enum class Mode { Iterative, StoredInfo, Batch };

struct StepRecord {
    int t = 0;
    eval::MetricsReport metrics;
};

struct IterativeResult {
    ModelState final_state;
    std::vector<StepRecord> steps;
};

inline Split samples_by_ids(const Split& train, const std::vector<std::int64_t>& ids) {
    std::set<std::int64_t> want(ids.begin(), ids.end());
    if (want.size() != ids.size()) {
        throw std::invalid_argument("successive: duplicate request id");
    }
    Split out;
    for (const Sample& s : train) {
        if (want.count(s.id)) {
            out.push_back(s);
            want.erase(s.id);
        }
    }
    if (!want.empty()) {
        throw std::invalid_argument("successive: request id not in training split");
    }
    return out;
}

inline Split samples_excluding_ids(const Split& train, const std::set<std::int64_t>& ids) {
    Split out;
    for (const Sample& s : train) {
        if (!ids.count(s.id)) {
            out.push_back(s);
        }
    }
    return out;
}

// One (MAPE-)SO update per request, compounding on the previous state. The
// mask is re-selected on the current splits at every request.
inline IterativeResult run_iterative(const ModelState& state0, const Split& train,
                                     const Split& test, const std::vector<std::int64_t>& requests,
                                     unlearn::MaskSource mask_source, double sparsity,
                                     const unlearn::UnlearnHParams& hp) {
    {
        std::set<std::int64_t> unique(requests.begin(), requests.end());
        if (unique.size() != requests.size()) {
            throw std::invalid_argument("run_iterative: duplicate request id");
        }
    }
    IterativeResult result;
    result.final_state = state0;
    std::set<std::int64_t> removed;
    Split removed_samples;

    int t = 0;
    for (const std::int64_t id : requests) {
        ++t;
        const Split forget_now = samples_by_ids(train, {id});
        removed.insert(id);
        const Split retain_now = samples_excluding_ids(train, removed);
        if (retain_now.empty()) {
            throw std::invalid_argument("run_iterative: no retain samples left");
        }
        removed_samples.push_back(forget_now.front());

        const ModelState before = result.final_state;
        if (mask_source == unlearn::MaskSource::None) {
            result.final_state = unlearn::so_update(before, forget_now, retain_now, hp);
        } else {
            MaskPair mask = [&]() {
                switch (mask_source) {
                    case unlearn::MaskSource::MLR: {
                        const auto problem =
                            select::build_mlr_problem(before, forget_now, retain_now, sparsity);
                        return select::greedy_swap(problem, select::warm_start(problem));
                    }
                    case unlearn::MaskSource::MLF: {
                        const auto problem =
                            select::build_mlf_problem(before, forget_now, retain_now, sparsity);
                        return select::greedy_swap(problem, select::warm_start(problem));
                    }
                    case unlearn::MaskSource::SURE:
                        return select::sure_select(before, forget_now, sparsity);
                    case unlearn::MaskSource::Premask: {
                        const Vec full_diag = fisher::diag_fim_masks(before, train);
                        return select::successive_premask(full_diag, sparsity, before.config);
                    }
                    default:
                        throw std::invalid_argument("run_iterative: unsupported mask source");
                }
            }();
            result.final_state =
                unlearn::mape_so_update(before, mask, forget_now, retain_now, hp);
        }

        StepRecord rec;
        rec.t = t;
        eval::MetricsInputs inputs;
        inputs.forget = &removed_samples;
        inputs.retain = &retain_now;
        inputs.test = &test;
        rec.metrics = eval::compute_metrics(result.final_state, inputs, &before);
        result.steps.push_back(std::move(rec));
    }
    return result;
}

// All requests removed in a single (MAPE-)SO step.
inline IterativeResult run_batch(const ModelState& state0, const Split& train, const Split& test,
                                 const std::vector<std::int64_t>& requests,
                                 unlearn::MaskSource mask_source, double sparsity,
                                 const unlearn::UnlearnHParams& hp) {
    if (requests.empty()) {
        throw std::invalid_argument("run_batch: empty request set");
    }
    const Split forget_now = samples_by_ids(train, requests);
    std::set<std::int64_t> removed(requests.begin(), requests.end());
    const Split retain_now = samples_excluding_ids(train, removed);
    if (retain_now.empty()) {
        throw std::invalid_argument("run_batch: no retain samples left");
    }

    IterativeResult result;
    if (mask_source == unlearn::MaskSource::None) {
        result.final_state = unlearn::so_update(state0, forget_now, retain_now, hp);
    } else {
        MaskPair mask = [&]() {
            switch (mask_source) {
                case unlearn::MaskSource::MLR: {
                    const auto problem =
                        select::build_mlr_problem(state0, forget_now, retain_now, sparsity);
                    return select::greedy_swap(problem, select::warm_start(problem));
                }
                case unlearn::MaskSource::SURE:
                    return select::sure_select(state0, forget_now, sparsity);
                case unlearn::MaskSource::Premask: {
                    const Vec full_diag = fisher::diag_fim_masks(state0, train);
                    return select::successive_premask(full_diag, sparsity, state0.config);
                }
                default:
                    throw std::invalid_argument("run_batch: unsupported mask source");
            }
        }();
        result.final_state = unlearn::mape_so_update(state0, mask, forget_now, retain_now, hp);
    }

    StepRecord rec;
    rec.t = static_cast<int>(requests.size());
    eval::MetricsInputs inputs;
    inputs.forget = &forget_now;
    inputs.retain = &retain_now;
    inputs.test = &test;
    rec.metrics = eval::compute_metrics(result.final_state, inputs, &state0);
    result.steps.push_back(std::move(rec));
    return result;
}

// ---------------------------------------------------------------------------
// Stored-information successive unlearning
// ---------------------------------------------------------------------------

// Aggregates kept in memory instead of raw samples: the summed gradient of
// everything removed so far and the running retain Fisher diagonal, both
// evaluated at the original model and never at intermediate states.
struct SuccessiveState {
    int t = 0;
    ModelState grad_sum;     // sum of removed-sample gradients at theta*
    ModelState fisher_diag;  // diagonal FIM over the surviving retain set
    std::size_t retain_count = 0;
    std::vector<std::int64_t> removed_ids;
};

inline SuccessiveState init_stored_info(const ModelState& state_star, const Split& train) {
    SuccessiveState s;
    s.grad_sum = zeros_like(state_star);
    s.fisher_diag = fisher::diag_fim_params(state_star, train);
    s.retain_count = train.size();
    return s;
}

struct StoredInfoStep {
    ModelState model;  // theta* plus the masked single-step delta
    SuccessiveState next;
};

// Single-step update from theta* using the stored aggregates: the retain
// Fisher sheds the removed sample with exact rescaling
//   F <- (|D_r| * F - grad(x_t)^2) / (|D_r| - 1)
// and the removed gradient joins the accumulated sum.
inline StoredInfoStep step_stored_info(const SuccessiveState& succ, const Sample& x_t,
                                       const MaskPair& mask,
                                       const unlearn::ReferenceModel& state_star,
                                       const unlearn::UnlearnHParams& hp) {
    hp.validate();
    if (succ.retain_count <= 1) {
        throw std::invalid_argument("step_stored_info: retain set exhausted");
    }
    for (const auto id : succ.removed_ids) {
        if (id == x_t.id) {
            throw std::invalid_argument("step_stored_info: sample already removed");
        }
    }
    mask.validate_against(state_star.state.config);

    const Vec gates = ones_gates(state_star.state.config);
    const Batch one = Batch::from_sample(x_t);
    LossGrads lg = loss_and_grads(state_star.state, gates, one);

    StoredInfoStep out;
    out.next.t = succ.t + 1;
    out.next.retain_count = succ.retain_count - 1;
    out.next.removed_ids = succ.removed_ids;
    out.next.removed_ids.push_back(x_t.id);

    const double n_prev = static_cast<double>(succ.retain_count);
    out.next.fisher_diag = succ.fisher_diag;
    zip_params(out.next.fisher_diag, lg.param_grads,
               [&](double& f, double g) { f = (n_prev * f - g * g) / (n_prev - 1.0); });

    out.next.grad_sum = succ.grad_sum;
    add_scaled(out.next.grad_sum, lg.param_grads, 1.0);

    ModelState delta = out.next.grad_sum;
    zip_params(delta, out.next.fisher_diag,
               [&](double& g, double f) { g = hp.eta * (g / (f + hp.lambda)); });
    unlearn::detail::check_finite(delta, "step_stored_info");

    out.model = apply_masked_delta(state_star.state, mask, delta);
    return out;
}

}  // namespace successive
}  // namespace mape
