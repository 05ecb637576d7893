#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mape/data.hpp"
#include "mape/fisher.hpp"
#include "mape/forward.hpp"
#include "mape/mask.hpp"
#include "mape/model.hpp"
#include "mape/rng.hpp"
#include "mape/train.hpp"

namespace mape {
namespace unlearn {

enum class Method { SO, MapeSO, GA, GD, NPO, DPO, SA, RT };

enum class MaskSource { None, MLR, MLF, SURE, Premask, External };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::SO: return "SO";
        case Method::MapeSO: return "MAPE-SO";
        case Method::GA: return "GA";
        case Method::GD: return "GD";
        case Method::NPO: return "NPO";
        case Method::DPO: return "DPO";
        case Method::SA: return "SA";
        case Method::RT: return "RT";
    }
    return "?";
}

inline Method method_from_name(const std::string& name) {
    if (name == "SO") return Method::SO;
    if (name == "MAPE-SO") return Method::MapeSO;
    if (name == "GA") return Method::GA;
    if (name == "GD") return Method::GD;
    if (name == "NPO") return Method::NPO;
    if (name == "DPO") return Method::DPO;
    if (name == "SA") return Method::SA;
    if (name == "RT") return Method::RT;
    throw std::invalid_argument("unknown unlearning method: " + name);
}

inline const char* mask_source_name(MaskSource s) {
    switch (s) {
        case MaskSource::None: return "none";
        case MaskSource::MLR: return "MLR";
        case MaskSource::MLF: return "MLF";
        case MaskSource::SURE: return "SURE";
        case MaskSource::Premask: return "premask";
        case MaskSource::External: return "external";
    }
    return "?";
}

inline MaskSource mask_source_from_name(const std::string& name) {
    if (name == "none") return MaskSource::None;
    if (name == "MLR") return MaskSource::MLR;
    if (name == "MLF") return MaskSource::MLF;
    if (name == "SURE") return MaskSource::SURE;
    if (name == "premask") return MaskSource::Premask;
    if (name == "external") return MaskSource::External;
    throw std::invalid_argument("unknown mask source: " + name);
}

struct UnlearnHParams {
    Method method = Method::SO;
    double eta = 1.0;         // unlearning rate / fine-tuning step size
    int epochs = 3;
    int batch_size = 32;
    double beta = 0.1;        // NPO/DPO inverse temperature
    double gamma = 5e-5;      // SA sparsity-penalty weight
    double lambda = 1e-4;     // FIM damping
    std::uint64_t seed = 1;
    MaskSource mask_source = MaskSource::None;
    std::string external_mask_path;

    void validate() const {
        if (eta <= 0.0) {
            throw std::invalid_argument("UnlearnHParams: eta must be > 0");
        }
        if (beta <= 0.0 &&
            (method == Method::NPO || method == Method::DPO)) {
            throw std::invalid_argument("UnlearnHParams: beta must be > 0");
        }
        if (epochs < 0) {
            throw std::invalid_argument("UnlearnHParams: epochs must be >= 0");
        }
    }
};

// Frozen pre-unlearning snapshot.
struct ReferenceModel {
    ModelState state;

    explicit ReferenceModel(const ModelState& s) : state(s) {}
};

struct IdkPair {
    std::vector<std::int32_t> tokens;
    std::int32_t original_label = 0;
    std::int32_t reject_label = 0;

    void validate(const ModelConfig& cfg) const {
        if (reject_label != cfg.reject_class()) {
            throw std::invalid_argument("IdkPair: reject label is not the REJECT class");
        }
        if (original_label == reject_label) {
            throw std::invalid_argument("IdkPair: original label equals reject label");
        }
    }
};

inline std::vector<IdkPair> make_idk_pairs(const Split& forget, const ModelConfig& cfg) {
    std::vector<IdkPair> pairs;
    pairs.reserve(forget.size());
    for (const Sample& s : forget) {
        IdkPair p;
        p.tokens = s.tokens;
        p.original_label = s.label;
        p.reject_label = static_cast<std::int32_t>(cfg.reject_class());
        p.validate(cfg);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

namespace detail {

inline void check_finite(const ModelState& s, const char* what) {
    bool ok = true;
    zip_params_const(s, s, [&](double v, double) {
        if (!std::isfinite(v)) {
            ok = false;
        }
    });
    if (!ok) {
        throw std::runtime_error(std::string(what) + ": non-finite update");
    }
}

inline double log_sigmoid(double t) {
    if (t >= 0.0) {
        return -std::log1p(std::exp(-t));
    }
    return t - std::log1p(std::exp(t));
}

inline double sigmoid(double t) {
    if (t >= 0.0) {
        return 1.0 / (1.0 + std::exp(-t));
    }
    const double e = std::exp(t);
    return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Second-order updates
// ---------------------------------------------------------------------------

// theta' = theta + eta * (fim + lambda)^-1 (.) grad_sum over all parameters.
inline ModelState so_update_from_stats(const ModelState& state, const ModelState& fim,
                                       const ModelState& grad_sum, double eta, double lambda) {
    ModelState delta = grad_sum;
    zip_params(delta, fim, [&](double& g, double f) { g = eta * (g / (f + lambda)); });
    detail::check_finite(delta, "so_update");
    ModelState out = state;
    add_scaled(out, delta, 1.0);
    return out;
}

inline ModelState so_update(const ModelState& state, const Split& forget, const Split& retain,
                            const UnlearnHParams& hp) {
    hp.validate();
    if (forget.empty() || retain.empty()) {
        throw std::invalid_argument("so_update: empty split");
    }
    const ModelState fim = fisher::diag_fim_params(state, retain);
    const ModelState grad_sum = fisher::forget_param_gradient(state, forget);
    return so_update_from_stats(state, fim, grad_sum, hp.eta, hp.lambda);
}

// Masked second-order step. Fisher and gradient accumulation touch only the
// parameters of active modules, in the same per-sample order so_update uses,
// so active-entry deltas are bitwise equal to the unmasked path.
inline ModelState mape_so_update(const ModelState& state, const MaskPair& mask,
                                 const Split& forget, const Split& retain,
                                 const UnlearnHParams& hp) {
    hp.validate();
    mask.validate_against(state.config);
    if (forget.empty() || retain.empty()) {
        throw std::invalid_argument("mape_so_update: empty split");
    }

    std::vector<int> active;
    for (int idx = 0; idx < state.config.module_count(); ++idx) {
        if (mask.module(idx)) {
            active.push_back(idx);
        }
    }

    ModelState fim = zeros_like(state);
    ModelState grad_sum = zeros_like(state);
    std::vector<std::vector<double*>> fim_slots;
    std::vector<std::vector<double*>> grad_slots;
    for (const int idx : active) {
        fim_slots.push_back(module_param_ptrs(fim, idx));
        grad_slots.push_back(module_param_ptrs(grad_sum, idx));
    }

    const double inv_retain = 1.0 / static_cast<double>(retain.size());
    fisher::for_each_sample_grads(state, retain, [&](const LossGrads& lg) {
        for (std::size_t m = 0; m < active.size(); ++m) {
            const auto src = module_param_ptrs(lg.param_grads, active[m]);
            auto& dst = fim_slots[m];
            for (std::size_t i = 0; i < src.size(); ++i) {
                *dst[i] += (*src[i]) * (*src[i]);
            }
        }
    });
    for (auto& slots : fim_slots) {
        for (double* p : slots) {
            *p *= inv_retain;
        }
    }
    fisher::for_each_sample_grads(state, forget, [&](const LossGrads& lg) {
        for (std::size_t m = 0; m < active.size(); ++m) {
            const auto src = module_param_ptrs(lg.param_grads, active[m]);
            auto& dst = grad_slots[m];
            for (std::size_t i = 0; i < src.size(); ++i) {
                *dst[i] += *src[i];
            }
        }
    });

    ModelState delta = zeros_like(state);
    for (std::size_t m = 0; m < active.size(); ++m) {
        const auto d = module_param_ptrs(delta, active[m]);
        for (std::size_t i = 0; i < d.size(); ++i) {
            *d[i] = hp.eta * ((*grad_slots[m][i]) / ((*fim_slots[m][i]) + hp.lambda));
        }
    }
    detail::check_finite(delta, "mape_so_update");
    return apply_masked_delta(state, mask, delta);
}

// ---------------------------------------------------------------------------
// Fine-tuning based unlearning losses
// ---------------------------------------------------------------------------

// L_GA = -E_f[l]
inline LossGrads ga_loss(const ModelState& state, const Batch& batch) {
    const Vec gates = ones_gates(state.config);
    ForwardCache cache = forward(state, gates, batch);
    const auto B = static_cast<std::size_t>(batch.size());
    LossGrads out;
    out.loss = -cross_entropy(cache.logits, batch.labels);
    if (!std::isfinite(out.loss)) {
        throw std::runtime_error("ga_loss: non-finite loss");
    }
    Mat dlogits(B, cache.logits.cols);
    for (std::size_t b = 0; b < B; ++b) {
        const Vec p = softmax_row(cache.logits, b);
        for (std::size_t c = 0; c < cache.logits.cols; ++c) {
            dlogits(b, c) = -p[c] / static_cast<double>(B);
        }
        dlogits(b, static_cast<std::size_t>(batch.labels[b])) += 1.0 / static_cast<double>(B);
    }
    Gradients g = backward(state, gates, batch, cache, dlogits);
    out.param_grads = std::move(g.params);
    out.mask_grads = std::move(g.masks);
    return out;
}

// L_GD = -E_f[l] + E_r[l]; one retain batch paired per forget batch. A null
// retain batch disables the retain term, reducing GD to GA.
inline LossGrads gd_loss(const ModelState& state, const Batch& forget_batch,
                         const Batch* retain_batch) {
    LossGrads out = ga_loss(state, forget_batch);
    if (retain_batch != nullptr) {
        const Vec gates = ones_gates(state.config);
        LossGrads retain = loss_and_grads(state, gates, *retain_batch);
        out.loss += retain.loss;
        add_scaled(out.param_grads, retain.param_grads, 1.0);
        for (std::size_t i = 0; i < out.mask_grads.values.size(); ++i) {
            out.mask_grads.values[i] += retain.mask_grads.values[i];
        }
    }
    return out;
}

// L_NPO = -(2/beta) E_f[log sigmoid(-beta log(pi/pi_ref))]
inline LossGrads npo_loss(const ModelState& state, const ReferenceModel& ref, const Batch& batch,
                          double beta) {
    if (beta <= 0.0) {
        throw std::invalid_argument("npo_loss: beta must be > 0");
    }
    const Vec gates = ones_gates(state.config);
    ForwardCache cache = forward(state, gates, batch);
    const Mat ref_logits = forward_logits(ref.state, gates, batch);
    const auto B = static_cast<std::size_t>(batch.size());
    LossGrads out;
    Mat dlogits(B, cache.logits.cols);
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const int y = batch.labels[b];
        const double log_ratio =
            log_prob_of(cache.logits, b, y) - log_prob_of(ref_logits, b, y);
        loss += -(2.0 / beta) * detail::log_sigmoid(-beta * log_ratio);
        const double coeff = 2.0 * detail::sigmoid(beta * log_ratio) / static_cast<double>(B);
        const Vec p = softmax_row(cache.logits, b);
        for (std::size_t c = 0; c < cache.logits.cols; ++c) {
            dlogits(b, c) = -coeff * p[c];
        }
        dlogits(b, static_cast<std::size_t>(y)) += coeff;
    }
    out.loss = loss / static_cast<double>(B);
    if (!std::isfinite(out.loss)) {
        throw std::runtime_error("npo_loss: non-finite loss");
    }
    Gradients g = backward(state, gates, batch, cache, dlogits);
    out.param_grads = std::move(g.params);
    out.mask_grads = std::move(g.masks);
    return out;
}

// L_DPO = -(1/beta) E[log sigmoid(beta log(pi(y_idk)/pi_ref(y_idk))
//                                 - beta log(pi(y)/pi_ref(y)))]
// The designated REJECT class plays the role of the alternative response.
inline LossGrads dpo_loss(const ModelState& state, const ReferenceModel& ref, const Batch& batch,
                          double beta) {
    if (beta <= 0.0) {
        throw std::invalid_argument("dpo_loss: beta must be > 0");
    }
    const int reject = state.config.reject_class();
    const Vec gates = ones_gates(state.config);
    ForwardCache cache = forward(state, gates, batch);
    const Mat ref_logits = forward_logits(ref.state, gates, batch);
    const auto B = static_cast<std::size_t>(batch.size());
    LossGrads out;
    Mat dlogits(B, cache.logits.cols);
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const int y = batch.labels[b];
        if (y == reject) {
            throw std::invalid_argument("dpo_loss: sample already labeled REJECT");
        }
        const double r_idk =
            log_prob_of(cache.logits, b, reject) - log_prob_of(ref_logits, b, reject);
        const double r_y = log_prob_of(cache.logits, b, y) - log_prob_of(ref_logits, b, y);
        const double u = beta * (r_idk - r_y);
        loss += -(1.0 / beta) * detail::log_sigmoid(u);
        const double coeff = detail::sigmoid(-u) / static_cast<double>(B);
        // p-terms cancel between the two log-prob derivatives
        dlogits(b, static_cast<std::size_t>(y)) += coeff;
        dlogits(b, static_cast<std::size_t>(reject)) -= coeff;
    }
    out.loss = loss / static_cast<double>(B);
    if (!std::isfinite(out.loss)) {
        throw std::runtime_error("dpo_loss: non-finite loss");
    }
    Gradients g = backward(state, gates, batch, cache, dlogits);
    out.param_grads = std::move(g.params);
    out.mask_grads = std::move(g.masks);
    return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning drivers
// ---------------------------------------------------------------------------

// Epochs of plain gradient steps with the method loss. With a mask, every
// step routes through apply_masked_delta, so frozen-module and non-module
// parameters stay bit-identical to the input state.
inline ModelState finetune_unlearn(const ModelState& state, const MaskPair* mask,
                                   const Split& forget, const Split& retain,
                                   const UnlearnHParams& hp) {
    hp.validate();
    if (hp.method != Method::GA && hp.method != Method::GD && hp.method != Method::NPO &&
        hp.method != Method::DPO) {
        throw std::invalid_argument("finetune_unlearn: method is not fine-tuning based");
    }
    if (forget.empty()) {
        throw std::invalid_argument("finetune_unlearn: empty forget split");
    }
    if (mask != nullptr) {
        mask->validate_against(state.config);
    }

    ModelState current = state;
    const ReferenceModel ref(state);
    Rng rng(hp.seed);

    std::vector<std::size_t> forget_order(forget.size());
    for (std::size_t i = 0; i < forget_order.size(); ++i) {
        forget_order[i] = i;
    }
    std::vector<std::size_t> retain_order(retain.size());
    for (std::size_t i = 0; i < retain_order.size(); ++i) {
        retain_order[i] = i;
    }
    std::size_t retain_cursor = 0;

    auto next_retain_batch = [&]() -> Batch {
        if (retain.empty()) {
            throw std::invalid_argument("finetune_unlearn: GD needs a retain split");
        }
        Split view;
        for (int i = 0; i < hp.batch_size; ++i) {
            if (retain_cursor == 0) {
                rng.shuffle(retain_order);
            }
            view.push_back(retain[retain_order[retain_cursor]]);
            retain_cursor = (retain_cursor + 1) % retain.size();
        }
        return Batch::from_split(view);
    };

    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        rng.shuffle(forget_order);
        for (std::size_t start = 0; start < forget.size();
             start += static_cast<std::size_t>(hp.batch_size)) {
            const std::size_t stop =
                std::min(forget.size(), start + static_cast<std::size_t>(hp.batch_size));
            Split view;
            for (std::size_t i = start; i < stop; ++i) {
                view.push_back(forget[forget_order[i]]);
            }
            const Batch fbatch = Batch::from_split(view);

            LossGrads lg;
            switch (hp.method) {
                case Method::GA:
                    lg = ga_loss(current, fbatch);
                    break;
                case Method::GD: {
                    const Batch rbatch = next_retain_batch();
                    lg = gd_loss(current, fbatch, &rbatch);
                    break;
                }
                case Method::NPO:
                    lg = npo_loss(current, ref, fbatch, hp.beta);
                    break;
                case Method::DPO:
                    lg = dpo_loss(current, ref, fbatch, hp.beta);
                    break;
                default:
                    break;
            }

            if (mask != nullptr) {
                ModelState delta = lg.param_grads;
                transform_params(delta, [&](double v) { return -hp.eta * v; });
                current = apply_masked_delta(current, *mask, delta);
            } else {
                add_scaled(current, lg.param_grads, -hp.eta);
            }
            detail::check_finite(current, "finetune_unlearn");
        }
    }
    return current;
}

// Retain fine-tuning with an L1 sparsity penalty over all parameters.
inline ModelState sa_unlearn(const ModelState& state, const Split& retain,
                             const UnlearnHParams& hp) {
    hp.validate();
    if (retain.empty()) {
        throw std::invalid_argument("sa_unlearn: empty retain split");
    }
    ModelState current = state;
    const Vec gates = ones_gates(state.config);
    Rng rng(hp.seed);
    std::vector<std::size_t> order(retain.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < retain.size();
             start += static_cast<std::size_t>(hp.batch_size)) {
            const std::size_t stop =
                std::min(retain.size(), start + static_cast<std::size_t>(hp.batch_size));
            Split view;
            for (std::size_t i = start; i < stop; ++i) {
                view.push_back(retain[order[i]]);
            }
            const Batch batch = Batch::from_split(view);
            LossGrads lg = loss_and_grads(current, gates, batch);
            // l1 subgradient: sign(theta), 0 at 0
            ModelState penalty = current;
            transform_params(penalty, [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
            add_scaled(lg.param_grads, penalty, hp.gamma);
            add_scaled(current, lg.param_grads, -hp.eta);
            detail::check_finite(current, "sa_unlearn");
        }
    }
    return current;
}

// Gold-standard baseline: retrain from scratch on the retain split.
inline TrainResult rt_retrain(const ModelConfig& cfg, const Split& retain,
                              const TrainHParams& hp, const Split* test_split = nullptr) {
    return train(cfg, retain, hp, test_split);
}

}  // namespace unlearn
}  // namespace mape
