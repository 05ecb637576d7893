#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "mape/data.hpp"
#include "mape/linalg.hpp"
#include "mape/model.hpp"

namespace mape {

constexpr double kLayerNormEps = 1e-5;

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
}

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
    const double pdf = 0.39894228040143267794 * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

namespace detail {

struct LnCache {
    Mat xhat;     // (T, d)
    Vec inv_std;  // T
};

// y = gamma * (x - mean) / sqrt(var + eps) + beta, per row.
inline void ln_forward(const Mat& x, const Vec& gamma, const Vec& beta, Mat& y, LnCache& cache) {
    const std::size_t T = x.rows;
    const std::size_t d = x.cols;
    y = Mat(T, d);
    cache.xhat = Mat(T, d);
    cache.inv_std.assign(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            mean += x(t, i);
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double c = x(t, i) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.inv_std[t] = inv_std;
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (x(t, i) - mean) * inv_std;
            cache.xhat(t, i) = xhat;
            y(t, i) = gamma[i] * xhat + beta[i];
        }
    }
}

inline void ln_backward(const Mat& dy, const Vec& gamma, const LnCache& cache, Vec& dgamma,
                        Vec& dbeta, Mat& dx) {
    const std::size_t T = dy.rows;
    const std::size_t d = dy.cols;
    dx = Mat(T, d);
    for (std::size_t t = 0; t < T; ++t) {
        double sum_dxhat = 0.0;
        double sum_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double g = dy(t, i);
            dgamma[i] += g * cache.xhat(t, i);
            dbeta[i] += g;
            const double dxhat = g * gamma[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * cache.xhat(t, i);
        }
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) {
            const double dxhat = dy(t, i) * gamma[i];
            dx(t, i) = cache.inv_std[t] *
                       (dxhat - inv_d * sum_dxhat - cache.xhat(t, i) * inv_d * sum_dxhat_xhat);
        }
    }
}

// y += x * W, x (T, in), W (in, out), y (T, out)
inline void matmul_add(const Mat& x, const Mat& w, Mat& y) {
    for (std::size_t t = 0; t < x.rows; ++t) {
        const double* xr = &x.data[t * x.cols];
        double* yr = &y.data[t * y.cols];
        for (std::size_t i = 0; i < x.cols; ++i) {
            const double xv = xr[i];
            if (xv == 0.0) {
                continue;
            }
            const double* wr = &w.data[i * w.cols];
            for (std::size_t j = 0; j < w.cols; ++j) {
                yr[j] += xv * wr[j];
            }
        }
    }
}

// dW += x^T * dy ; dx += dy * W^T
inline void matmul_backward(const Mat& x, const Mat& w, const Mat& dy, Mat& dw, Mat& dx) {
    for (std::size_t t = 0; t < x.rows; ++t) {
        const double* xr = &x.data[t * x.cols];
        const double* dyr = &dy.data[t * dy.cols];
        double* dxr = &dx.data[t * dx.cols];
        for (std::size_t i = 0; i < x.cols; ++i) {
            const double* wr = &w.data[i * w.cols];
            double* dwr = &dw.data[i * dw.cols];
            double acc = 0.0;
            const double xv = xr[i];
            for (std::size_t j = 0; j < w.cols; ++j) {
                dwr[j] += xv * dyr[j];
                acc += wr[j] * dyr[j];
            }
            dxr[i] += acc;
        }
    }
}

struct LayerCache {
    Mat x_in;    // layer input (T, d)
    LnCache ln1;
    Mat a;       // normalized input (T, d)
    Mat q, k, v;
    Vec att;     // heads * T * T softmax weights
    Mat ctx;     // pre-gate head contexts, head blocks side by side (T, d)
    Mat x_mid;   // after attention residual
    LnCache ln2;
    Mat bnorm;   // normalized x_mid
    Mat hpre;    // (T, d_ff)
    Mat hact;    // gelu(hpre), pre-gate
};

struct SampleCache {
    std::vector<LayerCache> layers;
    Mat x_final;  // input of final norm
    LnCache lnf;
    Mat ynorm;
    Vec pooled;
};

}  // namespace detail

struct ForwardCache {
    std::vector<detail::SampleCache> samples;
    Mat logits;  // (batch, num_classes)
};

struct MaskGradient {
    Vec values;  // module order, layer-major heads then filters
};

struct Gradients {
    ModelState params;
    MaskGradient masks;
};

inline void check_gates(const ModelState& state, const Vec& gates) {
    if (static_cast<int>(gates.size()) != state.config.module_count()) {
        throw std::invalid_argument("gates length does not match module count");
    }
}

// Full forward pass with cached intermediates. Head h's context is scaled by
// its gate before the output projection; filter f's activation is scaled by
// its gate before the second FFN projection.
inline ForwardCache forward(const ModelState& state, const Vec& gates, const Batch& batch) {
    check_gates(state, gates);
    batch.validate_against(state.config);
    const ModelConfig& cfg = state.config;
    const auto T = static_cast<std::size_t>(batch.seq_len);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto ff = static_cast<std::size_t>(cfg.d_ff);
    const auto H = static_cast<std::size_t>(cfg.num_heads);
    const auto dh = static_cast<std::size_t>(cfg.head_dim());
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardCache out;
    out.samples.resize(static_cast<std::size_t>(batch.size()));
    out.logits = Mat(static_cast<std::size_t>(batch.size()), static_cast<std::size_t>(cfg.num_classes));

    for (int b = 0; b < batch.size(); ++b) {
        detail::SampleCache& sc = out.samples[static_cast<std::size_t>(b)];
        sc.layers.resize(static_cast<std::size_t>(cfg.num_layers));

        Mat x(T, d);
        for (std::size_t t = 0; t < T; ++t) {
            const auto tok = static_cast<std::size_t>(
                batch.tokens[static_cast<std::size_t>(b) * T + t]);
            for (std::size_t i = 0; i < d; ++i) {
                x(t, i) = state.tok_emb(tok, i) + state.pos_emb(t, i);
            }
        }

        for (int l = 0; l < cfg.num_layers; ++l) {
            detail::LayerCache& lc = sc.layers[static_cast<std::size_t>(l)];
            const LayerParams& lp = state.layers[static_cast<std::size_t>(l)];
            lc.x_in = x;

            detail::ln_forward(x, lp.ln1_g, lp.ln1_b, lc.a, lc.ln1);

            lc.q = Mat(T, d);
            lc.k = Mat(T, d);
            lc.v = Mat(T, d);
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t j = 0; j < d; ++j) {
                    lc.q(t, j) = lp.bq[j];
                    lc.k(t, j) = lp.bk[j];
                    lc.v(t, j) = lp.bv[j];
                }
            }
            detail::matmul_add(lc.a, lp.wq, lc.q);
            detail::matmul_add(lc.a, lp.wk, lc.k);
            detail::matmul_add(lc.a, lp.wv, lc.v);

            lc.att.assign(H * T * T, 0.0);
            lc.ctx = Mat(T, d);
            Mat gated_ctx(T, d);
            for (std::size_t h = 0; h < H; ++h) {
                const std::size_t c0 = h * dh;
                const double gate = gates[static_cast<std::size_t>(
                    cfg.head_module_index(l, static_cast<int>(h)))];
                for (std::size_t i = 0; i < T; ++i) {
                    double* att_row = &lc.att[(h * T + i) * T];
                    double max_s = -1e300;
                    for (std::size_t j = 0; j < T; ++j) {
                        double s = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) {
                            s += lc.q(i, c0 + c) * lc.k(j, c0 + c);
                        }
                        s *= att_scale;
                        att_row[j] = s;
                        max_s = std::max(max_s, s);
                    }
                    double denom = 0.0;
                    for (std::size_t j = 0; j < T; ++j) {
                        att_row[j] = std::exp(att_row[j] - max_s);
                        denom += att_row[j];
                    }
                    for (std::size_t j = 0; j < T; ++j) {
                        att_row[j] /= denom;
                    }
                    for (std::size_t c = 0; c < dh; ++c) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < T; ++j) {
                            acc += att_row[j] * lc.v(j, c0 + c);
                        }
                        lc.ctx(i, c0 + c) = acc;
                        gated_ctx(i, c0 + c) = gate * acc;
                    }
                }
            }

            lc.x_mid = x;
            {
                Mat attn_out(T, d);
                for (std::size_t t = 0; t < T; ++t) {
                    for (std::size_t j = 0; j < d; ++j) {
                        attn_out(t, j) = lp.bo[j];
                    }
                }
                detail::matmul_add(gated_ctx, lp.wo, attn_out);
                for (std::size_t i = 0; i < T * d; ++i) {
                    lc.x_mid.data[i] += attn_out.data[i];
                }
            }

            detail::ln_forward(lc.x_mid, lp.ln2_g, lp.ln2_b, lc.bnorm, lc.ln2);

            lc.hpre = Mat(T, ff);
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t j = 0; j < ff; ++j) {
                    lc.hpre(t, j) = lp.b1[j];
                }
            }
            detail::matmul_add(lc.bnorm, lp.w1, lc.hpre);

            lc.hact = Mat(T, ff);
            Mat hgated(T, ff);
            for (std::size_t j = 0; j < ff; ++j) {
                const double gate = gates[static_cast<std::size_t>(
                    cfg.filter_module_index(l, static_cast<int>(j)))];
                for (std::size_t t = 0; t < T; ++t) {
                    const double act = gelu(lc.hpre(t, j));
                    lc.hact(t, j) = act;
                    hgated(t, j) = gate * act;
                }
            }

            x = lc.x_mid;
            {
                Mat ffn_out(T, d);
                for (std::size_t t = 0; t < T; ++t) {
                    for (std::size_t j = 0; j < d; ++j) {
                        ffn_out(t, j) = lp.b2[j];
                    }
                }
                detail::matmul_add(hgated, lp.w2, ffn_out);
                for (std::size_t i = 0; i < T * d; ++i) {
                    x.data[i] += ffn_out.data[i];
                }
            }
        }

        sc.x_final = x;
        detail::ln_forward(x, state.lnf_g, state.lnf_b, sc.ynorm, sc.lnf);

        sc.pooled.assign(d, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t i = 0; i < d; ++i) {
                sc.pooled[i] += sc.ynorm(t, i);
            }
        }
        for (std::size_t i = 0; i < d; ++i) {
            sc.pooled[i] /= static_cast<double>(T);
        }

        for (int c = 0; c < cfg.num_classes; ++c) {
            double acc = state.head_b[static_cast<std::size_t>(c)];
            for (std::size_t i = 0; i < d; ++i) {
                acc += sc.pooled[i] * state.head_w(i, static_cast<std::size_t>(c));
            }
            out.logits(static_cast<std::size_t>(b), static_cast<std::size_t>(c)) = acc;
        }
    }
    return out;
}

inline Mat forward_logits(const ModelState& state, const Vec& gates, const Batch& batch) {
    return forward(state, gates, batch).logits;
}

// Backpropagates an arbitrary d(loss)/d(logits) through the cached forward
// pass, producing exact parameter gradients and gate (mask) gradients at the
// gate values the forward pass used.
inline Gradients backward(const ModelState& state, const Vec& gates, const Batch& batch,
                          const ForwardCache& cache, const Mat& dlogits) {
    check_gates(state, gates);
    const ModelConfig& cfg = state.config;
    const auto T = static_cast<std::size_t>(batch.seq_len);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto ff = static_cast<std::size_t>(cfg.d_ff);
    const auto H = static_cast<std::size_t>(cfg.num_heads);
    const auto dh = static_cast<std::size_t>(cfg.head_dim());
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Gradients g;
    g.params = zeros_like(state);
    g.masks.values.assign(static_cast<std::size_t>(cfg.module_count()), 0.0);

    for (int b = 0; b < batch.size(); ++b) {
        const detail::SampleCache& sc = cache.samples[static_cast<std::size_t>(b)];

        Vec dpooled(d, 0.0);
        for (int c = 0; c < cfg.num_classes; ++c) {
            const double dl = dlogits(static_cast<std::size_t>(b), static_cast<std::size_t>(c));
            g.params.head_b[static_cast<std::size_t>(c)] += dl;
            for (std::size_t i = 0; i < d; ++i) {
                g.params.head_w(i, static_cast<std::size_t>(c)) += sc.pooled[i] * dl;
                dpooled[i] += state.head_w(i, static_cast<std::size_t>(c)) * dl;
            }
        }

        Mat dy(T, d);
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t i = 0; i < d; ++i) {
                dy(t, i) = dpooled[i] / static_cast<double>(T);
            }
        }

        Mat dx;
        detail::ln_backward(dy, state.lnf_g, sc.lnf, g.params.lnf_g, g.params.lnf_b, dx);

        for (int l = cfg.num_layers - 1; l >= 0; --l) {
            const detail::LayerCache& lc = sc.layers[static_cast<std::size_t>(l)];
            const LayerParams& lp = state.layers[static_cast<std::size_t>(l)];
            LayerParams& gp = g.params.layers[static_cast<std::size_t>(l)];

            // FFN block: x_out = x_mid + (gate . gelu(ln2(x_mid) W1 + b1)) W2 + b2
            Mat dhgated(T, ff);
            {
                // reconstruct gated activations for the W2 input
                Mat hgated(T, ff);
                for (std::size_t j = 0; j < ff; ++j) {
                    const double gate = gates[static_cast<std::size_t>(
                        cfg.filter_module_index(l, static_cast<int>(j)))];
                    for (std::size_t t = 0; t < T; ++t) {
                        hgated(t, j) = gate * lc.hact(t, j);
                    }
                }
                detail::matmul_backward(hgated, lp.w2, dx, gp.w2, dhgated);
                for (std::size_t t = 0; t < T; ++t) {
                    for (std::size_t j = 0; j < d; ++j) {
                        gp.b2[j] += dx(t, j);
                    }
                }
            }

            Mat dhpre(T, ff);
            for (std::size_t j = 0; j < ff; ++j) {
                const int mod = cfg.filter_module_index(l, static_cast<int>(j));
                const double gate = gates[static_cast<std::size_t>(mod)];
                double dgate = 0.0;
                for (std::size_t t = 0; t < T; ++t) {
                    dgate += lc.hact(t, j) * dhgated(t, j);
                    dhpre(t, j) = gate * dhgated(t, j) * gelu_grad(lc.hpre(t, j));
                }
                g.masks.values[static_cast<std::size_t>(mod)] += dgate;
            }

            Mat dbnorm(T, d);
            detail::matmul_backward(lc.bnorm, lp.w1, dhpre, gp.w1, dbnorm);
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t j = 0; j < ff; ++j) {
                    gp.b1[j] += dhpre(t, j);
                }
            }

            Mat dx_mid_from_ln;
            detail::ln_backward(dbnorm, lp.ln2_g, lc.ln2, gp.ln2_g, gp.ln2_b, dx_mid_from_ln);
            Mat dx_mid = dx;  // residual path
            for (std::size_t i = 0; i < T * d; ++i) {
                dx_mid.data[i] += dx_mid_from_ln.data[i];
            }

            // Attention block: x_mid = x_in + (gate . ctx) Wo + bo
            Mat dgctx(T, d);
            {
                Mat gated_ctx(T, d);
                for (std::size_t h = 0; h < H; ++h) {
                    const double gate = gates[static_cast<std::size_t>(
                        cfg.head_module_index(l, static_cast<int>(h)))];
                    const std::size_t c0 = h * dh;
                    for (std::size_t t = 0; t < T; ++t) {
                        for (std::size_t c = 0; c < dh; ++c) {
                            gated_ctx(t, c0 + c) = gate * lc.ctx(t, c0 + c);
                        }
                    }
                }
                detail::matmul_backward(gated_ctx, lp.wo, dx_mid, gp.wo, dgctx);
                for (std::size_t t = 0; t < T; ++t) {
                    for (std::size_t j = 0; j < d; ++j) {
                        gp.bo[j] += dx_mid(t, j);
                    }
                }
            }

            Mat dq(T, d);
            Mat dk(T, d);
            Mat dv(T, d);
            for (std::size_t h = 0; h < H; ++h) {
                const int mod = cfg.head_module_index(l, static_cast<int>(h));
                const double gate = gates[static_cast<std::size_t>(mod)];
                const std::size_t c0 = h * dh;

                double dgate = 0.0;
                for (std::size_t t = 0; t < T; ++t) {
                    for (std::size_t c = 0; c < dh; ++c) {
                        dgate += lc.ctx(t, c0 + c) * dgctx(t, c0 + c);
                    }
                }
                g.masks.values[static_cast<std::size_t>(mod)] += dgate;

                for (std::size_t i = 0; i < T; ++i) {
                    const double* att_row = &lc.att[(h * T + i) * T];
                    Vec datt(T, 0.0);
                    for (std::size_t j = 0; j < T; ++j) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) {
                            acc += gate * dgctx(i, c0 + c) * lc.v(j, c0 + c);
                        }
                        datt[j] = acc;
                        for (std::size_t c = 0; c < dh; ++c) {
                            dv(j, c0 + c) += att_row[j] * gate * dgctx(i, c0 + c);
                        }
                    }
                    double dot_ad = 0.0;
                    for (std::size_t j = 0; j < T; ++j) {
                        dot_ad += att_row[j] * datt[j];
                    }
                    for (std::size_t j = 0; j < T; ++j) {
                        const double ds = att_row[j] * (datt[j] - dot_ad) * att_scale;
                        for (std::size_t c = 0; c < dh; ++c) {
                            dq(i, c0 + c) += ds * lc.k(j, c0 + c);
                            dk(j, c0 + c) += ds * lc.q(i, c0 + c);
                        }
                    }
                }
            }

            Mat da(T, d);
            detail::matmul_backward(lc.a, lp.wq, dq, gp.wq, da);
            detail::matmul_backward(lc.a, lp.wk, dk, gp.wk, da);
            detail::matmul_backward(lc.a, lp.wv, dv, gp.wv, da);
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t j = 0; j < d; ++j) {
                    gp.bq[j] += dq(t, j);
                    gp.bk[j] += dk(t, j);
                    gp.bv[j] += dv(t, j);
                }
            }

            Mat dx_in_from_ln;
            detail::ln_backward(da, lp.ln1_g, lc.ln1, gp.ln1_g, gp.ln1_b, dx_in_from_ln);
            dx = dx_mid;  // residual path
            for (std::size_t i = 0; i < T * d; ++i) {
                dx.data[i] += dx_in_from_ln.data[i];
            }
        }

        for (std::size_t t = 0; t < T; ++t) {
            const auto tok = static_cast<std::size_t>(
                batch.tokens[static_cast<std::size_t>(b) * T + t]);
            for (std::size_t i = 0; i < d; ++i) {
                g.params.tok_emb(tok, i) += dx(t, i);
                g.params.pos_emb(t, i) += dx(t, i);
            }
        }
    }
    return g;
}

inline Vec softmax_row(const Mat& logits, std::size_t row) {
    Vec p(logits.cols);
    double max_v = -1e300;
    for (std::size_t c = 0; c < logits.cols; ++c) {
        max_v = std::max(max_v, logits(row, c));
    }
    double denom = 0.0;
    for (std::size_t c = 0; c < logits.cols; ++c) {
        p[c] = std::exp(logits(row, c) - max_v);
        denom += p[c];
    }
    for (auto& v : p) {
        v /= denom;
    }
    return p;
}

inline double log_prob_of(const Mat& logits, std::size_t row, int cls) {
    double max_v = -1e300;
    for (std::size_t c = 0; c < logits.cols; ++c) {
        max_v = std::max(max_v, logits(row, c));
    }
    double lse = 0.0;
    for (std::size_t c = 0; c < logits.cols; ++c) {
        lse += std::exp(logits(row, c) - max_v);
    }
    return logits(row, static_cast<std::size_t>(cls)) - max_v - std::log(lse);
}

// Mean cross-entropy over the batch.
inline double cross_entropy(const Mat& logits, const std::vector<std::int32_t>& labels) {
    double loss = 0.0;
    for (std::size_t b = 0; b < logits.rows; ++b) {
        loss -= log_prob_of(logits, b, labels[b]);
    }
    return loss / static_cast<double>(logits.rows);
}

struct LossGrads {
    double loss = 0.0;
    ModelState param_grads;
    MaskGradient mask_grads;
};

// Mean cross-entropy plus exact gradients for parameters and gates. Callers
// pass all-ones gates to obtain the mask gradient at the unmasked model.
inline LossGrads loss_and_grads(const ModelState& state, const Vec& gates, const Batch& batch) {
    ForwardCache cache = forward(state, gates, batch);
    const auto B = static_cast<std::size_t>(batch.size());
    Mat dlogits(B, cache.logits.cols);
    LossGrads out;
    out.loss = cross_entropy(cache.logits, batch.labels);
    if (!std::isfinite(out.loss)) {
        throw std::runtime_error("loss_and_grads: non-finite loss");
    }
    for (std::size_t b = 0; b < B; ++b) {
        const Vec p = softmax_row(cache.logits, b);
        for (std::size_t c = 0; c < cache.logits.cols; ++c) {
            dlogits(b, c) = p[c] / static_cast<double>(B);
        }
        dlogits(b, static_cast<std::size_t>(batch.labels[b])) -= 1.0 / static_cast<double>(B);
    }
    Gradients g = backward(state, gates, batch, cache, dlogits);
    out.param_grads = std::move(g.params);
    out.mask_grads = std::move(g.masks);
    return out;
}

inline Vec ones_gates(const ModelConfig& cfg) {
    return Vec(static_cast<std::size_t>(cfg.module_count()), 1.0);
}

}  // namespace mape
