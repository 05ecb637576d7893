#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mape/config.hpp"
#include "mape/linalg.hpp"
#include "mape/mask.hpp"
#include "mape/rng.hpp"

namespace mape {

// All projections use the row-vector convention y = x * W + b, W of shape
// (in, out). Head h therefore owns columns [h*dh, (h+1)*dh) of wq/wk/wv and
// rows [h*dh, (h+1)*dh) of wo. Filter f owns column f of w1, entry f of b1
// and row f of w2. That slice mapping is the contract apply_masked_delta and
// the diff-census tests rely on.
struct LayerParams {
    Vec ln1_g, ln1_b;
    Mat wq, wk, wv, wo;
    Vec bq, bk, bv, bo;
    Vec ln2_g, ln2_b;
    Mat w1;
    Vec b1;
    Mat w2;
    Vec b2;
};

struct ModelState {
    ModelConfig config;
    Mat tok_emb;  // (vocab, d_model)
    Mat pos_emb;  // (max_seq_len, d_model)
    std::vector<LayerParams> layers;
    Vec lnf_g, lnf_b;
    Mat head_w;  // (d_model, num_classes)
    Vec head_b;
};

namespace detail {

template <typename State, typename F>
void for_each_array(State& s, F&& f) {
    f(s.tok_emb.data);
    f(s.pos_emb.data);
    for (auto& layer : s.layers) {
        f(layer.ln1_g);
        f(layer.ln1_b);
        f(layer.wq.data);
        f(layer.bq);
        f(layer.wk.data);
        f(layer.bk);
        f(layer.wv.data);
        f(layer.bv);
        f(layer.wo.data);
        f(layer.bo);
        f(layer.ln2_g);
        f(layer.ln2_b);
        f(layer.w1.data);
        f(layer.b1);
        f(layer.w2.data);
        f(layer.b2);
    }
    f(s.lnf_g);
    f(s.lnf_b);
    f(s.head_w.data);
    f(s.head_b);
}

}  // namespace detail

inline ModelState zeros_like_config(const ModelConfig& cfg) {
    cfg.validate();
    ModelState s;
    s.config = cfg;
    s.tok_emb = Mat(static_cast<std::size_t>(cfg.vocab_size), static_cast<std::size_t>(cfg.d_model));
    s.pos_emb = Mat(static_cast<std::size_t>(cfg.max_seq_len), static_cast<std::size_t>(cfg.d_model));
    s.layers.resize(static_cast<std::size_t>(cfg.num_layers));
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto ff = static_cast<std::size_t>(cfg.d_ff);
    for (auto& layer : s.layers) {
        layer.ln1_g.assign(d, 0.0);
        layer.ln1_b.assign(d, 0.0);
        layer.wq = Mat(d, d);
        layer.wk = Mat(d, d);
        layer.wv = Mat(d, d);
        layer.wo = Mat(d, d);
        layer.bq.assign(d, 0.0);
        layer.bk.assign(d, 0.0);
        layer.bv.assign(d, 0.0);
        layer.bo.assign(d, 0.0);
        layer.ln2_g.assign(d, 0.0);
        layer.ln2_b.assign(d, 0.0);
        layer.w1 = Mat(d, ff);
        layer.b1.assign(ff, 0.0);
        layer.w2 = Mat(ff, d);
        layer.b2.assign(d, 0.0);
    }
    s.lnf_g.assign(d, 0.0);
    s.lnf_b.assign(d, 0.0);
    s.head_w = Mat(d, static_cast<std::size_t>(cfg.num_classes));
    s.head_b.assign(static_cast<std::size_t>(cfg.num_classes), 0.0);
    return s;
}

inline ModelState zeros_like(const ModelState& s) { return zeros_like_config(s.config); }

inline ModelState init_model(const ModelConfig& cfg) {
    ModelState s = zeros_like_config(cfg);
    Rng rng(cfg.seed);
    const double weight_std = 0.08;
    auto fill_normal = [&](Vec& v) {
        for (auto& x : v) {
            x = rng.normal(0.0, weight_std);
        }
    };
    fill_normal(s.tok_emb.data);
    fill_normal(s.pos_emb.data);
    for (auto& layer : s.layers) {
        layer.ln1_g.assign(layer.ln1_g.size(), 1.0);
        fill_normal(layer.wq.data);
        fill_normal(layer.wk.data);
        fill_normal(layer.wv.data);
        fill_normal(layer.wo.data);
        layer.ln2_g.assign(layer.ln2_g.size(), 1.0);
        fill_normal(layer.w1.data);
        fill_normal(layer.w2.data);
    }
    s.lnf_g.assign(s.lnf_g.size(), 1.0);
    fill_normal(s.head_w.data);
    return s;
}

inline std::size_t param_count(const ModelState& s) {
    std::size_t n = 0;
    detail::for_each_array(s, [&](const Vec& v) { n += v.size(); });
    return n;
}

// a += c * b, elementwise over every parameter array.
inline void add_scaled(ModelState& a, const ModelState& b, double c) {
    std::vector<Vec*> dst;
    std::vector<const Vec*> src;
    detail::for_each_array(a, [&](Vec& v) { dst.push_back(&v); });
    detail::for_each_array(b, [&](const Vec& v) { src.push_back(&v); });
    for (std::size_t i = 0; i < dst.size(); ++i) {
        axpy(*dst[i], c, *src[i]);
    }
}

template <typename F>
void transform_params(ModelState& a, F&& f) {
    detail::for_each_array(a, [&](Vec& v) {
        for (auto& x : v) {
            x = f(x);
        }
    });
}

// Zips the parameter arrays of two same-shaped states.
template <typename F>
void zip_params(ModelState& a, const ModelState& b, F&& f) {
    std::vector<Vec*> dst;
    std::vector<const Vec*> src;
    detail::for_each_array(a, [&](Vec& v) { dst.push_back(&v); });
    detail::for_each_array(b, [&](const Vec& v) { src.push_back(&v); });
    for (std::size_t i = 0; i < dst.size(); ++i) {
        Vec& d = *dst[i];
        const Vec& s = *src[i];
        if (d.size() != s.size()) {
            throw std::invalid_argument("zip_params: shape mismatch");
        }
        for (std::size_t j = 0; j < d.size(); ++j) {
            f(d[j], s[j]);
        }
    }
}

template <typename F>
void zip_params_const(const ModelState& a, const ModelState& b, F&& f) {
    std::vector<const Vec*> pa;
    std::vector<const Vec*> pb;
    detail::for_each_array(a, [&](const Vec& v) { pa.push_back(&v); });
    detail::for_each_array(b, [&](const Vec& v) { pb.push_back(&v); });
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const Vec& x = *pa[i];
        const Vec& y = *pb[i];
        if (x.size() != y.size()) {
            throw std::invalid_argument("zip_params_const: shape mismatch");
        }
        for (std::size_t j = 0; j < x.size(); ++j) {
            f(x[j], y[j]);
        }
    }
}

// ---------------------------------------------------------------------------
// Module parameter slices.
// ---------------------------------------------------------------------------

namespace detail {

template <typename State, typename F>
void visit_head_params(State& s, int layer, int head, F&& f) {
    auto& lp = s.layers[static_cast<std::size_t>(layer)];
    const int dh = s.config.head_dim();
    const int d = s.config.d_model;
    const int c0 = head * dh;
    // wq/wk/wv column blocks; attention biases stay outside the module slice.
    for (int r = 0; r < d; ++r) {
        for (int c = c0; c < c0 + dh; ++c) {
            f(lp.wq.data[static_cast<std::size_t>(r) * d + c]);
        }
    }
    for (int r = 0; r < d; ++r) {
        for (int c = c0; c < c0 + dh; ++c) {
            f(lp.wk.data[static_cast<std::size_t>(r) * d + c]);
        }
    }
    for (int r = 0; r < d; ++r) {
        for (int c = c0; c < c0 + dh; ++c) {
            f(lp.wv.data[static_cast<std::size_t>(r) * d + c]);
        }
    }
    // wo row block.
    for (int r = c0; r < c0 + dh; ++r) {
        for (int c = 0; c < d; ++c) {
            f(lp.wo.data[static_cast<std::size_t>(r) * d + c]);
        }
    }
}

template <typename State, typename F>
void visit_filter_params(State& s, int layer, int filter, F&& f) {
    auto& lp = s.layers[static_cast<std::size_t>(layer)];
    const int d = s.config.d_model;
    const int ff = s.config.d_ff;
    for (int r = 0; r < d; ++r) {
        f(lp.w1.data[static_cast<std::size_t>(r) * ff + filter]);
    }
    f(lp.b1[static_cast<std::size_t>(filter)]);
    for (int c = 0; c < d; ++c) {
        f(lp.w2.data[static_cast<std::size_t>(filter) * d + c]);
    }
}

template <typename State, typename F>
void visit_module_params(State& s, int module_idx, F&& f) {
    const int per_layer = s.config.modules_per_layer();
    const int layer = module_idx / per_layer;
    const int within = module_idx % per_layer;
    if (within < s.config.num_heads) {
        visit_head_params(s, layer, within, f);
    } else {
        visit_filter_params(s, layer, within - s.config.num_heads, f);
    }
}

}  // namespace detail

inline std::vector<double*> module_param_ptrs(ModelState& s, int module_idx) {
    std::vector<double*> ptrs;
    detail::visit_module_params(s, module_idx, [&](double& v) { ptrs.push_back(&v); });
    return ptrs;
}

inline std::vector<const double*> module_param_ptrs(const ModelState& s, int module_idx) {
    std::vector<const double*> ptrs;
    detail::visit_module_params(s, module_idx, [&](const double& v) { ptrs.push_back(&v); });
    return ptrs;
}

inline std::size_t module_param_size(const ModelConfig& cfg, int module_idx) {
    const int within = module_idx % cfg.modules_per_layer();
    if (within < cfg.num_heads) {
        return 4u * static_cast<std::size_t>(cfg.d_model) * cfg.head_dim();
    }
    return 2u * static_cast<std::size_t>(cfg.d_model) + 1u;
}

inline std::size_t total_module_param_count(const ModelConfig& cfg) {
    std::size_t n = 0;
    for (int i = 0; i < cfg.module_count(); ++i) {
        n += module_param_size(cfg, i);
    }
    return n;
}

// Adds delta to the parameters correlated with active modules only. Frozen
// modules and non-module parameters (embeddings, layer norms, attention
// biases, classifier head) come back bit-identical.
inline ModelState apply_masked_delta(const ModelState& state, const MaskPair& mask,
                                     const ModelState& delta) {
    mask.validate_against(state.config);
    if (!(delta.config == state.config)) {
        throw std::invalid_argument("apply_masked_delta: delta shape mismatch");
    }
    ModelState out = state;
    for (int idx = 0; idx < state.config.module_count(); ++idx) {
        if (!mask.module(idx)) {
            continue;
        }
        const auto dst = module_param_ptrs(out, idx);
        const auto src = module_param_ptrs(delta, idx);
        for (std::size_t i = 0; i < dst.size(); ++i) {
            *dst[i] += *src[i];
        }
    }
    return out;
}

// Bitwise census of parameter entries that differ between two states,
// reported for module-correlated entries and everything else separately.
struct DiffCensus {
    std::size_t changed_module_params = 0;
    std::size_t total_module_params = 0;
    std::size_t changed_other_params = 0;
    std::size_t total_other_params = 0;

    double changed_fraction() const {
        const std::size_t total = total_module_params + total_other_params;
        if (total == 0) {
            return 0.0;
        }
        return static_cast<double>(changed_module_params + changed_other_params) /
               static_cast<double>(total);
    }
};

inline DiffCensus diff_census(const ModelState& a, const ModelState& b) {
    DiffCensus census;
    std::size_t changed_total = 0;
    zip_params_const(a, b, [&](double x, double y) {
        if (std::memcmp(&x, &y, sizeof(double)) != 0) {
            ++changed_total;
        }
    });
    const std::size_t total = param_count(a);
    census.total_module_params = total_module_param_count(a.config);
    census.total_other_params = total - census.total_module_params;
    std::size_t changed_module = 0;
    ModelState& am = const_cast<ModelState&>(a);
    ModelState& bm = const_cast<ModelState&>(b);
    for (int idx = 0; idx < a.config.module_count(); ++idx) {
        const auto pa = module_param_ptrs(am, idx);
        const auto pb = module_param_ptrs(bm, idx);
        for (std::size_t i = 0; i < pa.size(); ++i) {
            if (std::memcmp(pa[i], pb[i], sizeof(double)) != 0) {
                ++changed_module;
            }
        }
    }
    census.changed_module_params = changed_module;
    census.changed_other_params = changed_total - changed_module;
    return census;
}

// Set of module indices whose parameter slices contain any bitwise change.
inline std::vector<int> changed_modules(const ModelState& a, const ModelState& b) {
    std::vector<int> out;
    ModelState& am = const_cast<ModelState&>(a);
    ModelState& bm = const_cast<ModelState&>(b);
    for (int idx = 0; idx < a.config.module_count(); ++idx) {
        const auto pa = module_param_ptrs(am, idx);
        const auto pb = module_param_ptrs(bm, idx);
        for (std::size_t i = 0; i < pa.size(); ++i) {
            if (std::memcmp(pa[i], pb[i], sizeof(double)) != 0) {
                out.push_back(idx);
                break;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Versioned binary serialization: "MAPE" magic, format version, ModelConfig,
// then every parameter array row-major as 64-bit little-endian doubles in the
// for_each_array field order.
// ---------------------------------------------------------------------------

namespace detail {

constexpr std::uint32_t kModelFormatVersion = 1;

inline void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_i32(std::ostream& out, std::int32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
inline std::int32_t read_i32(std::istream& in) {
    std::int32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
inline std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

}  // namespace detail

inline void save_model(const ModelState& s, std::ostream& out) {
    out.write("MAPE", 4);
    detail::write_u32(out, detail::kModelFormatVersion);
    detail::write_i32(out, s.config.num_layers);
    detail::write_i32(out, s.config.num_heads);
    detail::write_i32(out, s.config.d_model);
    detail::write_i32(out, s.config.d_ff);
    detail::write_i32(out, s.config.vocab_size);
    detail::write_i32(out, s.config.num_classes);
    detail::write_i32(out, s.config.max_seq_len);
    detail::write_u64(out, s.config.seed);
    detail::for_each_array(s, [&](const Vec& v) {
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(double)));
    });
    if (!out) {
        throw std::runtime_error("save_model: write failed");
    }
}

inline void save_model(const ModelState& s, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("save_model: cannot open " + path);
    }
    save_model(s, out);
}

inline ModelState load_model(std::istream& in) {
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MAPE", 4) != 0) {
        throw std::runtime_error("load_model: bad magic");
    }
    const std::uint32_t version = detail::read_u32(in);
    if (version != detail::kModelFormatVersion) {
        throw std::runtime_error("load_model: unsupported format version");
    }
    ModelConfig cfg;
    cfg.num_layers = detail::read_i32(in);
    cfg.num_heads = detail::read_i32(in);
    cfg.d_model = detail::read_i32(in);
    cfg.d_ff = detail::read_i32(in);
    cfg.vocab_size = detail::read_i32(in);
    cfg.num_classes = detail::read_i32(in);
    cfg.max_seq_len = detail::read_i32(in);
    cfg.seed = detail::read_u64(in);
    ModelState s = zeros_like_config(cfg);
    detail::for_each_array(s, [&](Vec& v) {
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(double)));
    });
    if (!in) {
        throw std::runtime_error("load_model: truncated file");
    }
    return s;
}

inline ModelState load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("load_model: cannot open " + path);
    }
    return load_model(in);
}

inline bool bit_identical(const ModelState& a, const ModelState& b) {
    bool same = a.config == b.config;
    if (!same) {
        return false;
    }
    zip_params_const(a, b, [&](double x, double y) {
        if (std::memcmp(&x, &y, sizeof(double)) != 0) {
            same = false;
        }
    });
    return same;
}

}  // namespace mape
