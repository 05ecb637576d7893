#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mape/data.hpp"
#include "mape/forward.hpp"
#include "mape/linalg.hpp"
#include "mape/model.hpp"

namespace mape {
namespace fisher {

// Empirical Fisher information at the current parameters: elementwise means
// of squared per-sample gradients, plus per-layer dense blocks over module
// coordinates (heads then filters).
struct FisherStats {
    ModelState param_diag;        // optional; empty layers when not computed
    Vec mask_diag;                // module order
    std::vector<Mat> mask_blocks; // one (heads+filters)^2 block per layer
    std::size_t sample_count = 0;
};

// Per-sample parameter gradient; samples are visited in split order so the
// accumulation is bit-reproducible.
template <typename F>
void for_each_sample_grads(const ModelState& state, const Split& data, F&& f) {
    if (data.empty()) {
        throw std::invalid_argument("fisher: empty data split");
    }
    const Vec gates = ones_gates(state.config);
    for (const Sample& s : data) {
        const Batch one = Batch::from_sample(s);
        LossGrads lg = loss_and_grads(state, gates, one);
        f(lg);
    }
}

inline ModelState diag_fim_params(const ModelState& state, const Split& data) {
    ModelState acc = zeros_like(state);
    for_each_sample_grads(state, data, [&](const LossGrads& lg) {
        zip_params(acc, lg.param_grads, [](double& a, double g) { a += g * g; });
    });
    const double inv_n = 1.0 / static_cast<double>(data.size());
    transform_params(acc, [&](double v) { return v * inv_n; });
    return acc;
}

inline Vec diag_fim_masks(const ModelState& state, const Split& data) {
    Vec acc(static_cast<std::size_t>(state.config.module_count()), 0.0);
    for_each_sample_grads(state, data, [&](const LossGrads& lg) {
        for (std::size_t i = 0; i < acc.size(); ++i) {
            acc[i] += lg.mask_grads.values[i] * lg.mask_grads.values[i];
        }
    });
    const double inv_n = 1.0 / static_cast<double>(data.size());
    for (auto& v : acc) {
        v *= inv_n;
    }
    return acc;
}

inline std::vector<Mat> block_fim_masks(const ModelState& state, const Split& data) {
    const ModelConfig& cfg = state.config;
    const auto per_layer = static_cast<std::size_t>(cfg.modules_per_layer());
    std::vector<Mat> blocks(static_cast<std::size_t>(cfg.num_layers), Mat(per_layer, per_layer));
    for_each_sample_grads(state, data, [&](const LossGrads& lg) {
        for (int l = 0; l < cfg.num_layers; ++l) {
            Mat& block = blocks[static_cast<std::size_t>(l)];
            const std::size_t base = static_cast<std::size_t>(l) * per_layer;
            for (std::size_t i = 0; i < per_layer; ++i) {
                const double gi = lg.mask_grads.values[base + i];
                for (std::size_t j = 0; j < per_layer; ++j) {
                    block(i, j) += gi * lg.mask_grads.values[base + j];
                }
            }
        }
    });
    const double inv_n = 1.0 / static_cast<double>(data.size());
    for (auto& block : blocks) {
        for (auto& v : block.data) {
            v *= inv_n;
        }
    }
    return blocks;
}

// Summed (not averaged) mask gradient over the forget split at unit gates.
inline Vec forget_mask_gradient(const ModelState& state, const Split& forget) {
    Vec acc(static_cast<std::size_t>(state.config.module_count()), 0.0);
    for_each_sample_grads(state, forget, [&](const LossGrads& lg) {
        for (std::size_t i = 0; i < acc.size(); ++i) {
            acc[i] += lg.mask_grads.values[i];
        }
    });
    return acc;
}

// Summed parameter gradient over the forget split.
inline ModelState forget_param_gradient(const ModelState& state, const Split& forget) {
    ModelState acc = zeros_like(state);
    for_each_sample_grads(state, forget, [&](const LossGrads& lg) {
        add_scaled(acc, lg.param_grads, 1.0);
    });
    return acc;
}

inline FisherStats compute_mask_stats(const ModelState& state, const Split& data) {
    FisherStats stats;
    stats.mask_diag = diag_fim_masks(state, data);
    stats.mask_blocks = block_fim_masks(state, data);
    stats.sample_count = data.size();
    return stats;
}

inline Vec block_diagonal(const std::vector<Mat>& blocks) {
    Vec diag;
    for (const Mat& b : blocks) {
        for (std::size_t i = 0; i < b.rows; ++i) {
            diag.push_back(b(i, i));
        }
    }
    return diag;
}

// Binary dump of mask-space Fisher statistics: magic, layer count, block
// dimension, sample count, then mask_diag followed by each layer block
// row-major, all 64-bit little-endian, module coordinates ordered
// heads-then-filters layer-major.
inline void save_fisher(const FisherStats& stats, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("save_fisher: cannot open " + path);
    }
    out.write("MFIS", 4);
    const std::uint32_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t layers = stats.mask_blocks.size();
    const std::uint64_t dim = stats.mask_blocks.empty() ? 0 : stats.mask_blocks[0].rows;
    const std::uint64_t samples = stats.sample_count;
    out.write(reinterpret_cast<const char*>(&layers), sizeof(layers));
    out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
    out.write(reinterpret_cast<const char*>(&samples), sizeof(samples));
    out.write(reinterpret_cast<const char*>(stats.mask_diag.data()),
              static_cast<std::streamsize>(stats.mask_diag.size() * sizeof(double)));
    for (const Mat& b : stats.mask_blocks) {
        out.write(reinterpret_cast<const char*>(b.data.data()),
                  static_cast<std::streamsize>(b.data.size() * sizeof(double)));
    }
    if (!out) {
        throw std::runtime_error("save_fisher: write failed");
    }
}

inline FisherStats load_fisher(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("load_fisher: cannot open " + path);
    }
    char magic[4] = {};
    in.read(magic, 4);
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (!in || std::string(magic, 4) != "MFIS" || version != 1) {
        throw std::runtime_error("load_fisher: bad header");
    }
    std::uint64_t layers = 0, dim = 0, samples = 0;
    in.read(reinterpret_cast<char*>(&layers), sizeof(layers));
    in.read(reinterpret_cast<char*>(&dim), sizeof(dim));
    in.read(reinterpret_cast<char*>(&samples), sizeof(samples));
    FisherStats stats;
    stats.sample_count = samples;
    stats.mask_diag.assign(layers * dim, 0.0);
    in.read(reinterpret_cast<char*>(stats.mask_diag.data()),
            static_cast<std::streamsize>(stats.mask_diag.size() * sizeof(double)));
    for (std::uint64_t l = 0; l < layers; ++l) {
        Mat b(dim, dim);
        in.read(reinterpret_cast<char*>(b.data.data()),
                static_cast<std::streamsize>(b.data.size() * sizeof(double)));
        stats.mask_blocks.push_back(std::move(b));
    }
    if (!in) {
        throw std::runtime_error("load_fisher: truncated file");
    }
    return stats;
}

}  // namespace fisher
}  // namespace mape
