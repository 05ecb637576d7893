#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mape/config.hpp"
#include "mape/linalg.hpp"

namespace mape {

// Binary module mask over attention heads and FFN filters. 1 = the module's
// correlated parameters may be updated during unlearning, 0 = frozen.
struct MaskPair {
    int num_layers = 0;
    int num_heads = 0;
    int d_ff = 0;
    std::vector<std::uint8_t> head_mask;    // num_layers * num_heads
    std::vector<std::uint8_t> filter_mask;  // num_layers * d_ff
    double sparsity = 0.0;

    int module_count() const { return num_layers * (num_heads + d_ff); }

    static MaskPair zeros(const ModelConfig& cfg, double sparsity) {
        MaskPair m;
        m.num_layers = cfg.num_layers;
        m.num_heads = cfg.num_heads;
        m.d_ff = cfg.d_ff;
        m.head_mask.assign(static_cast<std::size_t>(cfg.num_layers) * cfg.num_heads, 0);
        m.filter_mask.assign(static_cast<std::size_t>(cfg.num_layers) * cfg.d_ff, 0);
        m.sparsity = sparsity;
        return m;
    }

    static MaskPair ones(const ModelConfig& cfg) {
        MaskPair m = zeros(cfg, 0.0);
        m.head_mask.assign(m.head_mask.size(), 1);
        m.filter_mask.assign(m.filter_mask.size(), 1);
        return m;
    }

    // Modules ordered layer-major, heads before filters within a layer.
    static MaskPair from_active_modules(const ModelConfig& cfg, double sparsity,
                                        const std::vector<int>& active) {
        MaskPair m = zeros(cfg, sparsity);
        for (const int idx : active) {
            m.set_module(idx, 1);
        }
        return m;
    }

    std::uint8_t module(int idx) const {
        const int per_layer = num_heads + d_ff;
        const int layer = idx / per_layer;
        const int within = idx % per_layer;
        if (within < num_heads) {
            return head_mask[static_cast<std::size_t>(layer) * num_heads + within];
        }
        return filter_mask[static_cast<std::size_t>(layer) * d_ff + (within - num_heads)];
    }

    void set_module(int idx, std::uint8_t value) {
        const int per_layer = num_heads + d_ff;
        const int layer = idx / per_layer;
        const int within = idx % per_layer;
        if (within < num_heads) {
            head_mask[static_cast<std::size_t>(layer) * num_heads + within] = value;
        } else {
            filter_mask[static_cast<std::size_t>(layer) * d_ff + (within - num_heads)] = value;
        }
    }

    int active_count() const {
        int n = 0;
        for (const auto v : head_mask) n += v;
        for (const auto v : filter_mask) n += v;
        return n;
    }

    // Gate vector for the forward pass, module order.
    Vec to_gates() const {
        Vec g(static_cast<std::size_t>(module_count()));
        for (int i = 0; i < module_count(); ++i) {
            g[static_cast<std::size_t>(i)] = static_cast<double>(module(i));
        }
        return g;
    }

    void validate_against(const ModelConfig& cfg) const {
        if (num_layers != cfg.num_layers || num_heads != cfg.num_heads || d_ff != cfg.d_ff) {
            throw std::invalid_argument("MaskPair: layout does not match ModelConfig");
        }
        const int budget = static_cast<int>(std::floor((1.0 - sparsity) * module_count()));
        if (active_count() > budget) {
            throw std::invalid_argument("MaskPair: active module count exceeds sparsity budget");
        }
    }
};

// Number of active modules implied by a sparsity level.
inline int sparsity_budget(double sparsity, int module_count) {
    if (sparsity < 0.0 || sparsity >= 1.0) {
        throw std::invalid_argument("sparsity must lie in [0, 1)");
    }
    return static_cast<int>(std::floor((1.0 - sparsity) * module_count));
}

inline std::string mask_to_text(const MaskPair& mask, const std::string& sense) {
    std::ostringstream out;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", mask.sparsity);
    out << "# mask n=" << mask.module_count() << " S=" << buf << " sense=" << sense << "\n";
    for (int l = 0; l < mask.num_layers; ++l) {
        out << "L" << l << " H:";
        for (int h = 0; h < mask.num_heads; ++h) {
            out << static_cast<int>(mask.head_mask[static_cast<std::size_t>(l) * mask.num_heads + h]);
        }
        out << " F:";
        for (int f = 0; f < mask.d_ff; ++f) {
            out << static_cast<int>(mask.filter_mask[static_cast<std::size_t>(l) * mask.d_ff + f]);
        }
        out << "\n";
    }
    return out.str();
}

struct LoadedMask {
    MaskPair mask;
    std::string sense;
};

inline LoadedMask mask_from_text(std::istream& in) {
    std::string header;
    if (!std::getline(in, header)) {
        throw std::runtime_error("mask_from_text: empty input");
    }
    LoadedMask result;
    {
        std::istringstream hs(header);
        std::string tok;
        while (hs >> tok) {
            if (tok.rfind("S=", 0) == 0) {
                result.mask.sparsity = std::stod(tok.substr(2));
            } else if (tok.rfind("sense=", 0) == 0) {
                result.sense = tok.substr(6);
            }
        }
    }
    std::string line;
    std::vector<std::string> head_bits;
    std::vector<std::string> filter_bits;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream ls(line);
        std::string label, hfield, ffield;
        ls >> label >> hfield >> ffield;
        if (label.empty() || label[0] != 'L' || hfield.rfind("H:", 0) != 0 ||
            ffield.rfind("F:", 0) != 0) {
            throw std::runtime_error("mask_from_text: malformed layer line: " + line);
        }
        head_bits.push_back(hfield.substr(2));
        filter_bits.push_back(ffield.substr(2));
    }
    if (head_bits.empty()) {
        throw std::runtime_error("mask_from_text: no layer lines");
    }
    MaskPair& m = result.mask;
    m.num_layers = static_cast<int>(head_bits.size());
    m.num_heads = static_cast<int>(head_bits[0].size());
    m.d_ff = static_cast<int>(filter_bits[0].size());
    for (int l = 0; l < m.num_layers; ++l) {
        if (static_cast<int>(head_bits[l].size()) != m.num_heads ||
            static_cast<int>(filter_bits[l].size()) != m.d_ff) {
            throw std::runtime_error("mask_from_text: inconsistent layer widths");
        }
        for (const char c : head_bits[l]) {
            if (c != '0' && c != '1') throw std::runtime_error("mask_from_text: bad bit");
            m.head_mask.push_back(static_cast<std::uint8_t>(c - '0'));
        }
        for (const char c : filter_bits[l]) {
            if (c != '0' && c != '1') throw std::runtime_error("mask_from_text: bad bit");
            m.filter_mask.push_back(static_cast<std::uint8_t>(c - '0'));
        }
    }
    return result;
}

inline void save_mask(const MaskPair& mask, const std::string& sense, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("save_mask: cannot open " + path);
    }
    out << mask_to_text(mask, sense);
}

inline LoadedMask load_mask(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("load_mask: cannot open " + path);
    }
    return mask_from_text(in);
}

}  // namespace mape
