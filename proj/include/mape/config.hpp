#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mape {

// Architecture of the gated toy transformer classifier. The last class index
// is reserved as the REJECT class and never receives natural samples.
struct ModelConfig {
    int num_layers = 2;
    int num_heads = 4;
    int d_model = 32;
    int d_ff = 64;
    int vocab_size = 32;
    int num_classes = 4;
    int max_seq_len = 16;
    std::uint64_t seed = 1;

    int head_dim() const { return d_model / num_heads; }
    int reject_class() const { return num_classes - 1; }

    // Modules are attention heads and FFN filters, laid out layer-major with
    // heads before filters inside each layer.
    int modules_per_layer() const { return num_heads + d_ff; }
    int module_count() const { return num_layers * modules_per_layer(); }

    int head_module_index(int layer, int head) const {
        return layer * modules_per_layer() + head;
    }
    int filter_module_index(int layer, int filter) const {
        return layer * modules_per_layer() + num_heads + filter;
    }

    void validate() const {
        if (num_layers < 1 || num_heads < 1 || d_model < 1 || d_ff < 1 ||
            vocab_size < 1 || max_seq_len < 1) {
            throw std::invalid_argument("ModelConfig: all counts must be >= 1");
        }
        if (d_model % num_heads != 0) {
            throw std::invalid_argument("ModelConfig: d_model must be divisible by num_heads");
        }
        if (num_classes < 3) {
            throw std::invalid_argument(
                "ModelConfig: num_classes must be >= 3 (two content classes plus REJECT)");
        }
    }

    bool operator==(const ModelConfig& o) const {
        return num_layers == o.num_layers && num_heads == o.num_heads && d_model == o.d_model &&
               d_ff == o.d_ff && vocab_size == o.vocab_size && num_classes == o.num_classes &&
               max_seq_len == o.max_seq_len && seed == o.seed;
    }
};

}  // namespace mape
