#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mape/config.hpp"
#include "mape/rng.hpp"

namespace mape {

struct Sample {
    std::vector<std::int32_t> tokens;
    std::int32_t label = 0;
    std::int64_t id = -1;
};

using Split = std::vector<Sample>;

struct Batch {
    std::vector<std::int32_t> tokens;  // batch * seq_len, row-major
    std::vector<std::int32_t> labels;
    std::vector<std::int64_t> sample_ids;
    int seq_len = 0;

    int size() const { return static_cast<int>(labels.size()); }

    static Batch from_samples(const Split& samples, std::size_t begin, std::size_t end) {
        Batch b;
        if (begin >= end || end > samples.size()) {
            throw std::invalid_argument("Batch::from_samples: bad range");
        }
        b.seq_len = static_cast<int>(samples[begin].tokens.size());
        for (std::size_t i = begin; i < end; ++i) {
            const Sample& s = samples[i];
            if (static_cast<int>(s.tokens.size()) != b.seq_len) {
                throw std::invalid_argument("Batch::from_samples: ragged sequence lengths");
            }
            b.tokens.insert(b.tokens.end(), s.tokens.begin(), s.tokens.end());
            b.labels.push_back(s.label);
            b.sample_ids.push_back(s.id);
        }
        return b;
    }

    static Batch from_sample(const Sample& s) {
        Split one{s};
        return from_samples(one, 0, 1);
    }

    static Batch from_split(const Split& samples) {
        return from_samples(samples, 0, samples.size());
    }

    void validate_against(const ModelConfig& cfg) const {
        if (seq_len > cfg.max_seq_len) {
            throw std::invalid_argument("Batch: sequence longer than max_seq_len");
        }
        for (const auto t : tokens) {
            if (t < 0 || t >= cfg.vocab_size) {
                throw std::invalid_argument("Batch: token out of vocabulary");
            }
        }
        for (const auto l : labels) {
            if (l < 0 || l >= cfg.num_classes) {
                throw std::invalid_argument("Batch: label out of range");
            }
        }
    }
};

struct TaskParams {
    int num_train = 2000;
    int num_test = 500;
    int forget_count = 64;
    int seq_len = 16;
    int vocab_size = 32;
    int num_classes = 4;  // three content classes + REJECT
};

struct DatasetBundle {
    Split train;
    Split forget;
    Split retain;
    Split test;
    std::vector<std::int64_t> forget_ids;
    std::uint64_t seed = 0;
    TaskParams task;
};

// The label of a synthetic sequence is the single marker token it carries.
// Marker tokens are 0..num_classes-2 (one per content class); filler tokens
// are drawn from the rest of the vocabulary, so exactly one marker occurs
// per sequence. The REJECT class (last index) gets no natural samples.
inline int motif_label(const Sample& s, int num_classes) {
    int found = -1;
    for (const auto t : s.tokens) {
        if (t < num_classes - 1) {
            if (found != -1 && found != t) {
                return -1;  // ambiguous
            }
            found = t;
        }
    }
    return found;
}

inline DatasetBundle gen_synthetic(const TaskParams& task, std::uint64_t seed) {
    if (task.num_classes < 3) {
        throw std::invalid_argument("gen_synthetic: need at least two content classes plus REJECT");
    }
    const int content_classes = task.num_classes - 1;
    if (task.vocab_size <= content_classes) {
        throw std::invalid_argument("gen_synthetic: vocabulary too small for filler tokens");
    }
    if (task.forget_count < 0 || task.forget_count > task.num_train) {
        throw std::invalid_argument("gen_synthetic: forget_count out of range");
    }
    if (task.seq_len < 1 || task.num_train < 1 || task.num_test < 0) {
        throw std::invalid_argument("gen_synthetic: inconsistent sizes");
    }

    Rng rng(seed);
    std::set<std::vector<std::int32_t>> seen;
    auto draw_sample = [&](int cls, std::int64_t id) {
        Sample s;
        s.label = cls;
        s.id = id;
        while (true) {
            s.tokens.assign(static_cast<std::size_t>(task.seq_len), 0);
            for (auto& t : s.tokens) {
                t = content_classes +
                    static_cast<std::int32_t>(rng.below(
                        static_cast<std::uint64_t>(task.vocab_size - content_classes)));
            }
            const auto marker_pos = rng.below(static_cast<std::uint64_t>(task.seq_len));
            s.tokens[static_cast<std::size_t>(marker_pos)] = static_cast<std::int32_t>(cls);
            if (seen.insert(s.tokens).second) {
                return s;  // train/test disjoint by construction
            }
        }
    };

    DatasetBundle bundle;
    bundle.seed = seed;
    bundle.task = task;
    for (int i = 0; i < task.num_train; ++i) {
        bundle.train.push_back(draw_sample(i % content_classes, i));
    }
    for (int i = 0; i < task.num_test; ++i) {
        bundle.test.push_back(draw_sample(i % content_classes, task.num_train + i));
    }

    std::vector<std::int64_t> ids(static_cast<std::size_t>(task.num_train));
    for (int i = 0; i < task.num_train; ++i) {
        ids[static_cast<std::size_t>(i)] = i;
    }
    rng.shuffle(ids);
    ids.resize(static_cast<std::size_t>(task.forget_count));
    std::sort(ids.begin(), ids.end());
    bundle.forget_ids = ids;

    std::set<std::int64_t> forget_set(ids.begin(), ids.end());
    for (const Sample& s : bundle.train) {
        if (forget_set.count(s.id)) {
            bundle.forget.push_back(s);
        } else {
            bundle.retain.push_back(s);
        }
    }
    return bundle;
}

// Forget/retain partition induced by an explicit id set; throws on ids that
// do not exist in the training split.
inline void repartition(DatasetBundle& bundle, const std::vector<std::int64_t>& forget_ids) {
    std::set<std::int64_t> want(forget_ids.begin(), forget_ids.end());
    if (want.size() != forget_ids.size()) {
        throw std::invalid_argument("repartition: duplicate forget ids");
    }
    Split forget;
    Split retain;
    for (const Sample& s : bundle.train) {
        if (want.count(s.id)) {
            forget.push_back(s);
            want.erase(s.id);
        } else {
            retain.push_back(s);
        }
    }
    if (!want.empty()) {
        throw std::invalid_argument("repartition: unknown forget id");
    }
    bundle.forget = std::move(forget);
    bundle.retain = std::move(retain);
    bundle.forget_ids = forget_ids;
}

inline void assert_split_hygiene(const DatasetBundle& bundle) {
    std::set<std::int64_t> forget_ids;
    for (const auto& s : bundle.forget) forget_ids.insert(s.id);
    for (const auto& s : bundle.retain) {
        if (forget_ids.count(s.id)) {
            throw std::runtime_error("split hygiene: forget and retain overlap");
        }
    }
    if (bundle.forget.size() + bundle.retain.size() != bundle.train.size()) {
        throw std::runtime_error("split hygiene: forget and retain do not cover train");
    }
    std::set<std::vector<std::int32_t>> train_tokens;
    for (const auto& s : bundle.train) train_tokens.insert(s.tokens);
    for (const auto& s : bundle.test) {
        if (train_tokens.count(s.tokens)) {
            throw std::runtime_error("split hygiene: test sequence occurs in train");
        }
    }
}

}  // namespace mape
