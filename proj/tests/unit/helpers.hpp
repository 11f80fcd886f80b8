#pragma once

#include <vector>

#include "fedbe/nn.hpp"
#include "fedbe/rng.hpp"

namespace fedbe::test {

inline nn::TokenBatch random_batch(const nn::ModelSpec& spec, std::size_t batch_size,
                                   std::size_t seq_len, std::uint64_t seed) {
    Rng rng(seed);
    nn::TokenBatch b;
    b.batch_size = batch_size;
    b.seq_len = seq_len;
    for (std::size_t i = 0; i < batch_size * seq_len; ++i) {
        b.tokens.push_back(static_cast<std::int32_t>(rng.bounded(spec.vocab_size)));
    }
    return b;
}

inline std::vector<int> random_labels(const nn::ModelSpec& spec, std::size_t n,
                                      std::uint64_t seed) {
    Rng rng(seed);
    std::vector<int> labels(n);
    for (int& l : labels) l = static_cast<int>(rng.bounded(spec.num_classes));
    return labels;
}

template <typename ModelT>
bool params_bitwise_equal(const ModelT& a, const ModelT& b) {
    std::vector<const Tensor*> ta, tb;
    nn::for_each_param(a, [&](const std::string&, const Tensor& t) { ta.push_back(&t); });
    nn::for_each_param(b, [&](const std::string&, const Tensor& t) { tb.push_back(&t); });
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (ta[i]->shape != tb[i]->shape) return false;
        for (std::size_t j = 0; j < ta[i]->data.size(); ++j) {
            if (ta[i]->data[j] != tb[i]->data[j]) return false;
        }
    }
    return true;
}

// embeddings + blocks only (heads excluded)
inline bool backbone_bitwise_equal(const nn::BaseModel& a, const nn::BaseModel& b) {
    nn::BaseModel a2 = a, b2 = b;
    a2.heads.clear();
    b2.heads.clear();
    return params_bitwise_equal(a2, b2);
}

inline bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        if (a.data[i] != b.data[i]) return false;
    }
    return true;
}

} // namespace fedbe::test
