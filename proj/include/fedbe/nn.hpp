#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fedbe/datagen.hpp"
#include "fedbe/tensor.hpp"

namespace fedbe::nn {

struct ModelSpec {
    std::size_t num_blocks = 0;   // L
    std::size_t hidden_dim = 0;   // d
    std::size_t num_heads = 0;
    std::size_t ff_dim = 0;       // d_ff
    std::size_t vocab_size = 0;   // V
    std::size_t max_seq_len = 0;  // T_max
    std::size_t num_classes = 0;  // K

    std::size_t head_dim() const { return hidden_dim / num_heads; }
    void validate() const;  // throws ConfigError on any dimension violation
    bool operator==(const ModelSpec&) const = default;
};

// One transformer block: attention projections, feed-forward, two layer norms.
// Doubles as the per-block gradient holder (same shapes).
struct BlockParams {
    Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    Tensor w_ff1, b_ff1, w_ff2, b_ff2;
    Tensor ln1_gain, ln1_shift, ln2_gain, ln2_shift;

    static BlockParams zeros(const ModelSpec& spec);
    std::size_t param_count() const;
};

struct HeadParams {
    Tensor weight;  // d x K
    Tensor bias;    // K

    static HeadParams zeros(const ModelSpec& spec);
};

// Frozen-able pre-trained backbone plus one classifier head per task.
struct BaseModel {
    ModelSpec spec;
    Tensor tok_embedding;  // V x d
    Tensor pos_embedding;  // T_max x d
    std::vector<BlockParams> blocks;
    std::map<std::string, HeadParams> heads;
};

// Gradients, shape-congruent with the parameters they were computed from.
// `expanded` is populated only when backprop ran through an expanded model.
struct GradientSet {
    Tensor tok_embedding;
    Tensor pos_embedding;
    std::vector<BlockParams> blocks;
    std::map<int, BlockParams> expanded;  // keyed by 1-based position
    std::map<std::string, HeadParams> heads;
};

// Per-tensor-group trainability. Anything not marked trainable stays bitwise
// untouched by apply_sgd.
struct TrainableMask {
    bool embeddings = false;
    std::vector<bool> blocks;     // one flag per base block
    std::set<int> expanded;       // trainable expanded positions (1-based)
    std::set<std::string> heads;  // trainable classifier heads

    static TrainableMask none(const ModelSpec& spec);
    // embeddings + all base blocks + the given head
    static TrainableMask full(const ModelSpec& spec, const std::string& task);
    static TrainableMask head_only(const ModelSpec& spec, const std::string& task);
};

struct TokenBatch {
    std::size_t batch_size = 0;
    std::size_t seq_len = 0;
    std::vector<std::int32_t> tokens;  // B*T row-major

    std::int32_t tok(std::size_t b, std::size_t t) const { return tokens[b * seq_len + t]; }

    static TokenBatch from_examples(const std::vector<datagen::Example>& examples,
                                    const std::vector<std::size_t>& indices);
};

// Cached activations for one block's residual branch.
struct BlockCache {
    std::size_t seq_len = 0;
    Tensor x_in;                      // branch input, (B*T) x d
    Tensor ln1_xhat;                  // normalized input
    std::vector<double> ln1_inv_std;  // per row
    Tensor q, k, v;                   // (B*T) x d
    Tensor attn_probs;                // (B*H*T) x T
    Tensor attn_ctx;                  // (B*T) x d, heads concatenated, pre-W_o
    Tensor h;                         // x_in + attention output
    Tensor ln2_xhat;
    std::vector<double> ln2_inv_std;
    Tensor ff_pre;                    // (B*T) x d_ff
    Tensor ff_act;                    // gelu(ff_pre)
};

struct ForwardCache {
    TokenBatch batch;
    std::string task;
    Tensor x0;                          // embedding output
    std::vector<BlockCache> blocks;     // one per base block
    std::map<int, BlockCache> expanded; // expanded-branch caches (1-based position)
    Tensor x_final;
    Tensor pooled;  // B x d
};

// All weights uniform in [-1/sqrt(d), 1/sqrt(d)] from the seeded init stream;
// layer-norm gains 1, shifts 0. Bit-identical for identical (spec, seed).
BaseModel init_model(const ModelSpec& spec, std::uint64_t seed,
                     const std::vector<std::string>& tasks = {"G", "D"});

// Pre-layer-norm transformer: per block x <- x + Attn(LN1(x)), then
// x <- x + FF(LN2(x)); mean-pool over positions; logits = pooled * head.
Tensor forward(const BaseModel& model, const TokenBatch& batch, const std::string& task,
               ForwardCache* cache = nullptr);

// Numerically stable row softmax.
Tensor softmax_rows(const Tensor& logits);

struct LossAndGrads {
    double loss = 0.0;
    GradientSet grads;
};

// Mean cross-entropy of softmax(logits) against labels, plus the exact
// reverse-mode gradient for every parameter.
LossAndGrads loss_and_backward(const BaseModel& model, const TokenBatch& batch,
                               const std::vector<int>& labels, const std::string& task);

// p <- p - lr * g for mask-trainable tensors; frozen tensors bitwise unchanged.
void apply_sgd(BaseModel& model, const GradientSet& grads, double lr,
               const TrainableMask& mask);

// Entry l: L2 norm over every gradient tensor of base block l.
std::vector<double> block_grad_norms(const GradientSet& grads);

// Central-difference check over a deterministic sample of >= 200 parameters
// spanning every parameter group. Returns the max relative error against the
// analytic gradients (relative to max(|analytic|, |numeric|, 1e-3)).
double finite_diff_oracle(const BaseModel& model, const TokenBatch& batch,
                          const std::vector<int>& labels, const std::string& task,
                          double eps);

// Fraction of examples whose argmax logit matches the label; argmax ties go
// to the lowest class index.
double evaluate(const BaseModel& model, const datagen::LabeledDataset& dataset,
                const std::string& task);

std::size_t head_param_count(const ModelSpec& spec);
std::size_t block_param_count(const ModelSpec& spec);

// Fixed-order visitation of every parameter tensor. Used by init, SGD,
// finite differences, aggregation, and serialization, so the order is part of
// the determinism contract: embeddings, blocks 0..L-1, heads in task order.
// The visitor gets a stable string id like "block/2/w_q" or "head/D/weight".
template <typename Model, typename F>
void for_each_block_tensor(Model& b, F&& f) {
    f("w_q", b.w_q); f("b_q", b.b_q);
    f("w_k", b.w_k); f("b_k", b.b_k);
    f("w_v", b.w_v); f("b_v", b.b_v);
    f("w_o", b.w_o); f("b_o", b.b_o);
    f("w_ff1", b.w_ff1); f("b_ff1", b.b_ff1);
    f("w_ff2", b.w_ff2); f("b_ff2", b.b_ff2);
    f("ln1_gain", b.ln1_gain); f("ln1_shift", b.ln1_shift);
    f("ln2_gain", b.ln2_gain); f("ln2_shift", b.ln2_shift);
}

// Pairwise visitation of two block-shaped structs (params and grads, say).
template <typename A, typename B, typename F>
void zip_block_tensors(A& a, B& b, F&& f) {
    f(a.w_q, b.w_q); f(a.b_q, b.b_q);
    f(a.w_k, b.w_k); f(a.b_k, b.b_k);
    f(a.w_v, b.w_v); f(a.b_v, b.b_v);
    f(a.w_o, b.w_o); f(a.b_o, b.b_o);
    f(a.w_ff1, b.w_ff1); f(a.b_ff1, b.b_ff1);
    f(a.w_ff2, b.w_ff2); f(a.b_ff2, b.b_ff2);
    f(a.ln1_gain, b.ln1_gain); f(a.ln1_shift, b.ln1_shift);
    f(a.ln2_gain, b.ln2_gain); f(a.ln2_shift, b.ln2_shift);
}

template <typename Model, typename F>
void for_each_param(Model& m, F&& f) {
    f("emb/tok", m.tok_embedding);
    f("emb/pos", m.pos_embedding);
    for (std::size_t l = 0; l < m.blocks.size(); ++l) {
        for_each_block_tensor(m.blocks[l], [&](const char* name, auto& t) {
            f("block/" + std::to_string(l) + "/" + name, t);
        });
    }
    for (auto& [task, head] : m.heads) {
        f("head/" + task + "/weight", head.weight);
        f("head/" + task + "/bias", head.bias);
    }
}

} // namespace fedbe::nn
