#pragma once

// Block-level forward/backward primitives shared by the base-model path and
// the expanded-model path. One code path serves both: an expanded model with
// no active positions runs the exact arithmetic of the base model, which is
// what makes base-path evaluations bitwise-reproducible.

#include "fedbe/nn.hpp"

namespace fedbe::nn::detail {

// View of an expansion layered over a base model. Positions are 1-based.
struct ExpansionView {
    const std::map<int, BlockParams>* blocks = nullptr;
    const std::set<int>* active = nullptr;
    bool feed_branch = true;  // true: expanded block consumes the residual
                              // branch output; false: the post-residual state
};

void validate_batch(const ModelSpec& spec, const TokenBatch& batch);
const HeadParams& get_head(const BaseModel& model, const std::string& task);

// Residual-branch function of one block: Attn(LN1(x)) + FF(LN2(x + Attn(LN1(x)))).
// Writes intermediates needed by the backward pass into `cache`.
Tensor branch_forward(const ModelSpec& spec, const BlockParams& p, const Tensor& x,
                      std::size_t seq_len, BlockCache& cache);

// Backward of branch_forward. Accumulates parameter gradients into `g`
// (unless accumulate is false, which skips the dW/db work for frozen blocks)
// and returns dL/dx through the branch only (the caller adds the residual
// identity term itself).
Tensor branch_backward(const ModelSpec& spec, const BlockParams& p, const BlockCache& cache,
                       const Tensor& d_contrib, BlockParams& g, bool accumulate = true);

// Full forward over embeddings, blocks (with optional expansion), pooling and
// the task head. Returns logits (B x K).
Tensor forward_core(const BaseModel& model, const ExpansionView* exp,
                    const TokenBatch& batch, const std::string& task, ForwardCache* cache);

GradientSet make_zero_grads(const BaseModel& model, const ExpansionView* exp);

// Backward from d(logits); fills `grads` (which must be zero-initialized and
// shape-congruent, including expanded entries when exp is present). When
// `param_filter` is given, parameter gradients are accumulated only for
// tensors the mask marks trainable; activation gradients still flow through
// everything.
void backward_core(const BaseModel& model, const ExpansionView* exp, const ForwardCache& cache,
                   const Tensor& dlogits, GradientSet& grads,
                   const TrainableMask* param_filter = nullptr);

// Mean cross-entropy against labels plus dL/dlogits.
double ce_loss_and_dlogits(const Tensor& logits, const std::vector<int>& labels,
                           std::size_t num_classes, Tensor* dlogits);

} // namespace fedbe::nn::detail
