#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fedbe/nn.hpp"

namespace fedbe::expansion {

struct BudgetSpec {
    std::uint64_t max_extra_params = 0;      // additional parameter budget
    std::uint64_t max_extra_flops = 0;       // additional forward FLOPs per token

    bool operator==(const BudgetSpec&) const = default;
};

struct ExpansionPlan {
    std::size_t k = 0;
    std::vector<int> positions;  // 1-based layer indices, in pick order
    double lambda = 0.5;
};

// How the copied expanded block is zeroed at construction. `OutputProj`
// zeroes only the attention output projection and the second feed-forward
// matrix (plus biases): the block's contribution is exactly zero while the
// copied interior weights keep gradients alive. `AllLinear` zeroes every
// weight matrix and bias.
enum class ZeroInitPolicy { OutputProj, AllLinear };

// What the expanded block consumes: the residual-branch output of its base
// block, or the post-residual state.
enum class ExpandInput { Branch, PostResidual };

const char* to_string(ZeroInitPolicy p);
const char* to_string(ExpandInput e);
ZeroInitPolicy zero_init_from_string(const std::string& s);
ExpandInput expand_input_from_string(const std::string& s);

// Frozen backbone plus zero-initialized expanded blocks at selected
// positions. An empty `expanded` map behaves exactly like the base model,
// which is how the non-expanding baselines run through the same machinery.
struct ExpandedModel {
    nn::BaseModel base;
    std::map<int, nn::BlockParams> expanded;  // keyed by 1-based position
    ZeroInitPolicy zero_init_policy = ZeroInitPolicy::OutputProj;
    ExpandInput expand_input = ExpandInput::Branch;

    std::set<int> positions() const;
    std::size_t param_count() const;  // base + expanded, heads included
};

// Per-token forward cost of one block: 8*d^2 (attention projections) +
// 4*d*T (score/value mixing) + 4*d*d_ff (feed-forward); total cost is that
// times T tokens times n_blocks.
std::uint64_t flops_estimate(const nn::ModelSpec& spec, std::size_t n_blocks,
                             std::size_t seq_len);

// Largest k (capped at L) whose k extra blocks fit both budget fields. The
// per-block FLOPs figure is flops_estimate(spec, 1, T_max) / T_max.
std::size_t choose_k(const nn::ModelSpec& spec, const BudgetSpec& budget);

// Runs `steps` full-model SGD steps on a working copy over the proxy set
// (seeded batch order; the input model is not touched) and returns the
// per-block mean gradient norm across steps.
std::vector<double> proxy_gradient_profile(const nn::BaseModel& model,
                                           const datagen::LabeledDataset& proxy,
                                           std::size_t steps, double lr,
                                           std::size_t batch_size, std::uint64_t seed);

// Greedy selection: s_grad(l) = G[l]/max(G); after the first pick each
// candidate earns lambda * min distance to the selected set, normalized by L;
// highest composite score wins, ties to the lowest index. Returns picks in
// selection order (1-based).
std::vector<int> select_expansion_layers(const std::vector<double>& grad_norms,
                                         std::size_t k, double lambda);

// Evenly spaced positions (the uniform-position ablation): ceil(i*L/k) for
// i = 1..k.
std::vector<int> uniform_positions(std::size_t num_blocks, std::size_t k);

// Copies block l's parameters into a new expanded block at each selected
// position and zeroes them per policy. Base parameters are untouched.
ExpandedModel expand(const nn::BaseModel& base, const std::vector<int>& positions,
                     ZeroInitPolicy policy, ExpandInput input);

// Forward with the given expanded positions active; inactive positions
// contribute nothing and reproduce the base arithmetic bit-for-bit.
Tensor forward_expanded(const ExpandedModel& m, const nn::TokenBatch& batch,
                        const std::string& task, const std::set<int>& active,
                        nn::ForwardCache* cache = nullptr);

// `param_filter` (optional) restricts which parameter gradients get
// accumulated; activation gradients always flow. Local training passes its
// trainable mask here so frozen blocks skip their dW work.
nn::LossAndGrads loss_and_backward_expanded(const ExpandedModel& m,
                                            const nn::TokenBatch& batch,
                                            const std::vector<int>& labels,
                                            const std::string& task,
                                            const std::set<int>& active,
                                            const nn::TrainableMask* param_filter = nullptr);

// Marks exactly the assigned expanded blocks plus the task head trainable.
nn::TrainableMask trainable_mask(const ExpandedModel& m, const std::set<int>& assigned,
                                 const std::string& task);

void apply_sgd(ExpandedModel& m, const nn::GradientSet& grads, double lr,
               const nn::TrainableMask& mask);

double evaluate_expanded(const ExpandedModel& m, const datagen::LabeledDataset& dataset,
                         const std::string& task, const std::set<int>& active);

// {"k": int, "positions": [int], "lambda": real}
std::string plan_to_json(const ExpansionPlan& plan);

} // namespace fedbe::expansion
