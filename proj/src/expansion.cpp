#include "fedbe/expansion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "fedbe/errors.hpp"
#include "fedbe/nn_internal.hpp"
#include "fedbe/rng.hpp"

namespace fedbe::expansion {

const char* to_string(ZeroInitPolicy p) {
    return p == ZeroInitPolicy::OutputProj ? "output-proj" : "all-linear";
}

const char* to_string(ExpandInput e) {
    return e == ExpandInput::Branch ? "branch" : "post-residual";
}

ZeroInitPolicy zero_init_from_string(const std::string& s) {
    if (s == "output-proj") return ZeroInitPolicy::OutputProj;
    if (s == "all-linear") return ZeroInitPolicy::AllLinear;
    throw ConfigError("unknown zero_init_policy: " + s);
}

ExpandInput expand_input_from_string(const std::string& s) {
    if (s == "branch") return ExpandInput::Branch;
    if (s == "post-residual") return ExpandInput::PostResidual;
    throw ConfigError("unknown expand_input: " + s);
}

std::set<int> ExpandedModel::positions() const {
    std::set<int> out;
    for (const auto& [pos, _] : expanded) out.insert(pos);
    return out;
}

std::size_t ExpandedModel::param_count() const {
    std::size_t n = base.tok_embedding.size() + base.pos_embedding.size();
    for (const auto& b : base.blocks) n += b.param_count();
    for (const auto& [_, h] : base.heads) n += h.weight.size() + h.bias.size();
    for (const auto& [_, b] : expanded) n += b.param_count();
    return n;
}

std::uint64_t flops_estimate(const nn::ModelSpec& spec, std::size_t n_blocks,
                             std::size_t seq_len) {
    const std::uint64_t d = spec.hidden_dim, f = spec.ff_dim, t = seq_len;
    const std::uint64_t per_token = 8 * d * d + 4 * d * t + 4 * d * f;
    return per_token * t * n_blocks;
}

std::size_t choose_k(const nn::ModelSpec& spec, const BudgetSpec& budget) {
    const std::uint64_t per_block_params = nn::block_param_count(spec);
    const std::uint64_t per_block_flops =
        flops_estimate(spec, 1, spec.max_seq_len) / spec.max_seq_len;
    std::uint64_t k = std::min(budget.max_extra_params / per_block_params,
                               budget.max_extra_flops / per_block_flops);
    return static_cast<std::size_t>(std::min<std::uint64_t>(k, spec.num_blocks));
}

std::vector<double> proxy_gradient_profile(const nn::BaseModel& model,
                                           const datagen::LabeledDataset& proxy,
                                           std::size_t steps, double lr,
                                           std::size_t batch_size, std::uint64_t seed) {
    if (proxy.empty()) throw InputError("proxy_gradient_profile: empty proxy dataset");
    if (steps < 1) throw InputError("proxy_gradient_profile: steps must be >= 1");
    batch_size = std::min(batch_size, proxy.size());

    nn::BaseModel work = model;  // the caller's model stays untouched
    const nn::TrainableMask mask = nn::TrainableMask::full(work.spec, proxy.task_id);

    std::vector<double> sums(work.spec.num_blocks, 0.0);
    std::vector<std::size_t> order(proxy.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    Rng rng = substream(seed, "proxy_batch");
    std::size_t cursor = proxy.size();  // forces a shuffle before the first batch
    for (std::size_t step = 0; step < steps; ++step) {
        if (cursor + batch_size > proxy.size()) {
            rng.shuffle(order);
            cursor = 0;
        }
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                     order.begin() + static_cast<std::ptrdiff_t>(cursor + batch_size));
        cursor += batch_size;
        const nn::TokenBatch batch = nn::TokenBatch::from_examples(proxy.examples, idx);
        std::vector<int> labels(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = proxy.examples[idx[i]].label;

        const nn::LossAndGrads lg = nn::loss_and_backward(work, batch, labels, proxy.task_id);
        const std::vector<double> norms = nn::block_grad_norms(lg.grads);
        for (std::size_t l = 0; l < sums.size(); ++l) sums[l] += norms[l];
        nn::apply_sgd(work, lg.grads, lr, mask);
    }
    for (double& s : sums) s /= static_cast<double>(steps);
    return sums;
}

std::vector<int> select_expansion_layers(const std::vector<double>& grad_norms,
                                         std::size_t k, double lambda) {
    const std::size_t num_blocks = grad_norms.size();
    if (k < 1 || k > num_blocks) throw InputError("select_expansion_layers: k out of range");
    if (lambda < 0.0 || lambda > 1.0) {
        throw InputError("select_expansion_layers: lambda outside [0, 1]");
    }
    double max_g = 0.0;
    for (double g : grad_norms) max_g = std::max(max_g, g);
    if (!(max_g > 0.0)) {
        throw InputError("select_expansion_layers: degenerate all-zero gradient profile");
    }

    std::vector<double> s_grad(num_blocks);
    for (std::size_t l = 0; l < num_blocks; ++l) s_grad[l] = grad_norms[l] / max_g;

    std::vector<int> selected;
    std::vector<bool> taken(num_blocks, false);
    for (std::size_t round = 0; round < k; ++round) {
        int best = -1;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t l = 0; l < num_blocks; ++l) {
            if (taken[l]) continue;
            double d_penalty = 0.0;
            if (!selected.empty()) {
                double min_dist = std::numeric_limits<double>::infinity();
                for (int sel : selected) {
                    min_dist = std::min(min_dist,
                                        std::abs(static_cast<double>(l + 1) - sel));
                }
                d_penalty = min_dist / static_cast<double>(num_blocks);
            }
            const double score = s_grad[l] + lambda * d_penalty;
            if (score > best_score) {
                best_score = score;
                best = static_cast<int>(l);
            }
        }
        taken[static_cast<std::size_t>(best)] = true;
        selected.push_back(best + 1);
    }
    return selected;
}

std::vector<int> uniform_positions(std::size_t num_blocks, std::size_t k) {
    if (k < 1 || k > num_blocks) throw InputError("uniform_positions: k out of range");
    std::vector<int> out;
    for (std::size_t i = 1; i <= k; ++i) {
        out.push_back(static_cast<int>((i * num_blocks + k - 1) / k));
    }
    return out;
}

ExpandedModel expand(const nn::BaseModel& base, const std::vector<int>& positions,
                     ZeroInitPolicy policy, ExpandInput input) {
    ExpandedModel m;
    m.base = base;
    m.zero_init_policy = policy;
    m.expand_input = input;
    for (int pos : positions) {
        if (pos < 1 || static_cast<std::size_t>(pos) > base.spec.num_blocks) {
            throw InputError("expand: position out of range");
        }
        if (m.expanded.count(pos)) throw InputError("expand: duplicate position");
        nn::BlockParams b = base.blocks[static_cast<std::size_t>(pos - 1)];
        b.w_o.fill(0.0);
        b.b_o.fill(0.0);
        b.w_ff2.fill(0.0);
        b.b_ff2.fill(0.0);
        if (policy == ZeroInitPolicy::AllLinear) {
            b.w_q.fill(0.0); b.b_q.fill(0.0);
            b.w_k.fill(0.0); b.b_k.fill(0.0);
            b.w_v.fill(0.0); b.b_v.fill(0.0);
            b.w_ff1.fill(0.0); b.b_ff1.fill(0.0);
        }
        m.expanded.emplace(pos, std::move(b));
    }
    return m;
}

namespace {

nn::detail::ExpansionView make_view(const ExpandedModel& m, const std::set<int>& active) {
    for (int pos : active) {
        if (!m.expanded.count(pos)) {
            throw InputError("active expanded position not in the plan");
        }
    }
    nn::detail::ExpansionView view;
    view.blocks = &m.expanded;
    view.active = &active;
    view.feed_branch = m.expand_input == ExpandInput::Branch;
    return view;
}

} // namespace

Tensor forward_expanded(const ExpandedModel& m, const nn::TokenBatch& batch,
                        const std::string& task, const std::set<int>& active,
                        nn::ForwardCache* cache) {
    const nn::detail::ExpansionView view = make_view(m, active);
    return nn::detail::forward_core(m.base, &view, batch, task, cache);
}

nn::LossAndGrads loss_and_backward_expanded(const ExpandedModel& m,
                                            const nn::TokenBatch& batch,
                                            const std::vector<int>& labels,
                                            const std::string& task,
                                            const std::set<int>& active,
                                            const nn::TrainableMask* param_filter) {
    const nn::detail::ExpansionView view = make_view(m, active);
    nn::ForwardCache cache;
    const Tensor logits = nn::detail::forward_core(m.base, &view, batch, task, &cache);
    Tensor dlogits;
    nn::LossAndGrads out;
    out.loss = nn::detail::ce_loss_and_dlogits(logits, labels, m.base.spec.num_classes, &dlogits);
    out.grads = nn::detail::make_zero_grads(m.base, &view);
    nn::detail::backward_core(m.base, &view, cache, dlogits, out.grads, param_filter);
    return out;
}

nn::TrainableMask trainable_mask(const ExpandedModel& m, const std::set<int>& assigned,
                                 const std::string& task) {
    for (int pos : assigned) {
        if (!m.expanded.count(pos)) {
            throw InputError("trainable_mask: assigned position not in the plan");
        }
    }
    nn::TrainableMask mask = nn::TrainableMask::none(m.base.spec);
    mask.expanded = assigned;
    mask.heads.insert(task);
    return mask;
}

void apply_sgd(ExpandedModel& m, const nn::GradientSet& grads, double lr,
               const nn::TrainableMask& mask) {
    nn::apply_sgd(m.base, grads, lr, mask);
    for (auto& [pos, block] : m.expanded) {
        if (mask.expanded.count(pos)) {
            nn::zip_block_tensors(block, grads.expanded.at(pos),
                                  [&](Tensor& p, const Tensor& g) {
                                      for (std::size_t i = 0; i < p.data.size(); ++i) {
                                          p.data[i] -= lr * g.data[i];
                                      }
                                  });
        }
    }
}

double evaluate_expanded(const ExpandedModel& m, const datagen::LabeledDataset& dataset,
                         const std::string& task, const std::set<int>& active) {
    if (dataset.empty()) throw InputError("evaluate: empty dataset");
    const std::size_t chunk = 64;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < dataset.size(); start += chunk) {
        const std::size_t end = std::min(dataset.size(), start + chunk);
        std::vector<std::size_t> idx(end - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        const nn::TokenBatch batch = nn::TokenBatch::from_examples(dataset.examples, idx);
        const Tensor logits = forward_expanded(m, batch, task, active);
        const std::size_t num_classes = logits.cols();
        for (std::size_t b = 0; b < logits.rows(); ++b) {
            const double* row = logits.data.data() + b * num_classes;
            std::size_t best = 0;
            for (std::size_t j = 1; j < num_classes; ++j) {
                if (row[j] > row[best]) best = j;
            }
            if (static_cast<int>(best) == dataset.examples[start + b].label) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

std::string plan_to_json(const ExpansionPlan& plan) {
    nlohmann::json j;
    j["k"] = plan.k;
    j["positions"] = plan.positions;
    j["lambda"] = plan.lambda;
    return j.dump();
}

} // namespace fedbe::expansion
