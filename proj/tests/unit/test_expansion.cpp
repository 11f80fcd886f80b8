#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "fedbe/datagen.hpp"
#include "fedbe/errors.hpp"
#include "fedbe/expansion.hpp"
#include "fedbe/nn_internal.hpp"
#include "fedbe/rng.hpp"
#include "helpers.hpp"

using namespace fedbe;
using namespace fedbe::test;
namespace exp_ns = fedbe::expansion;

namespace {

const nn::ModelSpec kToy{4, 32, 4, 128, 64, 16, 4};
const nn::ModelSpec kSmall{2, 16, 4, 32, 32, 8, 3};

// Line-by-line re-execution of the greedy selection, written independently of
// the implementation (map-based score dictionary, linear membership scans).
std::vector<int> selection_reference(const std::vector<double>& g, std::size_t k,
                                     double lambda) {
    const auto L = static_cast<int>(g.size());
    std::vector<int> picked;
    const double max_g = *std::max_element(g.begin(), g.end());
    for (std::size_t round = 0; round < k; ++round) {
        std::map<int, double> scores;
        for (int l = 1; l <= L; ++l) {
            if (std::find(picked.begin(), picked.end(), l) != picked.end()) continue;
            double penalty = 0.0;
            if (!picked.empty()) {
                double closest = 1e300;
                for (int sel : picked) {
                    closest = std::min(closest, std::abs(l - sel) / static_cast<double>(L));
                }
                penalty = closest;
            }
            scores[l] = g[static_cast<std::size_t>(l - 1)] / max_g + lambda * penalty;
        }
        auto best = scores.begin();
        for (auto it = scores.begin(); it != scores.end(); ++it) {
            if (it->second > best->second) best = it;
        }
        picked.push_back(best->first);
    }
    return picked;
}

double expanded_loss(const exp_ns::ExpandedModel& m, const nn::TokenBatch& batch,
                     const std::vector<int>& labels, const std::set<int>& active) {
    const Tensor logits = exp_ns::forward_expanded(m, batch, "D", active);
    const Tensor probs = nn::softmax_rows(logits);
    double loss = 0.0;
    for (std::size_t b = 0; b < probs.rows(); ++b) {
        loss -= std::log(probs.at(b, static_cast<std::size_t>(labels[b])));
    }
    return loss / static_cast<double>(probs.rows());
}

exp_ns::ExpandedModel trained_expanded(const nn::BaseModel& base, std::vector<int> positions,
                                       exp_ns::ZeroInitPolicy policy, exp_ns::ExpandInput input,
                                       int steps) {
    exp_ns::ExpandedModel m = exp_ns::expand(base, positions, policy, input);
    const std::set<int> active(positions.begin(), positions.end());
    const nn::TrainableMask mask = exp_ns::trainable_mask(m, active, "D");
    for (int step = 0; step < steps; ++step) {
        const nn::TokenBatch batch = random_batch(base.spec, 4, base.spec.max_seq_len,
                                                  900 + static_cast<std::uint64_t>(step));
        const std::vector<int> labels =
            random_labels(base.spec, 4, 700 + static_cast<std::uint64_t>(step));
        const auto lg = exp_ns::loss_and_backward_expanded(m, batch, labels, "D", active);
        exp_ns::apply_sgd(m, lg.grads, 0.05, mask);
    }
    return m;
}

} // namespace

TEST_CASE("flops estimate follows the documented closed form") {
    CHECK(exp_ns::flops_estimate(kToy, 0, 16) == 0);
    // (8*32^2 + 4*32*16 + 4*32*128) * 16 tokens * 1 block
    CHECK(exp_ns::flops_estimate(kToy, 1, 16) == 425984);
    CHECK(exp_ns::flops_estimate(kToy, 6, 16) == 2 * exp_ns::flops_estimate(kToy, 3, 16));
}

TEST_CASE("per-block parameter count matches the layout") {
    // 4*(32*32+32) + (32*128+128) + (128*32+32) + 2*(32+32)
    CHECK(nn::block_param_count(kToy) == 12704);
    const nn::BaseModel m = nn::init_model(kToy, 1);
    CHECK(m.blocks[0].param_count() == 12704);
}

TEST_CASE("budget-constrained k") {
    CHECK(exp_ns::choose_k(kToy, {0, UINT64_MAX}) == 0);
    CHECK(exp_ns::choose_k(kToy, {40000, UINT64_MAX}) == 3);  // floor(40000/12704)
    CHECK(exp_ns::choose_k(kToy, {UINT64_MAX, UINT64_MAX}) == 4);  // capped at L
    CHECK(exp_ns::choose_k(kToy, {UINT64_MAX, 0}) == 0);

    // non-decreasing in both budget fields
    Rng rng(66);
    for (int trial = 0; trial < 50; ++trial) {
        const std::uint64_t p = rng.bounded(100000);
        const std::uint64_t f = rng.bounded(3000000);
        const std::size_t k = exp_ns::choose_k(kToy, {p, f});
        CHECK(exp_ns::choose_k(kToy, {p + 13000, f}) >= k);
        CHECK(exp_ns::choose_k(kToy, {p, f + 500000}) >= k);
    }
}

TEST_CASE("greedy selection reproduces the hand trace") {
    const std::vector<int> picks = exp_ns::select_expansion_layers({0.5, 1.0, 0.25, 0.75}, 2, 0.5);
    REQUIRE(picks.size() == 2);
    CHECK(picks[0] == 2);  // highest normalized gradient
    CHECK(picks[1] == 4);  // 0.75 + 0.5*(2/4) = 1.0 beats layers 1 and 3
}

TEST_CASE("lambda zero reduces to gradient top-k") {
    const std::vector<double> g = {0.1, 0.9, 0.3, 0.8, 0.2};
    const std::vector<int> picks = exp_ns::select_expansion_layers(g, 3, 0.0);
    CHECK(picks == std::vector<int>{2, 4, 3});
}

TEST_CASE("k equal to depth selects everything") {
    const auto picks = exp_ns::select_expansion_layers({0.2, 0.4, 0.1}, 3, 1.0);
    std::vector<int> sorted = picks;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{1, 2, 3});
}

TEST_CASE("selection matches an independent re-execution") {
    Rng rng(2024);
    for (std::size_t depth = 1; depth <= 8; ++depth) {
        for (double lambda : {0.0, 0.25, 0.5, 1.0}) {
            for (int trial = 0; trial < 25; ++trial) {
                std::vector<double> g(depth);
                for (double& x : g) x = rng.uniform(0.0, 1.0) + 1e-9;
                for (std::size_t k = 1; k <= depth; ++k) {
                    CHECK(exp_ns::select_expansion_layers(g, k, lambda) ==
                          selection_reference(g, k, lambda));
                }
            }
        }
    }
}

TEST_CASE("any positive lambda spreads a flat profile to the extremes") {
    for (std::size_t depth : {3u, 5u, 8u}) {
        const std::vector<double> flat(depth, 0.7);
        for (double lambda : {0.25, 0.5, 1.0}) {
            const auto picks = exp_ns::select_expansion_layers(flat, 2, lambda);
            CHECK(picks[0] == 1);  // all scores tie, lowest index wins
            CHECK(picks[1] == static_cast<int>(depth));  // maximal distance
        }
    }
}

TEST_CASE("selection rejects bad inputs") {
    CHECK_THROWS_AS(exp_ns::select_expansion_layers({0.0, 0.0}, 1, 0.5), InputError);
    CHECK_THROWS_AS(exp_ns::select_expansion_layers({0.5, 0.1}, 3, 0.5), InputError);
    CHECK_THROWS_AS(exp_ns::select_expansion_layers({0.5, 0.1}, 1, 1.5), InputError);
}

TEST_CASE("uniform positions sit at group ends") {
    CHECK(exp_ns::uniform_positions(12, 3) == std::vector<int>{4, 8, 12});
    CHECK(exp_ns::uniform_positions(4, 2) == std::vector<int>{2, 4});
    CHECK(exp_ns::uniform_positions(4, 4) == std::vector<int>{1, 2, 3, 4});
    CHECK(exp_ns::uniform_positions(5, 2) == std::vector<int>{3, 5});
}

TEST_CASE("expansion copies then zeroes per policy") {
    const nn::BaseModel base = nn::init_model(kToy, 3);
    const auto m = exp_ns::expand(base, {2, 4}, exp_ns::ZeroInitPolicy::OutputProj,
                                  exp_ns::ExpandInput::Branch);
    CHECK(tensors_equal(m.expanded.at(2).w_q, base.blocks[1].w_q));
    CHECK(tensors_equal(m.expanded.at(2).ln1_gain, base.blocks[1].ln1_gain));
    for (double v : m.expanded.at(2).w_o.data) CHECK(v == 0.0);
    for (double v : m.expanded.at(2).w_ff2.data) CHECK(v == 0.0);

    const auto all = exp_ns::expand(base, {1}, exp_ns::ZeroInitPolicy::AllLinear,
                                    exp_ns::ExpandInput::Branch);
    for (double v : all.expanded.at(1).w_q.data) CHECK(v == 0.0);
    for (double v : all.expanded.at(1).w_ff1.data) CHECK(v == 0.0);
    CHECK(tensors_equal(all.expanded.at(1).ln1_gain, base.blocks[0].ln1_gain));

    CHECK_THROWS_AS(exp_ns::expand(base, {5}, exp_ns::ZeroInitPolicy::OutputProj,
                                   exp_ns::ExpandInput::Branch),
                    InputError);
    CHECK_THROWS_AS(exp_ns::expand(base, {2, 2}, exp_ns::ZeroInitPolicy::OutputProj,
                                   exp_ns::ExpandInput::Branch),
                    InputError);
}

TEST_CASE("expanded parameter count is base plus k blocks") {
    const nn::BaseModel base = nn::init_model(kToy, 3);
    const auto m = exp_ns::expand(base, {1, 3}, exp_ns::ZeroInitPolicy::OutputProj,
                                  exp_ns::ExpandInput::Branch);
    std::size_t base_count = base.tok_embedding.size() + base.pos_embedding.size();
    for (const auto& b : base.blocks) base_count += b.param_count();
    for (const auto& [_, h] : base.heads) base_count += h.weight.size() + h.bias.size();
    CHECK(m.param_count() == base_count + 2 * nn::block_param_count(kToy));
}

TEST_CASE("freshly expanded models are bitwise identical to the base") {
    const nn::BaseModel base = nn::init_model(kToy, 11);
    for (auto policy : {exp_ns::ZeroInitPolicy::OutputProj, exp_ns::ZeroInitPolicy::AllLinear}) {
        for (auto input : {exp_ns::ExpandInput::Branch, exp_ns::ExpandInput::PostResidual}) {
            const auto m = exp_ns::expand(base, {1, 3}, policy, input);
            const std::set<int> active = {1, 3};
            for (std::uint64_t s = 0; s < 20; ++s) {
                const nn::TokenBatch batch = random_batch(kToy, 4, 16, 1000 + s);
                const Tensor expanded = exp_ns::forward_expanded(m, batch, "D", active);
                const Tensor plain = nn::forward(base, batch, "D");
                CHECK(tensors_equal(expanded, plain));
            }
        }
    }
}

TEST_CASE("deactivated expanded blocks vanish even after training") {
    const nn::BaseModel base = nn::init_model(kToy, 13);
    const auto m = trained_expanded(base, {2, 4}, exp_ns::ZeroInitPolicy::OutputProj,
                                    exp_ns::ExpandInput::Branch, 8);
    const nn::TokenBatch batch = random_batch(kToy, 4, 16, 55);
    // the head trained too, so compare against the same model's base path
    CHECK(tensors_equal(exp_ns::forward_expanded(m, batch, "D", {}),
                        nn::forward(m.base, batch, "D")));
    // the frozen backbone plus the untouched general head reproduce the
    // original model exactly
    CHECK(tensors_equal(exp_ns::forward_expanded(m, batch, "G", {}),
                        nn::forward(base, batch, "G")));
    // with blocks active the logits must now differ
    CHECK(!tensors_equal(exp_ns::forward_expanded(m, batch, "D", {2, 4}),
                         nn::forward(m.base, batch, "D")));
    CHECK_THROWS_AS(exp_ns::forward_expanded(m, batch, "D", {3}), InputError);
}

TEST_CASE("the expanded block consumes the branch output and adds on top") {
    // scalar reading of the composition rule: x=1, branch 2, expansion 0.5
    CHECK(1.0 + 2.0 + 0.5 == 3.5);

    nn::ModelSpec spec = kSmall;
    spec.num_blocks = 1;
    const nn::BaseModel base = nn::init_model(spec, 17);

    for (auto input : {exp_ns::ExpandInput::Branch, exp_ns::ExpandInput::PostResidual}) {
        const auto m = trained_expanded(base, {1}, exp_ns::ZeroInitPolicy::OutputProj, input, 6);
        nn::ForwardCache cache;
        const nn::TokenBatch batch = random_batch(spec, 2, 8, 77);
        exp_ns::forward_expanded(m, batch, "D", {1}, &cache);

        nn::BlockCache scratch;
        const Tensor branch =
            nn::detail::branch_forward(spec, base.blocks[0], cache.x0, 8, scratch);
        Tensor x_after = cache.x0;
        x_after += branch;
        const Tensor& fed = input == exp_ns::ExpandInput::Branch ? branch : x_after;
        nn::BlockCache scratch2;
        const Tensor extra =
            nn::detail::branch_forward(spec, m.expanded.at(1), fed, 8, scratch2);
        Tensor manual = x_after;
        manual += extra;
        CHECK(tensors_equal(manual, cache.x_final));
    }
}

TEST_CASE("expanded-model gradients match central differences") {
    nn::ModelSpec spec = kSmall;
    const nn::BaseModel base = nn::init_model(spec, 19);
    const nn::TokenBatch batch = random_batch(spec, 2, 8, 5);
    const std::vector<int> labels = random_labels(spec, 2, 6);

    for (auto input : {exp_ns::ExpandInput::Branch, exp_ns::ExpandInput::PostResidual}) {
        exp_ns::ExpandedModel m =
            trained_expanded(base, {1, 2}, exp_ns::ZeroInitPolicy::OutputProj, input, 4);
        const std::set<int> active = {1, 2};
        const auto lg = exp_ns::loss_and_backward_expanded(m, batch, labels, "D", active);

        double max_rel = 0.0;
        const double eps = 1e-5;
        Rng rng(404);
        for (auto& [pos, block] : m.expanded) {
            nn::for_each_block_tensor(block, [&](const char* name, Tensor& t) {
                for (int trial = 0; trial < 3; ++trial) {
                    const std::size_t idx = rng.bounded(t.size());
                    const double saved = t.data[idx];
                    t.data[idx] = saved + eps;
                    const double lp = expanded_loss(m, batch, labels, active);
                    t.data[idx] = saved - eps;
                    const double lm = expanded_loss(m, batch, labels, active);
                    t.data[idx] = saved;
                    const double fd = (lp - lm) / (2 * eps);
                    const Tensor* g = nullptr;
                    nn::for_each_block_tensor(lg.grads.expanded.at(pos),
                                              [&](const char* gname, const Tensor& gt) {
                                                  if (std::string_view(gname) == name) g = &gt;
                                              });
                    const double an = g->data[idx];
                    max_rel = std::max(max_rel, std::abs(fd - an) /
                                                    std::max({std::abs(fd), std::abs(an), 1e-3}));
                }
            });
        }
        CHECK(max_rel < 1e-6);
    }
}

TEST_CASE("trainable mask covers assigned blocks and the task head only") {
    const nn::BaseModel base = nn::init_model(kToy, 23);
    const auto m = exp_ns::expand(base, {1, 2, 4}, exp_ns::ZeroInitPolicy::OutputProj,
                                  exp_ns::ExpandInput::Branch);

    const nn::TrainableMask mask = exp_ns::trainable_mask(m, {2}, "D");
    CHECK(!mask.embeddings);
    for (bool b : mask.blocks) CHECK(!b);
    CHECK(mask.expanded == std::set<int>{2});
    CHECK(mask.heads == std::set<std::string>{"D"});

    const nn::TrainableMask none = exp_ns::trainable_mask(m, {}, "D");
    CHECK(none.expanded.empty());
    CHECK(none.heads == std::set<std::string>{"D"});

    const nn::TrainableMask all = exp_ns::trainable_mask(m, {1, 2, 4}, "D");
    for (bool b : all.blocks) CHECK(!b);  // base blocks stay frozen

    CHECK_THROWS_AS(exp_ns::trainable_mask(m, {3}, "D"), InputError);
}

TEST_CASE("training through the mask never touches frozen tensors") {
    const nn::BaseModel base = nn::init_model(kToy, 29);
    exp_ns::ExpandedModel m = exp_ns::expand(base, {1, 3}, exp_ns::ZeroInitPolicy::OutputProj,
                                             exp_ns::ExpandInput::Branch);
    const exp_ns::ExpandedModel before = m;
    const std::set<int> active = {1, 3};
    const nn::TrainableMask mask = exp_ns::trainable_mask(m, {3}, "D");

    for (int step = 0; step < 10; ++step) {
        const nn::TokenBatch batch = random_batch(kToy, 4, 16, 40 + static_cast<std::uint64_t>(step));
        const std::vector<int> labels = random_labels(kToy, 4, 50 + static_cast<std::uint64_t>(step));
        const auto lg = exp_ns::loss_and_backward_expanded(m, batch, labels, "D", active);
        exp_ns::apply_sgd(m, lg.grads, 0.05, mask);
    }

    CHECK(backbone_bitwise_equal(m.base, before.base));
    CHECK(tensors_equal(m.base.heads.at("G").weight, before.base.heads.at("G").weight));
    // unassigned expanded block frozen, assigned one moved
    nn::zip_block_tensors(m.expanded.at(1), before.expanded.at(1),
                          [&](const Tensor& a, const Tensor& b) { CHECK(tensors_equal(a, b)); });
    CHECK(!tensors_equal(m.expanded.at(3).w_ff1, before.expanded.at(3).w_ff1));
    CHECK(!tensors_equal(m.base.heads.at("D").weight, before.base.heads.at("D").weight));
}

TEST_CASE("proxy profiling averages block gradient norms without touching the model") {
    auto [g_spec, d_spec] = datagen::make_task_pair("G", "D", 64, 16, 4, 4, 0.3, 3);
    const datagen::TaskData data = datagen::gen_task(d_spec, 400, 21);
    const nn::BaseModel model = nn::init_model(kToy, 31);
    const nn::BaseModel snapshot = model;

    const std::vector<double> one =
        exp_ns::proxy_gradient_profile(model, data.train, 1, 0.05, 32, 99);
    CHECK(params_bitwise_equal(model, snapshot));
    REQUIRE(one.size() == kToy.num_blocks);
    for (double g : one) CHECK(g >= 0.0);

    // steps=1 equals the raw block norms of that first (seeded) batch
    std::vector<std::size_t> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = substream(99, "proxy_batch");
    rng.shuffle(order);
    order.resize(32);
    const nn::TokenBatch batch = nn::TokenBatch::from_examples(data.train.examples, order);
    std::vector<int> labels;
    for (std::size_t i : order) labels.push_back(data.train.examples[i].label);
    const auto lg = nn::loss_and_backward(model, batch, labels, "D");
    const auto norms = nn::block_grad_norms(lg.grads);
    for (std::size_t l = 0; l < norms.size(); ++l) CHECK(one[l] == norms[l]);

    // determinism and the mean over steps
    const auto a = exp_ns::proxy_gradient_profile(model, data.train, 5, 0.05, 32, 99);
    const auto b = exp_ns::proxy_gradient_profile(model, data.train, 5, 0.05, 32, 99);
    CHECK(a == b);

    datagen::LabeledDataset empty;
    CHECK_THROWS_AS(exp_ns::proxy_gradient_profile(model, empty, 1, 0.05, 32, 1), InputError);
}
