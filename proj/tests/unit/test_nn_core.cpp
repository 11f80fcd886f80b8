#include <doctest.h>

#include <cmath>

#include "fedbe/datagen.hpp"
#include "fedbe/errors.hpp"
#include "fedbe/nn.hpp"
#include "fedbe/rng.hpp"
#include "helpers.hpp"

using namespace fedbe;
using namespace fedbe::test;

namespace {

const nn::ModelSpec kSmall{2, 16, 4, 32, 32, 8, 3};

} // namespace

TEST_CASE("seeded init is bit-identical; different seeds differ") {
    const nn::BaseModel a = nn::init_model(kSmall, 7);
    const nn::BaseModel b = nn::init_model(kSmall, 7);
    CHECK(params_bitwise_equal(a, b));

    const nn::BaseModel c = nn::init_model(kSmall, 8);
    CHECK(!params_bitwise_equal(a, c));
}

TEST_CASE("init rejects invalid dimensions") {
    nn::ModelSpec bad = kSmall;
    bad.hidden_dim = 32;
    bad.num_heads = 5;  // not divisible
    CHECK_THROWS_AS(nn::init_model(bad, 1), ConfigError);

    bad = kSmall;
    bad.num_blocks = 0;
    CHECK_THROWS_AS(nn::init_model(bad, 1), ConfigError);
}

TEST_CASE("init draws weights in [-1/sqrt(d), 1/sqrt(d)] and unit layer norms") {
    const nn::BaseModel m = nn::init_model(kSmall, 3);
    const double s = 1.0 / std::sqrt(16.0);
    for (double v : m.tok_embedding.data) {
        CHECK(v >= -s);
        CHECK(v <= s);
    }
    for (double v : m.blocks[0].ln1_gain.data) CHECK(v == 1.0);
    for (double v : m.blocks[0].ln2_shift.data) CHECK(v == 0.0);
}

TEST_CASE("forward returns (B, K) logits") {
    nn::ModelSpec spec = kSmall;
    spec.num_classes = 4;
    const nn::BaseModel m = nn::init_model(spec, 1);
    const nn::TokenBatch batch = random_batch(spec, 2, 8, 11);
    const Tensor logits = nn::forward(m, batch, "D");
    CHECK(logits.shape == std::vector<std::size_t>{2, 4});
}

TEST_CASE("zero head weight forces the bias as output") {
    nn::BaseModel m = nn::init_model(kSmall, 2);
    m.heads.at("D").weight.fill(0.0);
    m.heads.at("D").bias.data = {0.5, -1.0, 2.0};
    const Tensor logits = nn::forward(m, random_batch(kSmall, 3, 8, 4), "D");
    for (std::size_t b = 0; b < 3; ++b) {
        CHECK(logits.at(b, 0) == 0.5);
        CHECK(logits.at(b, 1) == -1.0);
        CHECK(logits.at(b, 2) == 2.0);
    }
}

TEST_CASE("uniform logits softmax to 1/K and lose ln K") {
    nn::ModelSpec spec = kSmall;
    spec.num_classes = 4;
    nn::BaseModel m = nn::init_model(spec, 2);
    m.heads.at("D").weight.fill(0.0);
    m.heads.at("D").bias.fill(0.0);
    const nn::TokenBatch batch = random_batch(spec, 4, 8, 5);
    const Tensor logits = nn::forward(m, batch, "D");
    const Tensor probs = nn::softmax_rows(logits);
    for (double p : probs.data) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));

    const auto lg = nn::loss_and_backward(m, batch, {0, 1, 2, 3}, "D");
    CHECK(lg.loss == doctest::Approx(1.3862943611198906).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one within 1e-12") {
    Rng rng(17);
    Tensor logits({64, 5});
    for (double& v : logits.data) v = rng.uniform(-30.0, 30.0);
    const Tensor probs = nn::softmax_rows(logits);
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        double sum = 0.0;
        for (std::size_t j = 0; j < probs.cols(); ++j) sum += probs.at(r, j);
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("analytic gradients match central differences") {
    const nn::BaseModel m = nn::init_model(kSmall, 7);
    const nn::TokenBatch batch = random_batch(kSmall, 2, 8, 123);
    const std::vector<int> labels = random_labels(kSmall, 2, 42);

    const double err = nn::finite_diff_oracle(m, batch, labels, "D", 1e-5);
    CHECK(err < 1e-6);

    // deterministic: the same call gives the identical number
    CHECK(nn::finite_diff_oracle(m, batch, labels, "D", 1e-5) == err);
}

TEST_CASE("finite difference step must lie in (0, 1e-2]") {
    const nn::BaseModel m = nn::init_model(kSmall, 7);
    const nn::TokenBatch batch = random_batch(kSmall, 1, 8, 1);
    CHECK_THROWS_AS(nn::finite_diff_oracle(m, batch, {0}, "D", 0.0), InputError);
    CHECK_THROWS_AS(nn::finite_diff_oracle(m, batch, {0}, "D", 0.5), InputError);
}

TEST_CASE("a saturated correct prediction has near-zero loss and gradient") {
    nn::BaseModel m = nn::init_model(kSmall, 9);
    m.heads.at("D").weight.fill(0.0);
    m.heads.at("D").bias.fill(0.0);
    m.heads.at("D").bias.data[1] = 60.0;  // softmax(1) ~ 1 - 2e-26
    const auto lg = nn::loss_and_backward(m, random_batch(kSmall, 1, 8, 2), {1}, "D");
    CHECK(lg.loss < 1e-12);
    double sq = 0.0;
    nn::for_each_param(lg.grads,
                       [&](const std::string&, const Tensor& t) { sq += t.sq_norm(); });
    CHECK(std::sqrt(sq) < 1e-12);
}

TEST_CASE("input validation: tokens, labels, tasks") {
    const nn::BaseModel m = nn::init_model(kSmall, 7);
    nn::TokenBatch bad = random_batch(kSmall, 1, 8, 1);
    bad.tokens[3] = 32;  // == vocab_size
    CHECK_THROWS_AS(nn::forward(m, bad, "D"), InputError);

    nn::TokenBatch longer = random_batch(kSmall, 1, 9, 1);  // > max_seq_len
    CHECK_THROWS_AS(nn::forward(m, longer, "D"), InputError);

    const nn::TokenBatch ok = random_batch(kSmall, 1, 8, 1);
    CHECK_THROWS_AS(nn::forward(m, ok, "nope"), ConfigError);
    CHECK_THROWS_AS(nn::loss_and_backward(m, ok, {3}, "D"), InputError);
}

TEST_CASE("sgd honors the mask") {
    const nn::BaseModel original = nn::init_model(kSmall, 5);
    const nn::TokenBatch batch = random_batch(kSmall, 4, 8, 3);
    const std::vector<int> labels = random_labels(kSmall, 4, 4);
    const auto lg = nn::loss_and_backward(original, batch, labels, "D");

    SUBCASE("all-frozen leaves the model bitwise unchanged") {
        nn::BaseModel m = original;
        nn::apply_sgd(m, lg.grads, 0.1, nn::TrainableMask::none(kSmall));
        CHECK(params_bitwise_equal(m, original));
    }
    SUBCASE("zero learning rate leaves the model unchanged") {
        nn::BaseModel m = original;
        nn::apply_sgd(m, lg.grads, 0.0, nn::TrainableMask::full(kSmall, "D"));
        CHECK(params_bitwise_equal(m, original));
    }
    SUBCASE("head-only training freezes the backbone bitwise") {
        nn::BaseModel m = original;
        const nn::TrainableMask mask = nn::TrainableMask::head_only(kSmall, "D");
        for (int step = 0; step < 25; ++step) {
            const auto g = nn::loss_and_backward(m, batch, labels, "D");
            nn::apply_sgd(m, g.grads, 0.05, mask);
        }
        CHECK(backbone_bitwise_equal(m, original));
        CHECK(tensors_equal(m.heads.at("G").weight, original.heads.at("G").weight));
        CHECK(!tensors_equal(m.heads.at("D").weight, original.heads.at("D").weight));
    }
}

TEST_CASE("sgd applies p - lr*g elementwise") {
    nn::BaseModel m = nn::init_model(kSmall, 5);
    m.heads.at("D").weight.fill(1.0);
    nn::GradientSet g;
    g.tok_embedding = Tensor(m.tok_embedding.shape);
    g.pos_embedding = Tensor(m.pos_embedding.shape);
    g.blocks.assign(2, nn::BlockParams::zeros(kSmall));
    g.heads.emplace("D", nn::HeadParams::zeros(kSmall));
    g.heads.emplace("G", nn::HeadParams::zeros(kSmall));
    g.heads.at("D").weight.fill(0.5);

    nn::apply_sgd(m, g, 0.1, nn::TrainableMask::head_only(kSmall, "D"));
    for (double v : m.heads.at("D").weight.data) {
        CHECK(v == doctest::Approx(0.95).epsilon(1e-15));
    }
}

TEST_CASE("block gradient norms") {
    nn::GradientSet g;
    g.blocks.assign(3, nn::BlockParams::zeros(kSmall));

    SUBCASE("all-zero gradients give all-zero norms") {
        const auto norms = nn::block_grad_norms(g);
        REQUIRE(norms.size() == 3);
        for (double n : norms) CHECK(n == 0.0);
    }
    SUBCASE("a 3-4 block gives norm 5") {
        g.blocks[1].w_q.data[0] = 3.0;
        g.blocks[1].w_ff2.data[2] = 4.0;
        const auto norms = nn::block_grad_norms(g);
        CHECK(norms[0] == 0.0);
        CHECK(norms[1] == doctest::Approx(5.0).epsilon(1e-15));
        CHECK(norms[2] == 0.0);
    }
}

TEST_CASE("evaluation semantics") {
    auto [g_spec, d_spec] = datagen::make_task_pair("G", "D", 32, 8, 3, 2, 0.3, 1);

    SUBCASE("empty dataset is an input error") {
        const nn::BaseModel m = nn::init_model(kSmall, 1);
        datagen::LabeledDataset empty;
        empty.num_classes = 3;
        CHECK_THROWS_AS(nn::evaluate(m, empty, "D"), InputError);
    }
    SUBCASE("one correct and one incorrect prediction give 0.5") {
        nn::BaseModel m = nn::init_model(kSmall, 1);
        m.heads.at("D").weight.fill(0.0);
        m.heads.at("D").bias.data = {1.0, 0.0, 0.0};  // always predicts class 0
        datagen::LabeledDataset ds;
        ds.num_classes = 3;
        ds.vocab_size = 32;
        ds.seq_len = 8;
        datagen::Example a, b;
        a.tokens.assign(8, 1);
        a.label = 0;
        b.tokens.assign(8, 1);
        b.label = 1;
        ds.examples = {a, b};
        CHECK(nn::evaluate(m, ds, "D") == 0.5);
    }
    SUBCASE("argmax ties break to the lowest class") {
        nn::BaseModel m = nn::init_model(kSmall, 1);
        m.heads.at("D").weight.fill(0.0);
        m.heads.at("D").bias.fill(0.0);  // all logits equal
        datagen::LabeledDataset ds;
        ds.num_classes = 3;
        ds.vocab_size = 32;
        ds.seq_len = 8;
        datagen::Example e;
        e.tokens.assign(8, 2);
        e.label = 0;
        ds.examples = {e};
        CHECK(nn::evaluate(m, ds, "D") == 1.0);
        ds.examples[0].label = 1;
        CHECK(nn::evaluate(m, ds, "D") == 0.0);
    }
    SUBCASE("a fresh model scores chance on a balanced test set") {
        nn::ModelSpec spec{4, 32, 4, 128, 64, 16, 4};
        const nn::BaseModel m = nn::init_model(spec, 77);
        auto [tg, td] = datagen::make_task_pair("G", "D", 64, 16, 4, 4, 0.3, 2);
        const datagen::TaskData data = datagen::gen_task(td, 2500, 9);
        const double acc = nn::evaluate(m, data.test, "D");  // 500 examples
        CHECK(acc >= 0.25 - 0.05);
        CHECK(acc <= 0.25 + 0.05);
    }
}

TEST_CASE("two hundred sgd steps overfit a single batch") {
    nn::BaseModel m = nn::init_model(kSmall, 21);
    const nn::TokenBatch batch = random_batch(kSmall, 8, 8, 31);
    const std::vector<int> labels = random_labels(kSmall, 8, 32);
    const nn::TrainableMask mask = nn::TrainableMask::full(kSmall, "D");
    double loss = 0.0;
    for (int step = 0; step < 200; ++step) {
        const auto lg = nn::loss_and_backward(m, batch, labels, "D");
        loss = lg.loss;
        nn::apply_sgd(m, lg.grads, 0.05, mask);
    }
    CHECK(loss < 0.05);
}

TEST_CASE("identical training sequences give bit-identical parameters") {
    auto train_once = [] {
        nn::BaseModel m = nn::init_model(kSmall, 77);
        const nn::TrainableMask mask = nn::TrainableMask::full(kSmall, "D");
        for (int step = 0; step < 10; ++step) {
            const nn::TokenBatch batch = random_batch(kSmall, 4, 8, 100 + step);
            const std::vector<int> labels = random_labels(kSmall, 4, 200 + step);
            const auto lg = nn::loss_and_backward(m, batch, labels, "D");
            nn::apply_sgd(m, lg.grads, 0.05, mask);
        }
        return m;
    };
    CHECK(params_bitwise_equal(train_once(), train_once()));
}
