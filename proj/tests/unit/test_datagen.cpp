#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "fedbe/datagen.hpp"
#include "fedbe/errors.hpp"

using namespace fedbe;
using namespace fedbe::datagen;

namespace {

SyntheticTaskSpec default_spec(double density = 0.3) {
    auto [g, d] = make_task_pair("G", "D", 64, 16, 4, 4, density, 1);
    return g;
}

} // namespace

TEST_CASE("generation is deterministic and splits 80/20") {
    const SyntheticTaskSpec spec = default_spec();
    const TaskData a = gen_task(spec, 1000, 7);
    const TaskData b = gen_task(spec, 1000, 7);
    CHECK(a.train.size() == 800);
    CHECK(a.test.size() == 200);
    REQUIRE(a.train.size() == b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train.examples[i].tokens == b.train.examples[i].tokens);
        CHECK(a.train.examples[i].label == b.train.examples[i].label);
    }
    const TaskData c = gen_task(spec, 1000, 8);
    bool differs = false;
    for (std::size_t i = 0; i < a.train.size() && !differs; ++i) {
        differs = a.train.examples[i].tokens != c.train.examples[i].tokens ||
                  a.train.examples[i].label != c.train.examples[i].label;
    }
    CHECK(differs);
}

TEST_CASE("tokens stay inside the vocabulary and classes stay balanced") {
    const SyntheticTaskSpec spec = default_spec();
    const TaskData data = gen_task(spec, 10000, 3);
    std::vector<std::size_t> counts(4, 0);
    for (const auto* ds : {&data.train, &data.test}) {
        for (const Example& ex : ds->examples) {
            for (std::int32_t t : ex.tokens) {
                CHECK(t >= 0);
                CHECK(static_cast<std::size_t>(t) < spec.vocab_size);
            }
            counts[static_cast<std::size_t>(ex.label)]++;
        }
    }
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(static_cast<double>(counts[c]) > 2500 * 0.95);
        CHECK(static_cast<double>(counts[c]) < 2500 * 1.05);
    }
}

TEST_CASE("bayes oracle certifies the default task") {
    const SyntheticTaskSpec spec = default_spec();
    const TaskData data = gen_task(spec, 4000, 5);
    CHECK(bayes_oracle(data.test, spec) >= 0.99);
    CHECK(bayes_oracle(data.train, spec) >= 0.99);
}

TEST_CASE("bayes oracle drops to chance with no signal") {
    const SyntheticTaskSpec spec = default_spec(0.0);
    const TaskData data = gen_task(spec, 4000, 5);
    const double acc = bayes_oracle(data.test, spec);
    CHECK(acc > 0.15);
    CHECK(acc < 0.35);
}

TEST_CASE("bayes oracle is exact on a single-class dataset with markers") {
    const SyntheticTaskSpec spec = default_spec();
    LabeledDataset ds;
    ds.task_id = spec.task_id;
    ds.vocab_size = spec.vocab_size;
    ds.num_classes = spec.num_classes;
    ds.seq_len = spec.seq_len;
    for (int i = 0; i < 10; ++i) {
        Example ex;
        ex.label = 2;
        ex.tokens.assign(spec.seq_len, spec.marker_sets[2][0]);
        ds.examples.push_back(ex);
    }
    CHECK(bayes_oracle(ds, spec) == 1.0);
}

TEST_CASE("label histograms count exactly and add up") {
    const SyntheticTaskSpec spec = default_spec();
    const TaskData data = gen_task(spec, 1000, 9);

    LabeledDataset empty;
    empty.num_classes = 4;
    CHECK(label_histogram(empty) == std::vector<std::size_t>(4, 0));

    const auto train_h = label_histogram(data.train);
    const auto test_h = label_histogram(data.test);
    std::size_t total = 0;
    for (std::size_t c = 0; c < 4; ++c) total += train_h[c] + test_h[c];
    CHECK(total == 1000);

    // union histogram equals the per-split histograms recombined
    LabeledDataset all = data.train;
    all.examples.insert(all.examples.end(), data.test.examples.begin(),
                        data.test.examples.end());
    const auto all_h = label_histogram(all);
    for (std::size_t c = 0; c < 4; ++c) CHECK(all_h[c] == train_h[c] + test_h[c]);
}

TEST_CASE("task pairs keep marker sets disjoint") {
    auto [g, d] = make_task_pair("G", "D", 64, 16, 4, 4, 0.3, 1);
    for (const auto& gs : g.marker_sets) {
        for (std::int32_t t : gs) {
            for (const auto& ds : d.marker_sets) {
                for (std::int32_t u : ds) CHECK(t != u);
            }
        }
    }
    CHECK(g.noise_pool == d.noise_pool);
}

TEST_CASE("spec violations are rejected") {
    SyntheticTaskSpec bad = default_spec();
    bad.marker_sets[1][0] = bad.marker_sets[0][0];  // overlap
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    SyntheticTaskSpec tight = default_spec();
    tight.vocab_size = 20;  // 16 markers + 48 noise tokens no longer fit
    CHECK_THROWS_AS(tight.validate(), ConfigError);

    CHECK_THROWS_AS(gen_task(default_spec(), 5, 1), ConfigError);
}

TEST_CASE("jsonl round trip preserves examples") {
    const SyntheticTaskSpec spec = default_spec();
    const TaskData data = gen_task(spec, 200, 2);
    const std::string path =
        (std::filesystem::temp_directory_path() / "fedbe_test_data.jsonl").string();
    write_jsonl(data.test, path);
    const LabeledDataset back = read_jsonl(path, spec.task_id, spec.vocab_size, 4);
    REQUIRE(back.size() == data.test.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back.examples[i].tokens == data.test.examples[i].tokens);
        CHECK(back.examples[i].label == data.test.examples[i].label);
    }
    std::filesystem::remove(path);
}
