#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace fedbe::datagen {

// Seeded synthetic classification task. Each class owns a disjoint set of
// marker tokens; every sequence position emits a marker of the true class
// with probability `marker_density`, otherwise a token from the shared noise
// pool. The Bayes-optimal rule (majority marker-set membership) is known, so
// learnability can be certified before any model training.
struct SyntheticTaskSpec {
    std::string task_id;
    std::size_t vocab_size = 0;   // V
    std::size_t seq_len = 0;      // T
    std::size_t num_classes = 0;  // K
    std::vector<std::vector<std::int32_t>> marker_sets;  // K disjoint sets
    std::vector<std::int32_t> noise_pool;
    double marker_density = 0.0;
    std::uint64_t seed = 0;

    void validate() const;  // throws ConfigError
};

struct Example {
    std::vector<std::int32_t> tokens;
    int label = 0;
};

struct LabeledDataset {
    std::vector<Example> examples;
    // provenance
    std::string task_id;
    std::size_t vocab_size = 0;
    std::size_t num_classes = 0;
    std::size_t seq_len = 0;
    std::uint64_t seed = 0;

    std::size_t size() const { return examples.size(); }
    bool empty() const { return examples.empty(); }
};

struct TaskData {
    LabeledDataset train;
    LabeledDataset test;
};

// Generates n examples from spec, deterministically given (spec, n, seed),
// split 80/20 into train/test. Requires n >= 10*K.
TaskData gen_task(const SyntheticTaskSpec& spec, std::size_t n, std::uint64_t seed);

// Majority marker-set membership classifier (ties -> lowest class). Returns
// its accuracy on the dataset; certifies the task is solvable.
double bayes_oracle(const LabeledDataset& data, const SyntheticTaskSpec& spec);

// Exact per-class counts; length K.
std::vector<std::size_t> label_histogram(const LabeledDataset& shard);

// How the two tasks' noise pools cover the vocabulary. Exclusive: both draw
// noise from the region outside every marker set, so neither task's data ever
// contains the other's markers. CrossTask: each task draws noise from the
// whole vocabulary minus its own markers, so the other task's marker tokens
// appear as (label-irrelevant) noise; fine-tuning on one task then actively
// retunes the embeddings the other task classifies by. DownstreamCross is the
// asymmetric middle ground: the first (general) task keeps the exclusive
// pool, the second (downstream) task sees the general markers as noise, so
// downstream full fine-tuning drags the general task's features around while
// the downstream task itself stays cleanly learnable.
enum class NoiseLayout { Exclusive, CrossTask, DownstreamCross };

NoiseLayout noise_layout_from_string(const std::string& s);
const char* to_string(NoiseLayout layout);

// Two tasks over one vocabulary with pairwise-disjoint marker sets: markers
// for `first` occupy tokens [0, K*m), markers for `second` occupy
// [K*m, 2*K*m); noise pools per `layout`.
std::pair<SyntheticTaskSpec, SyntheticTaskSpec> make_task_pair(
    const std::string& first_id, const std::string& second_id,
    std::size_t vocab_size, std::size_t seq_len, std::size_t num_classes,
    std::size_t markers_per_class, double marker_density, std::uint64_t seed,
    NoiseLayout layout = NoiseLayout::Exclusive,
    std::optional<double> second_density = std::nullopt);

// One JSON object per line: {"tokens": [...], "label": int}.
void write_jsonl(const LabeledDataset& data, const std::string& path);
LabeledDataset read_jsonl(const std::string& path, const std::string& task_id,
                          std::size_t vocab_size, std::size_t num_classes);

} // namespace fedbe::datagen
