#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedbe/expansion.hpp"
#include "fedbe/nn.hpp"

namespace fedbe {

// One simulated device class: compute rates per operating mode (FLOPs/s),
// an abstract resource score, and an upload bandwidth. Clients cycle through
// the configured device list.
struct DeviceProfileConfig {
    double resource_score = 1.0;
    std::vector<double> mode_rates = {2e8};
    double bandwidth = 1e7;  // bytes/s
    std::size_t initial_mode = 0;

    bool operator==(const DeviceProfileConfig&) const = default;
};

// The two synthetic tasks share one vocabulary; their marker sets are
// disjoint, so downstream training signal says nothing about the general task.
struct TaskPairConfig {
    std::string general_id = "G";
    std::string downstream_id = "D";
    std::size_t vocab_size = 64;
    std::size_t seq_len = 16;
    std::size_t num_classes = 4;
    std::size_t markers_per_class = 4;
    double marker_density = 0.3;
    std::optional<double> downstream_marker_density;  // defaults to marker_density
    std::size_t examples_per_task = 2000;
    std::string noise_layout = "exclusive";  // or "cross-task", "downstream-cross"

    bool operator==(const TaskPairConfig&) const = default;
};

struct ExpansionConfig {
    std::optional<std::size_t> k;                     // explicit count ...
    std::optional<expansion::BudgetSpec> budget;      // ... or budget-derived
    double lambda = 0.5;
    std::string zero_init_policy = "output-proj";
    std::string expand_input = "branch";
    std::size_t proxy_examples = 256;
    std::size_t proxy_steps = 8;
    std::optional<double> proxy_lr;                   // defaults to the run lr

    bool operator==(const ExpansionConfig&) const = default;
};

struct ScoringConfig {
    double w_d = 0.5;
    double w_t = 0.3;
    double w_r = 0.2;
    std::string score_mode = "verbatim";    // or "prose-affinity"
    std::string d_norm_mode = "minmax";     // or "verbatim"

    bool operator==(const ScoringConfig&) const = default;
};

struct PretrainConfig {
    double target_accuracy = 0.90;
    std::size_t max_steps = 4000;
    std::size_t eval_every = 25;
    std::optional<double> lr;  // defaults to the run lr

    bool operator==(const PretrainConfig&) const = default;
};

struct ExperimentConfig {
    nn::ModelSpec model{4, 32, 4, 128, 64, 16, 4};
    TaskPairConfig tasks;
    std::size_t clients = 8;
    std::vector<double> alpha = {0.1};  // one value broadcast, or one per client
    std::size_t rounds = 50;
    std::string method = "fedbe";
    ExpansionConfig expansion;
    ScoringConfig scoring;
    double tau = 30.0;  // global target training time, simulated seconds
    double lr = 2e-5;
    double momentum = 0.0;
    std::size_t epochs_per_round = 1;
    std::size_t batch_size = 32;
    std::vector<DeviceProfileConfig> devices = {DeviceProfileConfig{}};
    double selection_fraction = 1.0;
    double target_accuracy = 0.90;  // for the time-to-target summary metric
    PretrainConfig pretrain;
    std::uint64_t seed = 1;

    void validate() const;  // throws ConfigError
    double alpha_of(std::size_t client) const;
    const DeviceProfileConfig& device_of(std::size_t client) const;

    bool operator==(const ExperimentConfig&) const = default;
};

// JSON round trip. Parsing applies the optional "preset" first ("toy" is the
// desk-scale setup: 4-block d=32 model, lr 0.05), then explicit fields.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);
std::string serialize_config(const ExperimentConfig& cfg);
void apply_preset(ExperimentConfig& cfg, const std::string& name);

// Per-round trajectory plus the final forgetting readout of one experiment.
struct MetricsSeries {
    std::string method;
    std::vector<double> accuracy;              // downstream test accuracy
    std::vector<double> cumulative_seconds;    // simulated wall clock
    std::vector<double> mean_assignment_size;  // mean |E_i| over clients
    double acc_general_before = 0.0;
    double acc_general_after = 0.0;         // base path for expansion methods
    double acc_general_after_active = 0.0;  // expanded blocks active
    double forgetting = 0.0;                // acc_before - acc_after
    double forgetting_active = 0.0;
    double final_downstream_accuracy = 0.0;
    double target_accuracy = 0.0;
    std::size_t pretrain_steps = 0;

    // first round whose accuracy reached target_accuracy, with the cumulative
    // seconds at that round; unset when the target was never reached
    std::optional<std::size_t> time_to_target_round;
    std::optional<double> time_to_target_seconds;

    std::size_t rounds() const { return accuracy.size(); }
};

} // namespace fedbe
