#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fedbe/config.hpp"
#include "fedbe/datagen.hpp"
#include "fedbe/expansion.hpp"

namespace fedbe::fed {

enum class Method { FedBE, FullFT, HeadOnly, FedBEStatic, FedBEUniformPos };

Method method_from_string(const std::string& s);  // throws ConfigError
const char* to_string(Method m);
bool uses_expansion(Method m);

struct ClientProfile {
    int id = 0;
    double alpha = 0.1;               // Dirichlet concentration of this shard
    double resource_score = 1.0;      // R_i
    std::vector<double> mode_rates;   // FLOPs/s per operating mode
    double bandwidth = 1e7;           // bytes/s
    std::size_t sample_count = 0;     // n_m
};

struct ClientState {
    std::map<int, long> train_counts;   // expanded position -> times trained
    std::optional<double> last_time;    // compute seconds of the previous round
    std::size_t current_mode = 0;
    std::set<int> assigned;
    datagen::LabeledDataset shard;
};

enum class ScoreMode { Verbatim, ProseAffinity };
enum class DNormMode { Verbatim, MinMax };

ScoreMode score_mode_from_string(const std::string& s);
DNormMode d_norm_mode_from_string(const std::string& s);

struct ScoringWeights {
    double w_d = 0.5;
    double w_t = 0.3;
    double w_r = 0.2;
    ScoreMode score_mode = ScoreMode::Verbatim;
    DNormMode d_norm_mode = DNormMode::MinMax;

    void validate() const;  // w_d + w_t + w_r == 1 within 1e-12
};

// Splits the dataset across clients: client m draws class weights
// p_m ~ Dir(alpha_m * 1_K) and every sample of class c lands on client m with
// probability proportional to p_{m,c}. Each sample is assigned exactly once.
// `alphas` holds one value (broadcast) or one per client.
std::vector<datagen::LabeledDataset> partition_dirichlet(
    const datagen::LabeledDataset& dataset, std::size_t num_clients,
    const std::vector<double>& alphas, std::uint64_t seed);

// D_i = -log(alpha_i + 1e-6); strictly decreasing in alpha.
double heterogeneity(double alpha);

struct ScoreInputs {
    std::vector<int> positions;   // plan positions (1-based)
    std::size_t num_blocks = 0;   // L, for position normalization
    double d_i = 0.0;             // this client's heterogeneity
    double d_min = 0.0, d_max = 0.0;  // over all clients
    double r_i = 1.0, r_max = 1.0;
    const std::map<int, long>* train_counts = nullptr;
};

// Per-position priority score T(l): heterogeneity term (per d_norm_mode, or
// the prose-affinity position preference), training-history term
// T_{i,l} / (1 + sum T_{i,l'}), and resource term R_i / max R.
std::map<int, double> priority_scores(const ScoreInputs& in, const ScoringWeights& w);

// The `size` positions with highest score; ties to the lowest position.
std::set<int> assign_blocks(const std::map<int, double>& scores, std::size_t size);

// Round 0 (no previous time) assigns all k blocks; afterwards
// clamp(floor(tau / T_prev), 1, k). T_prev == 0 counts as fastest: k.
std::size_t adjust_task_size(double tau, std::optional<double> prev_seconds, std::size_t k);

// Every 20th round each client redraws its operating mode uniformly from its
// own seeded stream; other rounds leave modes untouched.
void mode_switch(std::size_t round, const std::vector<ClientProfile>& profiles,
                 std::vector<ClientState>& states, std::uint64_t seed);

struct TrainOptions {
    double lr = 0.05;
    double momentum = 0.0;
    std::size_t epochs = 1;
    std::size_t batch_size = 32;
};

struct LocalTrainResult {
    bool skipped = false;
    std::map<std::string, Tensor> delta;  // uploaded param id -> trained - global
    double compute_seconds = 0.0;
    std::uint64_t upload_bytes = 0;
    std::size_t samples = 0;
};

// Trains a working copy of the global model under `mask` for the configured
// epochs over the client shard (seeded batch order). Uploads exactly the
// mask-trainable tensors as deltas. Compute time is 3x the forward FLOPs of
// the base plus assigned expanded blocks over all processed sequences,
// divided by the current mode's rate; upload is 8 bytes per parameter.
LocalTrainResult local_train(const expansion::ExpandedModel& global,
                             const ClientProfile& profile, const ClientState& state,
                             const nn::TrainableMask& mask, const std::string& task,
                             const TrainOptions& opt, std::uint64_t seed);

// Visits base parameters plus expanded blocks ("expanded/<pos>/<name>").
template <typename ModelT, typename F>
void for_each_param_expanded(ModelT& m, F&& f) {
    nn::for_each_param(m.base, f);
    for (auto& [pos, block] : m.expanded) {
        nn::for_each_block_tensor(block, [&](const char* name, auto& t) {
            f("expanded/" + std::to_string(pos) + "/" + name, t);
        });
    }
}

// Weighted-mean aggregation, Eq-1 style, restricted per parameter to the
// clients that uploaded it: theta <- sum_m n_m / (sum n) * (theta + delta_m).
// Clients are folded in ascending id order. Returns false when no delta
// covered anything (global state unchanged).
bool aggregate(expansion::ExpandedModel& global,
               const std::vector<std::pair<int, const std::map<std::string, Tensor>*>>& deltas,
               const std::map<int, std::size_t>& samples_of_client);

struct ClientRoundStats {
    int id = 0;
    bool skipped = false;
    std::vector<int> assigned;  // sorted positions
    double compute_seconds = 0.0;
    double upload_seconds = 0.0;
    std::size_t samples = 0;
};

struct RoundRecord {
    std::size_t round = 0;
    std::vector<ClientRoundStats> clients;
    double wall_clock_seconds = 0.0;  // max over participants of compute+upload
    double downstream_accuracy = 0.0;
    bool aggregated = true;
};

// One federated experiment: the server model, client population, and the
// per-round protocol (mode switch, task sizing, scoring, assignment, local
// training, aggregation, bookkeeping, evaluation).
class FederationRun {
public:
    FederationRun(const ExperimentConfig& cfg, expansion::ExpandedModel global,
                  expansion::ExpansionPlan plan, std::vector<ClientProfile> profiles,
                  std::vector<ClientState> states, datagen::LabeledDataset downstream_test);

    RoundRecord run_round();

    const expansion::ExpandedModel& model() const { return global_; }
    const std::vector<ClientState>& states() const { return states_; }
    const expansion::ExpansionPlan& plan() const { return plan_; }
    std::size_t round() const { return round_; }

private:
    ExperimentConfig cfg_;
    Method method_;
    expansion::ExpandedModel global_;
    expansion::ExpansionPlan plan_;
    ScoringWeights scoring_;
    std::vector<ClientProfile> profiles_;
    std::vector<ClientState> states_;
    datagen::LabeledDataset test_;
    std::size_t round_ = 0;
};

// Everything run_experiment sets up before the first round: generated tasks,
// the pretrained global model with its expansion plan, and the client
// population with partitioned shards.
struct ExperimentEnv {
    datagen::TaskData general_data;
    datagen::TaskData downstream_data;
    std::size_t pretrain_steps = 0;
    double acc_general_before = 0.0;
    expansion::ExpansionPlan plan;
    expansion::ExpandedModel global;
    std::vector<ClientProfile> profiles;
    std::vector<ClientState> states;
};

ExperimentEnv prepare_experiment(const ExperimentConfig& cfg);

// Full pipeline: generate both tasks, init the model, centrally pretrain the
// general head to the configured target, partition the downstream task,
// federate for the configured rounds, and measure forgetting against the
// untouched general head.
MetricsSeries run_experiment(const ExperimentConfig& cfg);

// Central pretraining helper; returns the steps used. Throws RunError when
// the accuracy target is out of reach within the step budget.
std::size_t pretrain_to_target(nn::BaseModel& model, const datagen::TaskData& data,
                               const std::string& task, const PretrainConfig& cfg,
                               double fallback_lr, std::size_t batch_size,
                               std::uint64_t seed);

} // namespace fedbe::fed
