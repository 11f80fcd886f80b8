#include "fedbe/federation.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>

#include "fedbe/errors.hpp"
#include "fedbe/nn_internal.hpp"
#include "fedbe/rng.hpp"

namespace fedbe::fed {

Method method_from_string(const std::string& s) {
    if (s == "fedbe") return Method::FedBE;
    if (s == "full_ft") return Method::FullFT;
    if (s == "head_only") return Method::HeadOnly;
    if (s == "fedbe_static") return Method::FedBEStatic;
    if (s == "fedbe_uniform_pos") return Method::FedBEUniformPos;
    throw ConfigError("unknown method: " + s);
}

const char* to_string(Method m) {
    switch (m) {
        case Method::FedBE: return "fedbe";
        case Method::FullFT: return "full_ft";
        case Method::HeadOnly: return "head_only";
        case Method::FedBEStatic: return "fedbe_static";
        case Method::FedBEUniformPos: return "fedbe_uniform_pos";
    }
    return "?";
}

bool uses_expansion(Method m) {
    return m == Method::FedBE || m == Method::FedBEStatic || m == Method::FedBEUniformPos;
}

ScoreMode score_mode_from_string(const std::string& s) {
    if (s == "verbatim") return ScoreMode::Verbatim;
    if (s == "prose-affinity") return ScoreMode::ProseAffinity;
    throw ConfigError("unknown score_mode: " + s);
}

DNormMode d_norm_mode_from_string(const std::string& s) {
    if (s == "verbatim") return DNormMode::Verbatim;
    if (s == "minmax") return DNormMode::MinMax;
    throw ConfigError("unknown d_norm_mode: " + s);
}

void ScoringWeights::validate() const {
    if (std::abs(w_d + w_t + w_r - 1.0) > 1e-12) {
        throw ConfigError("scoring weights must sum to 1");
    }
    if (w_d < 0.0 || w_t < 0.0 || w_r < 0.0) {
        throw ConfigError("scoring weights must be non-negative");
    }
}

std::vector<datagen::LabeledDataset> partition_dirichlet(
    const datagen::LabeledDataset& dataset, std::size_t num_clients,
    const std::vector<double>& alphas, std::uint64_t seed) {
    if (num_clients < 1) throw InputError("partition: need at least one client");
    if (num_clients > dataset.size()) {
        throw InputError("partition: more clients than samples");
    }
    if (alphas.size() != 1 && alphas.size() != num_clients) {
        throw ConfigError("partition: alpha must be scalar or one per client");
    }
    for (double a : alphas) {
        if (!(a > 0.0)) throw InputError("partition: alpha must be positive");
    }
    const std::size_t num_classes = dataset.num_classes;

    // class weights per client
    Rng prior_rng = substream(seed, "partition/priors");
    std::vector<std::vector<double>> p(num_clients);
    for (std::size_t m = 0; m < num_clients; ++m) {
        const double a = alphas.size() == 1 ? alphas[0] : alphas[m];
        p[m] = prior_rng.dirichlet(a, num_classes);
    }

    std::vector<datagen::LabeledDataset> shards(num_clients);
    for (auto& s : shards) {
        s.task_id = dataset.task_id;
        s.vocab_size = dataset.vocab_size;
        s.num_classes = dataset.num_classes;
        s.seq_len = dataset.seq_len;
        s.seed = dataset.seed;
    }

    // categorical draw per sample, weights proportional to the sample's class
    // column across clients
    Rng assign_rng = substream(seed, "partition/assign");
    std::vector<double> weights(num_clients);
    for (const datagen::Example& ex : dataset.examples) {
        const std::size_t c = static_cast<std::size_t>(ex.label);
        for (std::size_t m = 0; m < num_clients; ++m) weights[m] = p[m][c];
        const std::size_t m = assign_rng.categorical(weights);
        shards[m].examples.push_back(ex);
    }
    return shards;
}

double heterogeneity(double alpha) {
    if (!(alpha > 0.0)) throw InputError("heterogeneity: alpha must be positive");
    return -std::log(alpha + 1e-6);
}

std::map<int, double> priority_scores(const ScoreInputs& in, const ScoringWeights& w) {
    if (!(in.r_max > 0.0)) throw InputError("priority_scores: max resource score must be positive");

    long count_sum = 0;
    if (in.train_counts) {
        for (const auto& [_, c] : *in.train_counts) count_sum += c;
    }

    // the heterogeneity share of the score; constant across layers except in
    // prose-affinity mode
    const double h_minmax = (in.d_i - in.d_min) / (in.d_max - in.d_min + 1e-12);
    double d_term_const = 0.0;
    if (w.score_mode == ScoreMode::Verbatim) {
        if (w.d_norm_mode == DNormMode::Verbatim) {
            d_term_const = in.d_max != 0.0 ? in.d_i / in.d_max : 0.0;
        } else {
            d_term_const = h_minmax;
        }
    }

    std::map<int, double> scores;
    for (int pos : in.positions) {
        double d_term = d_term_const;
        if (w.score_mode == ScoreMode::ProseAffinity) {
            // low-heterogeneity clients prefer positions near the input end,
            // high-heterogeneity clients the output end
            const double rel = static_cast<double>(pos) / static_cast<double>(in.num_blocks);
            d_term = (1.0 - h_minmax) * (1.0 - rel) + h_minmax * rel;
        }
        long count = 0;
        if (in.train_counts) {
            auto it = in.train_counts->find(pos);
            if (it != in.train_counts->end()) count = it->second;
        }
        const double t_term = static_cast<double>(count) / (1.0 + static_cast<double>(count_sum));
        const double r_term = in.r_i / in.r_max;
        scores[pos] = w.w_d * d_term + w.w_t * t_term + w.w_r * r_term;
    }
    return scores;
}

std::set<int> assign_blocks(const std::map<int, double>& scores, std::size_t size) {
    if (size < 1 || size > scores.size()) throw InputError("assign_blocks: size out of range");
    std::vector<std::pair<int, double>> order(scores.begin(), scores.end());
    std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::set<int> out;
    for (std::size_t i = 0; i < size; ++i) out.insert(order[i].first);
    return out;
}

std::size_t adjust_task_size(double tau, std::optional<double> prev_seconds, std::size_t k) {
    if (!(tau > 0.0)) throw InputError("adjust_task_size: tau must be positive");
    if (k < 1) throw InputError("adjust_task_size: k must be >= 1");
    if (!prev_seconds.has_value()) return k;   // initial stage: everyone gets all blocks
    if (*prev_seconds == 0.0) return k;        // previous round cost nothing
    const double raw = std::floor(tau / *prev_seconds);
    if (raw < 1.0) return 1;
    if (raw > static_cast<double>(k)) return k;
    return static_cast<std::size_t>(raw);
}

void mode_switch(std::size_t round, const std::vector<ClientProfile>& profiles,
                 std::vector<ClientState>& states, std::uint64_t seed) {
    if (round == 0 || round % 20 != 0) return;
    for (std::size_t i = 0; i < states.size(); ++i) {
        Rng rng = substream(seed, "mode_switch", static_cast<std::uint64_t>(profiles[i].id), round);
        states[i].current_mode = rng.bounded(profiles[i].mode_rates.size());
    }
}

namespace {

bool mask_covers(const nn::TrainableMask& mask, const std::string& id) {
    if (id.rfind("emb/", 0) == 0) return mask.embeddings;
    if (id.rfind("block/", 0) == 0) {
        const std::size_t l = std::stoul(id.substr(6));
        return l < mask.blocks.size() && mask.blocks[l];
    }
    if (id.rfind("expanded/", 0) == 0) {
        const int pos = std::stoi(id.substr(9));
        return mask.expanded.count(pos) > 0;
    }
    if (id.rfind("head/", 0) == 0) {
        const std::string task = id.substr(5, id.rfind('/') - 5);
        return mask.heads.count(task) > 0;
    }
    return false;
}

// v <- momentum * v + g over every tensor
void momentum_update(nn::GradientSet& v, double momentum, const nn::GradientSet& g) {
    auto axpy = [&](Tensor& a, const Tensor& b) {
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            a.data[i] = momentum * a.data[i] + b.data[i];
        }
    };
    axpy(v.tok_embedding, g.tok_embedding);
    axpy(v.pos_embedding, g.pos_embedding);
    for (std::size_t l = 0; l < v.blocks.size(); ++l) {
        nn::zip_block_tensors(v.blocks[l], g.blocks[l],
                              [&](Tensor& a, const Tensor& b) { axpy(a, b); });
    }
    for (auto& [pos, block] : v.expanded) {
        nn::zip_block_tensors(block, g.expanded.at(pos),
                              [&](Tensor& a, const Tensor& b) { axpy(a, b); });
    }
    for (auto& [task, head] : v.heads) {
        axpy(head.weight, g.heads.at(task).weight);
        axpy(head.bias, g.heads.at(task).bias);
    }
}

} // namespace

LocalTrainResult local_train(const expansion::ExpandedModel& global,
                             const ClientProfile& profile, const ClientState& state,
                             const nn::TrainableMask& mask, const std::string& task,
                             const TrainOptions& opt, std::uint64_t seed) {
    LocalTrainResult res;
    if (state.shard.empty()) {
        res.skipped = true;
        return res;
    }
    res.samples = state.shard.size();

    expansion::ExpandedModel work = global;
    const std::size_t batch_size = std::min(opt.batch_size, state.shard.size());
    std::vector<std::size_t> order(state.shard.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::set<int> active;  // the client computes with its assigned blocks only
    for (int pos : mask.expanded) active.insert(pos);

    nn::GradientSet velocity;
    const bool use_momentum = opt.momentum > 0.0;
    if (use_momentum) {
        nn::detail::ExpansionView view;
        view.blocks = &work.expanded;
        velocity = nn::detail::make_zero_grads(work.base, &view);
    }

    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        Rng rng = substream(seed, "batch", epoch);
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += batch_size) {
            const std::size_t end = std::min(order.size(), start + batch_size);
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
            const nn::TokenBatch batch = nn::TokenBatch::from_examples(state.shard.examples, idx);
            std::vector<int> labels(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) {
                labels[i] = state.shard.examples[idx[i]].label;
            }
            nn::LossAndGrads lg =
                expansion::loss_and_backward_expanded(work, batch, labels, task, active, &mask);
            if (use_momentum) {
                momentum_update(velocity, opt.momentum, lg.grads);
                expansion::apply_sgd(work, velocity, opt.lr, mask);
            } else {
                expansion::apply_sgd(work, lg.grads, opt.lr, mask);
            }
        }
    }

    // uploaded delta: exactly the mask-trainable tensors
    std::map<std::string, const Tensor*> trained, base;
    for_each_param_expanded(work, [&](const std::string& id, const Tensor& t) {
        trained.emplace(id, &t);
    });
    for_each_param_expanded(global, [&](const std::string& id, const Tensor& t) {
        base.emplace(id, &t);
    });
    std::uint64_t uploaded_params = 0;
    for (const auto& [id, t] : trained) {
        if (!mask_covers(mask, id)) continue;
        Tensor d = *t;
        d -= *base.at(id);
        uploaded_params += d.size();
        res.delta.emplace(id, std::move(d));
    }

    // timing: 3x forward cost over base + assigned expanded blocks
    const std::size_t blocks_run = global.base.spec.num_blocks + active.size();
    const std::uint64_t per_seq =
        expansion::flops_estimate(global.base.spec, blocks_run, state.shard.seq_len);
    const double total_flops = 3.0 * static_cast<double>(per_seq) *
                               static_cast<double>(opt.epochs * state.shard.size());
    const double rate = profile.mode_rates.at(state.current_mode);
    res.compute_seconds = total_flops / rate;
    res.upload_bytes = 8 * uploaded_params;
    return res;
}

bool aggregate(expansion::ExpandedModel& global,
               const std::vector<std::pair<int, const std::map<std::string, Tensor>*>>& deltas,
               const std::map<int, std::size_t>& samples_of_client) {
    std::map<std::string, Tensor*> params;
    for_each_param_expanded(global, [&](const std::string& id, Tensor& t) {
        params.emplace(id, &t);
    });

    // participants per parameter id, in ascending client order
    std::vector<std::pair<int, const std::map<std::string, Tensor>*>> sorted = deltas;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    std::map<std::string, std::vector<std::pair<int, const Tensor*>>> by_id;
    for (const auto& [client, delta] : sorted) {
        for (const auto& [id, t] : *delta) by_id[id].emplace_back(client, &t);
    }

    bool any = false;
    for (const auto& [id, participants] : by_id) {
        auto it = params.find(id);
        if (it == params.end()) throw InputError("aggregate: unknown parameter " + id);
        double total = 0.0;
        for (const auto& [client, _] : participants) {
            total += static_cast<double>(samples_of_client.at(client));
        }
        if (total <= 0.0) continue;
        Tensor& theta = *it->second;
        Tensor next(theta.shape);
        for (const auto& [client, delta] : participants) {
            const double w = static_cast<double>(samples_of_client.at(client)) / total;
            for (std::size_t i = 0; i < theta.data.size(); ++i) {
                next.data[i] += w * (theta.data[i] + delta->data[i]);
            }
        }
        theta = std::move(next);
        any = true;
    }
    return any;
}

FederationRun::FederationRun(const ExperimentConfig& cfg, expansion::ExpandedModel global,
                             expansion::ExpansionPlan plan, std::vector<ClientProfile> profiles,
                             std::vector<ClientState> states,
                             datagen::LabeledDataset downstream_test)
    : cfg_(cfg),
      method_(method_from_string(cfg.method)),
      global_(std::move(global)),
      plan_(std::move(plan)),
      profiles_(std::move(profiles)),
      states_(std::move(states)),
      test_(std::move(downstream_test)) {
    scoring_.w_d = cfg.scoring.w_d;
    scoring_.w_t = cfg.scoring.w_t;
    scoring_.w_r = cfg.scoring.w_r;
    scoring_.score_mode = score_mode_from_string(cfg.scoring.score_mode);
    scoring_.d_norm_mode = d_norm_mode_from_string(cfg.scoring.d_norm_mode);
    scoring_.validate();
}

RoundRecord FederationRun::run_round() {
    RoundRecord rec;
    rec.round = round_;
    const std::string& task = cfg_.tasks.downstream_id;

    mode_switch(round_, profiles_, states_, cfg_.seed);

    // participating clients (full participation unless a fraction is set)
    std::vector<std::size_t> selected;
    for (std::size_t i = 0; i < profiles_.size(); ++i) selected.push_back(i);
    if (cfg_.selection_fraction < 1.0) {
        const std::size_t count = std::max<std::size_t>(
            1, static_cast<std::size_t>(
                   std::ceil(cfg_.selection_fraction * static_cast<double>(profiles_.size()))));
        Rng rng = substream(cfg_.seed, "select", round_);
        rng.shuffle(selected);
        selected.resize(count);
        std::sort(selected.begin(), selected.end());
    }

    std::vector<LocalTrainResult> results(profiles_.size());
    std::map<int, std::size_t> samples_of_client;
    const std::set<int> all_positions = global_.positions();

    for (std::size_t i : selected) {
        const ClientProfile& profile = profiles_[i];
        ClientState& state = states_[i];

        std::set<int> assigned;
        if (method_ == Method::FedBE || method_ == Method::FedBEUniformPos) {
            const std::size_t size = adjust_task_size(cfg_.tau, state.last_time, plan_.k);
            ScoreInputs in;
            in.positions = plan_.positions;
            in.num_blocks = global_.base.spec.num_blocks;
            in.d_i = heterogeneity(profile.alpha);
            double d_min = std::numeric_limits<double>::infinity();
            double d_max = -std::numeric_limits<double>::infinity();
            double r_max = 0.0;
            for (const ClientProfile& p : profiles_) {
                const double d = heterogeneity(p.alpha);
                d_min = std::min(d_min, d);
                d_max = std::max(d_max, d);
                r_max = std::max(r_max, p.resource_score);
            }
            in.d_min = d_min;
            in.d_max = d_max;
            in.r_i = profile.resource_score;
            in.r_max = r_max;
            in.train_counts = &state.train_counts;
            assigned = assign_blocks(priority_scores(in, scoring_), size);
        } else if (method_ == Method::FedBEStatic) {
            assigned = all_positions;  // every block on every client, no sizing
        }

        nn::TrainableMask mask = nn::TrainableMask::none(global_.base.spec);
        switch (method_) {
            case Method::FullFT:
                mask = nn::TrainableMask::full(global_.base.spec, task);
                break;
            case Method::HeadOnly:
                mask = nn::TrainableMask::head_only(global_.base.spec, task);
                break;
            default:
                mask = expansion::trainable_mask(global_, assigned, task);
                break;
        }

        results[i] = local_train(global_, profile, state, mask, task,
                                 TrainOptions{cfg_.lr, cfg_.momentum, cfg_.epochs_per_round,
                                              cfg_.batch_size},
                                 substream_seed(cfg_.seed, "local",
                                                static_cast<std::uint64_t>(profile.id), round_));
        state.assigned = assigned;

        ClientRoundStats stats;
        stats.id = profile.id;
        stats.skipped = results[i].skipped;
        stats.assigned.assign(assigned.begin(), assigned.end());
        stats.compute_seconds = results[i].compute_seconds;
        stats.upload_seconds =
            static_cast<double>(results[i].upload_bytes) / profile.bandwidth;
        stats.samples = results[i].samples;
        rec.clients.push_back(stats);
        if (!results[i].skipped) samples_of_client[profile.id] = results[i].samples;
    }

    std::vector<std::pair<int, const std::map<std::string, Tensor>*>> deltas;
    for (std::size_t i : selected) {
        if (!results[i].skipped) deltas.emplace_back(profiles_[i].id, &results[i].delta);
    }
    rec.aggregated = aggregate(global_, deltas, samples_of_client);
    if (!rec.aggregated) {
        std::cerr << "round " << round_ << ": no participants, global state unchanged\n";
    }

    for (std::size_t i : selected) {
        if (results[i].skipped) continue;
        states_[i].last_time = results[i].compute_seconds;
        for (int pos : states_[i].assigned) states_[i].train_counts[pos] += 1;
    }

    for (const ClientRoundStats& s : rec.clients) {
        if (!s.skipped) {
            rec.wall_clock_seconds =
                std::max(rec.wall_clock_seconds, s.compute_seconds + s.upload_seconds);
        }
    }
    rec.downstream_accuracy = expansion::evaluate_expanded(global_, test_, task, all_positions);

    ++round_;
    return rec;
}

std::size_t pretrain_to_target(nn::BaseModel& model, const datagen::TaskData& data,
                               const std::string& task, const PretrainConfig& cfg,
                               double fallback_lr, std::size_t batch_size,
                               std::uint64_t seed) {
    const double lr = cfg.lr.value_or(fallback_lr);
    const nn::TrainableMask mask = nn::TrainableMask::full(model.spec, task);
    const std::size_t bs = std::min(batch_size, data.train.size());

    std::vector<std::size_t> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = substream(seed, "pretrain");
    std::size_t cursor = order.size();

    double last_acc = 0.0;
    for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
        if (cursor + bs > order.size()) {
            rng.shuffle(order);
            cursor = 0;
        }
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                     order.begin() + static_cast<std::ptrdiff_t>(cursor + bs));
        cursor += bs;
        const nn::TokenBatch batch = nn::TokenBatch::from_examples(data.train.examples, idx);
        std::vector<int> labels(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = data.train.examples[idx[i]].label;
        const nn::LossAndGrads lg = nn::loss_and_backward(model, batch, labels, task);
        nn::apply_sgd(model, lg.grads, lr, mask);

        if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            last_acc = nn::evaluate(model, data.test, task);
            if (last_acc >= cfg.target_accuracy) return step;
        }
    }
    throw RunError("pretraining missed the accuracy target: reached " +
                   std::to_string(last_acc) + " after " + std::to_string(cfg.max_steps) +
                   " steps (target " + std::to_string(cfg.target_accuracy) + ")");
}

ExperimentEnv prepare_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const Method method = method_from_string(cfg.method);
    const std::string& g_id = cfg.tasks.general_id;
    const std::string& d_id = cfg.tasks.downstream_id;

    auto [g_spec, d_spec] = datagen::make_task_pair(
        g_id, d_id, cfg.tasks.vocab_size, cfg.tasks.seq_len, cfg.tasks.num_classes,
        cfg.tasks.markers_per_class, cfg.tasks.marker_density, cfg.seed,
        datagen::noise_layout_from_string(cfg.tasks.noise_layout),
        cfg.tasks.downstream_marker_density);

    ExperimentEnv env;
    env.general_data =
        datagen::gen_task(g_spec, cfg.tasks.examples_per_task, substream_seed(cfg.seed, "data", 0));
    env.downstream_data =
        datagen::gen_task(d_spec, cfg.tasks.examples_per_task, substream_seed(cfg.seed, "data", 1));

    nn::BaseModel model = nn::init_model(cfg.model, cfg.seed, {g_id, d_id});
    env.pretrain_steps = pretrain_to_target(model, env.general_data, g_id, cfg.pretrain, cfg.lr,
                                            cfg.batch_size, cfg.seed);
    env.acc_general_before = nn::evaluate(model, env.general_data.test, g_id);

    std::vector<datagen::LabeledDataset> shards =
        partition_dirichlet(env.downstream_data.train, cfg.clients, cfg.alpha, cfg.seed);

    env.plan.lambda = cfg.expansion.lambda;
    if (uses_expansion(method)) {
        std::size_t k = 0;
        if (cfg.expansion.k.has_value()) {
            k = *cfg.expansion.k;
        } else if (cfg.expansion.budget.has_value()) {
            k = expansion::choose_k(cfg.model, *cfg.expansion.budget);
        } else {
            throw ConfigError("expansion method needs an explicit k or a budget");
        }
        if (k == 0) throw ConfigError("expansion budget admits no blocks (k = 0)");
        if (k > cfg.model.num_blocks) throw ConfigError("k exceeds the number of blocks");

        std::vector<int> positions;
        if (method == Method::FedBEUniformPos) {
            positions = expansion::uniform_positions(cfg.model.num_blocks, k);
        } else {
            const datagen::TaskData proxy_data = datagen::gen_task(
                d_spec, std::max<std::size_t>(cfg.expansion.proxy_examples,
                                              10 * cfg.tasks.num_classes),
                substream_seed(cfg.seed, "proxy"));
            const std::vector<double> profile = expansion::proxy_gradient_profile(
                model, proxy_data.train, cfg.expansion.proxy_steps,
                cfg.expansion.proxy_lr.value_or(cfg.lr), cfg.batch_size,
                substream_seed(cfg.seed, "proxy"));
            positions = expansion::select_expansion_layers(profile, k, cfg.expansion.lambda);
        }
        env.plan.k = k;
        env.plan.positions = positions;
        env.global = expansion::expand(
            model, positions, expansion::zero_init_from_string(cfg.expansion.zero_init_policy),
            expansion::expand_input_from_string(cfg.expansion.expand_input));
    } else {
        env.global.base = std::move(model);
    }

    for (std::size_t i = 0; i < cfg.clients; ++i) {
        const DeviceProfileConfig& dev = cfg.device_of(i);
        ClientProfile p;
        p.id = static_cast<int>(i);
        p.alpha = cfg.alpha_of(i);
        p.resource_score = dev.resource_score;
        p.mode_rates = dev.mode_rates;
        p.bandwidth = dev.bandwidth;
        p.sample_count = shards[i].size();
        env.profiles.push_back(std::move(p));

        ClientState s;
        s.current_mode = dev.initial_mode;
        s.shard = std::move(shards[i]);
        env.states.push_back(std::move(s));
    }
    return env;
}

MetricsSeries run_experiment(const ExperimentConfig& cfg) {
    ExperimentEnv env = prepare_experiment(cfg);
    const std::string& g_id = cfg.tasks.general_id;
    const datagen::TaskData g_data = std::move(env.general_data);

    MetricsSeries series;
    series.method = cfg.method;
    series.target_accuracy = cfg.target_accuracy;
    series.pretrain_steps = env.pretrain_steps;
    series.acc_general_before = env.acc_general_before;

    FederationRun run(cfg, std::move(env.global), env.plan, std::move(env.profiles),
                      std::move(env.states), env.downstream_data.test);

    double cum = 0.0;
    for (std::size_t r = 0; r < cfg.rounds; ++r) {
        const RoundRecord rec = run.run_round();
        series.accuracy.push_back(rec.downstream_accuracy);
        cum += rec.wall_clock_seconds;
        series.cumulative_seconds.push_back(cum);
        double size_sum = 0.0;
        std::size_t counted = 0;
        for (const ClientRoundStats& s : rec.clients) {
            if (!s.skipped) {
                size_sum += static_cast<double>(s.assigned.size());
                ++counted;
            }
        }
        series.mean_assignment_size.push_back(counted ? size_sum / static_cast<double>(counted)
                                                      : 0.0);
        if (!series.time_to_target_round.has_value() &&
            rec.downstream_accuracy >= cfg.target_accuracy) {
            series.time_to_target_round = r;
            series.time_to_target_seconds = cum;
        }
    }

    series.final_downstream_accuracy = series.accuracy.empty() ? 0.0 : series.accuracy.back();

    const expansion::ExpandedModel& final_model = run.model();
    const std::set<int> none;
    series.acc_general_after = expansion::evaluate_expanded(final_model, g_data.test, g_id, none);
    series.acc_general_after_active =
        expansion::evaluate_expanded(final_model, g_data.test, g_id, final_model.positions());
    series.forgetting = series.acc_general_before - series.acc_general_after;
    series.forgetting_active = series.acc_general_before - series.acc_general_after_active;
    return series;
}

} // namespace fedbe::fed
