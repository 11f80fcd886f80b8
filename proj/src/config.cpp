#include "fedbe/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fedbe/datagen.hpp"
#include "fedbe/errors.hpp"
#include "fedbe/federation.hpp"

namespace fedbe {

using nlohmann::json;

namespace {

template <typename T>
void read_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

nn::ModelSpec parse_model(const json& j, nn::ModelSpec base) {
    read_if(j, "num_blocks", base.num_blocks);
    read_if(j, "hidden_dim", base.hidden_dim);
    read_if(j, "num_heads", base.num_heads);
    read_if(j, "ff_dim", base.ff_dim);
    read_if(j, "vocab_size", base.vocab_size);
    read_if(j, "max_seq_len", base.max_seq_len);
    read_if(j, "num_classes", base.num_classes);
    return base;
}

json model_to_json(const nn::ModelSpec& m) {
    return json{{"num_blocks", m.num_blocks}, {"hidden_dim", m.hidden_dim},
                {"num_heads", m.num_heads},   {"ff_dim", m.ff_dim},
                {"vocab_size", m.vocab_size}, {"max_seq_len", m.max_seq_len},
                {"num_classes", m.num_classes}};
}

} // namespace

void apply_preset(ExperimentConfig& cfg, const std::string& name) {
    if (name == "toy") {
        // desk-scale setup; lr deliberately raised from the full-scale default
        cfg.model = nn::ModelSpec{4, 32, 4, 128, 64, 16, 4};
        cfg.tasks = TaskPairConfig{};  // V=64, T=16, K=4, m=4, p=0.3
        cfg.clients = 8;
        cfg.alpha = {0.1};
        cfg.rounds = 30;
        cfg.lr = 0.05;
        cfg.batch_size = 32;
        cfg.epochs_per_round = 1;
        cfg.expansion.k = 2;
        cfg.tau = 30.0;
        cfg.devices = {DeviceProfileConfig{}};
    } else {
        throw ConfigError("unknown preset: " + name);
    }
}

ExperimentConfig parse_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }

    ExperimentConfig cfg;
    try {
        if (j.contains("preset")) apply_preset(cfg, j.at("preset").get<std::string>());
        if (j.contains("model")) cfg.model = parse_model(j.at("model"), cfg.model);
        if (j.contains("tasks")) {
            const json& t = j.at("tasks");
            read_if(t, "general_id", cfg.tasks.general_id);
            read_if(t, "downstream_id", cfg.tasks.downstream_id);
            read_if(t, "vocab_size", cfg.tasks.vocab_size);
            read_if(t, "seq_len", cfg.tasks.seq_len);
            read_if(t, "num_classes", cfg.tasks.num_classes);
            read_if(t, "markers_per_class", cfg.tasks.markers_per_class);
            read_if(t, "marker_density", cfg.tasks.marker_density);
            if (t.contains("downstream_marker_density")) {
                cfg.tasks.downstream_marker_density =
                    t.at("downstream_marker_density").get<double>();
            }
            read_if(t, "examples_per_task", cfg.tasks.examples_per_task);
            read_if(t, "noise_layout", cfg.tasks.noise_layout);
        }
        read_if(j, "clients", cfg.clients);
        if (j.contains("alpha")) {
            const json& a = j.at("alpha");
            if (a.is_array()) {
                cfg.alpha = a.get<std::vector<double>>();
            } else {
                cfg.alpha = {a.get<double>()};
            }
        }
        read_if(j, "rounds", cfg.rounds);
        read_if(j, "method", cfg.method);
        if (j.contains("expansion")) {
            const json& e = j.at("expansion");
            if (e.contains("k")) cfg.expansion.k = e.at("k").get<std::size_t>();
            if (e.contains("budget")) {
                expansion::BudgetSpec b;
                read_if(e.at("budget"), "max_extra_params", b.max_extra_params);
                read_if(e.at("budget"), "max_extra_flops", b.max_extra_flops);
                cfg.expansion.budget = b;
            }
            read_if(e, "lambda", cfg.expansion.lambda);
            read_if(e, "zero_init_policy", cfg.expansion.zero_init_policy);
            read_if(e, "expand_input", cfg.expansion.expand_input);
            read_if(e, "proxy_examples", cfg.expansion.proxy_examples);
            read_if(e, "proxy_steps", cfg.expansion.proxy_steps);
            if (e.contains("proxy_lr")) cfg.expansion.proxy_lr = e.at("proxy_lr").get<double>();
        }
        if (j.contains("scoring")) {
            const json& s = j.at("scoring");
            read_if(s, "w_d", cfg.scoring.w_d);
            read_if(s, "w_t", cfg.scoring.w_t);
            read_if(s, "w_r", cfg.scoring.w_r);
            read_if(s, "score_mode", cfg.scoring.score_mode);
            read_if(s, "d_norm_mode", cfg.scoring.d_norm_mode);
        }
        read_if(j, "tau", cfg.tau);
        read_if(j, "lr", cfg.lr);
        read_if(j, "momentum", cfg.momentum);
        read_if(j, "epochs_per_round", cfg.epochs_per_round);
        read_if(j, "batch_size", cfg.batch_size);
        if (j.contains("devices")) {
            cfg.devices.clear();
            for (const json& d : j.at("devices")) {
                DeviceProfileConfig dev;
                read_if(d, "resource_score", dev.resource_score);
                read_if(d, "mode_rates", dev.mode_rates);
                read_if(d, "bandwidth", dev.bandwidth);
                read_if(d, "initial_mode", dev.initial_mode);
                cfg.devices.push_back(dev);
            }
        }
        read_if(j, "selection_fraction", cfg.selection_fraction);
        read_if(j, "target_accuracy", cfg.target_accuracy);
        if (j.contains("pretrain")) {
            const json& p = j.at("pretrain");
            read_if(p, "target_accuracy", cfg.pretrain.target_accuracy);
            read_if(p, "max_steps", cfg.pretrain.max_steps);
            read_if(p, "eval_every", cfg.pretrain.eval_every);
            if (p.contains("lr")) cfg.pretrain.lr = p.at("lr").get<double>();
        }
        read_if(j, "seed", cfg.seed);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config field: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
    json j;
    j["model"] = model_to_json(cfg.model);
    j["tasks"] = json{{"general_id", cfg.tasks.general_id},
                      {"downstream_id", cfg.tasks.downstream_id},
                      {"vocab_size", cfg.tasks.vocab_size},
                      {"seq_len", cfg.tasks.seq_len},
                      {"num_classes", cfg.tasks.num_classes},
                      {"markers_per_class", cfg.tasks.markers_per_class},
                      {"marker_density", cfg.tasks.marker_density},
                      {"examples_per_task", cfg.tasks.examples_per_task},
                      {"noise_layout", cfg.tasks.noise_layout}};
    if (cfg.tasks.downstream_marker_density) {
        j["tasks"]["downstream_marker_density"] = *cfg.tasks.downstream_marker_density;
    }
    j["clients"] = cfg.clients;
    j["alpha"] = cfg.alpha.size() == 1 ? json(cfg.alpha[0]) : json(cfg.alpha);
    j["rounds"] = cfg.rounds;
    j["method"] = cfg.method;
    json e;
    if (cfg.expansion.k) e["k"] = *cfg.expansion.k;
    if (cfg.expansion.budget) {
        e["budget"] = json{{"max_extra_params", cfg.expansion.budget->max_extra_params},
                           {"max_extra_flops", cfg.expansion.budget->max_extra_flops}};
    }
    e["lambda"] = cfg.expansion.lambda;
    e["zero_init_policy"] = cfg.expansion.zero_init_policy;
    e["expand_input"] = cfg.expansion.expand_input;
    e["proxy_examples"] = cfg.expansion.proxy_examples;
    e["proxy_steps"] = cfg.expansion.proxy_steps;
    if (cfg.expansion.proxy_lr) e["proxy_lr"] = *cfg.expansion.proxy_lr;
    j["expansion"] = e;
    j["scoring"] = json{{"w_d", cfg.scoring.w_d},
                        {"w_t", cfg.scoring.w_t},
                        {"w_r", cfg.scoring.w_r},
                        {"score_mode", cfg.scoring.score_mode},
                        {"d_norm_mode", cfg.scoring.d_norm_mode}};
    j["tau"] = cfg.tau;
    j["lr"] = cfg.lr;
    j["momentum"] = cfg.momentum;
    j["epochs_per_round"] = cfg.epochs_per_round;
    j["batch_size"] = cfg.batch_size;
    json devs = json::array();
    for (const DeviceProfileConfig& d : cfg.devices) {
        devs.push_back(json{{"resource_score", d.resource_score},
                            {"mode_rates", d.mode_rates},
                            {"bandwidth", d.bandwidth},
                            {"initial_mode", d.initial_mode}});
    }
    j["devices"] = devs;
    j["selection_fraction"] = cfg.selection_fraction;
    j["target_accuracy"] = cfg.target_accuracy;
    json p;
    p["target_accuracy"] = cfg.pretrain.target_accuracy;
    p["max_steps"] = cfg.pretrain.max_steps;
    p["eval_every"] = cfg.pretrain.eval_every;
    if (cfg.pretrain.lr) p["lr"] = *cfg.pretrain.lr;
    j["pretrain"] = p;
    j["seed"] = cfg.seed;
    return j.dump(2);
}

double ExperimentConfig::alpha_of(std::size_t client) const {
    return alpha.size() == 1 ? alpha[0] : alpha.at(client);
}

const DeviceProfileConfig& ExperimentConfig::device_of(std::size_t client) const {
    return devices[client % devices.size()];
}

void ExperimentConfig::validate() const {
    model.validate();
    if (tasks.vocab_size != model.vocab_size) {
        throw ConfigError("tasks.vocab_size must match model.vocab_size");
    }
    if (tasks.seq_len > model.max_seq_len) {
        throw ConfigError("tasks.seq_len exceeds model.max_seq_len");
    }
    if (tasks.num_classes != model.num_classes) {
        throw ConfigError("tasks.num_classes must match model.num_classes");
    }
    if (tasks.general_id == tasks.downstream_id) {
        throw ConfigError("general and downstream tasks need distinct ids");
    }
    if (tasks.marker_density < 0.0 || tasks.marker_density > 1.0) {
        throw ConfigError("marker_density outside [0, 1]");
    }
    datagen::noise_layout_from_string(tasks.noise_layout);
    if (tasks.downstream_marker_density &&
        (*tasks.downstream_marker_density < 0.0 || *tasks.downstream_marker_density > 1.0)) {
        throw ConfigError("downstream_marker_density outside [0, 1]");
    }
    if (clients < 1) throw ConfigError("need at least one client");
    if (alpha.empty() || (alpha.size() != 1 && alpha.size() != clients)) {
        throw ConfigError("alpha must be a scalar or one value per client");
    }
    for (double a : alpha) {
        if (!(a > 0.0)) throw ConfigError("alpha values must be positive");
    }
    if (rounds < 1) throw ConfigError("rounds must be >= 1");
    fed::method_from_string(method);
    fed::ScoringWeights w{scoring.w_d, scoring.w_t, scoring.w_r,
                          fed::score_mode_from_string(scoring.score_mode),
                          fed::d_norm_mode_from_string(scoring.d_norm_mode)};
    w.validate();
    if (expansion.lambda < 0.0 || expansion.lambda > 1.0) {
        throw ConfigError("lambda outside [0, 1]");
    }
    expansion::zero_init_from_string(this->expansion.zero_init_policy);
    expansion::expand_input_from_string(this->expansion.expand_input);
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum outside [0, 1)");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (devices.empty()) throw ConfigError("need at least one device profile");
    for (const DeviceProfileConfig& d : devices) {
        if (d.mode_rates.empty()) throw ConfigError("device needs at least one mode rate");
        for (double r : d.mode_rates) {
            if (!(r > 0.0)) throw ConfigError("mode rates must be positive");
        }
        if (!(d.bandwidth > 0.0)) throw ConfigError("bandwidth must be positive");
        if (!(d.resource_score > 0.0)) throw ConfigError("resource score must be positive");
        if (d.initial_mode >= d.mode_rates.size()) {
            throw ConfigError("initial_mode outside the mode list");
        }
    }
    if (!(selection_fraction > 0.0) || selection_fraction > 1.0) {
        throw ConfigError("selection_fraction outside (0, 1]");
    }
    if (!(target_accuracy > 0.0) || target_accuracy > 1.0) {
        throw ConfigError("target_accuracy outside (0, 1]");
    }
    if (!(pretrain.target_accuracy > 0.0) || pretrain.target_accuracy > 1.0) {
        throw ConfigError("pretrain.target_accuracy outside (0, 1]");
    }
    if (pretrain.max_steps < 1 || pretrain.eval_every < 1) {
        throw ConfigError("pretrain step counts must be >= 1");
    }
}

} // namespace fedbe
