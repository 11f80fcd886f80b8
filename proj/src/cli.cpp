#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedbe/datagen.hpp"
#include "fedbe/errors.hpp"
#include "fedbe/expansion.hpp"
#include "fedbe/federation.hpp"
#include "fedbe/harness.hpp"
#include "fedbe/rng.hpp"

namespace fedbe::harness {

namespace {

ExperimentConfig load_with_seed(const std::string& path, std::optional<std::uint64_t> seed) {
    ExperimentConfig cfg = load_config(path);
    if (seed) {
        cfg.seed = *seed;
        cfg.validate();
    }
    return cfg;
}

// everything the selection pipeline needs before any federation happens
struct SelectionResult {
    expansion::ExpansionPlan plan;
};

SelectionResult run_selection(const ExperimentConfig& cfg) {
    const std::string& g_id = cfg.tasks.general_id;
    const std::string& d_id = cfg.tasks.downstream_id;
    auto [g_spec, d_spec] = datagen::make_task_pair(
        g_id, d_id, cfg.tasks.vocab_size, cfg.tasks.seq_len, cfg.tasks.num_classes,
        cfg.tasks.markers_per_class, cfg.tasks.marker_density, cfg.seed,
        datagen::noise_layout_from_string(cfg.tasks.noise_layout),
        cfg.tasks.downstream_marker_density);
    const datagen::TaskData g_data =
        datagen::gen_task(g_spec, cfg.tasks.examples_per_task, substream_seed(cfg.seed, "data", 0));

    nn::BaseModel model = nn::init_model(cfg.model, cfg.seed, {g_id, d_id});
    fed::pretrain_to_target(model, g_data, g_id, cfg.pretrain, cfg.lr, cfg.batch_size, cfg.seed);

    std::size_t k = 0;
    if (cfg.expansion.k.has_value()) {
        k = *cfg.expansion.k;
    } else if (cfg.expansion.budget.has_value()) {
        k = expansion::choose_k(cfg.model, *cfg.expansion.budget);
    } else {
        throw ConfigError("select-layers needs an explicit k or a budget");
    }
    if (k == 0 || k > cfg.model.num_blocks) {
        throw ConfigError("expansion budget admits no valid k");
    }

    const datagen::TaskData proxy_data = datagen::gen_task(
        d_spec, std::max<std::size_t>(cfg.expansion.proxy_examples, 10 * cfg.tasks.num_classes),
        substream_seed(cfg.seed, "proxy"));
    const std::vector<double> profile = expansion::proxy_gradient_profile(
        model, proxy_data.train, cfg.expansion.proxy_steps, cfg.expansion.proxy_lr.value_or(cfg.lr),
        cfg.batch_size, substream_seed(cfg.seed, "proxy"));

    SelectionResult out;
    out.plan.k = k;
    out.plan.lambda = cfg.expansion.lambda;
    out.plan.positions = expansion::select_expansion_layers(profile, k, cfg.expansion.lambda);
    return out;
}

int run_gradcheck() {
    struct Case {
        const char* name;
        nn::ModelSpec spec;
    };
    const std::vector<Case> cases = {
        {"2-block d=16", {2, 16, 4, 32, 32, 8, 3}},
        {"4-block d=32", {4, 32, 4, 128, 64, 16, 4}},
    };
    double worst = 0.0;
    for (const Case& c : cases) {
        const nn::BaseModel model = nn::init_model(c.spec, 7);
        Rng rng(1234);
        nn::TokenBatch batch;
        batch.batch_size = 2;
        batch.seq_len = c.spec.max_seq_len;
        std::vector<int> labels;
        for (std::size_t i = 0; i < batch.batch_size * batch.seq_len; ++i) {
            batch.tokens.push_back(static_cast<std::int32_t>(rng.bounded(c.spec.vocab_size)));
        }
        for (std::size_t b = 0; b < batch.batch_size; ++b) {
            labels.push_back(static_cast<int>(rng.bounded(c.spec.num_classes)));
        }
        const double err = nn::finite_diff_oracle(model, batch, labels, "D", 1e-5);
        std::printf("%-14s max relative gradient error %.3e\n", c.name, err);
        worst = std::max(worst, err);
    }
    std::printf("overall max relative error %.3e (tolerance 1e-6)\n", worst);
    return worst < 1e-6 ? 0 : 2;
}

} // namespace

MetricsSeries forgetting_experiment(const ExperimentConfig& cfg) {
    // run_experiment implements the pipeline: pretrain the general head,
    // record the before-accuracy, federate the downstream task, then
    // re-evaluate the general task on the untouched general head
    return fed::run_experiment(cfg);
}

int cli(const std::vector<std::string>& args) {
    CLI::App app{"deterministic federated fine-tuning simulator with transformer "
                 "block expansion"};
    app.require_subcommand(1);

    std::string config_path, out_dir, in_dir;
    std::optional<std::uint64_t> seed_override;

    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed_override, "override the config root seed");
    };

    CLI::App* cmd_run = app.add_subcommand("run", "run one experiment and write reports");
    cmd_run->add_option("--config", config_path, "config JSON path")->required();
    cmd_run->add_option("--out", out_dir, "output directory")->required();
    add_seed(cmd_run);

    CLI::App* cmd_select =
        app.add_subcommand("select-layers", "print the expansion plan as JSON");
    cmd_select->add_option("--config", config_path, "config JSON path")->required();
    add_seed(cmd_select);

    CLI::App* cmd_partition =
        app.add_subcommand("partition", "print per-client label histograms");
    cmd_partition->add_option("--config", config_path, "config JSON path")->required();
    add_seed(cmd_partition);

    CLI::App* cmd_gradcheck =
        app.add_subcommand("gradcheck", "run the finite-difference gradient check suite");
    (void)cmd_gradcheck;

    CLI::App* cmd_forget = app.add_subcommand(
        "forgetting", "pretrain general, federate downstream, report forgetting");
    cmd_forget->add_option("--config", config_path, "config JSON path")->required();
    cmd_forget->add_option("--out", out_dir, "output directory")->required();
    add_seed(cmd_forget);

    CLI::App* cmd_report = app.add_subcommand("report", "rebuild SVG charts from metrics.csv");
    cmd_report->add_option("--in", in_dir, "directory holding metrics.csv")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (cmd_run->parsed()) {
            const ExperimentConfig cfg = load_with_seed(config_path, seed_override);
            const MetricsSeries series = fed::run_experiment(cfg);
            emit_report(series, out_dir);
            std::printf("method %s: downstream %.4f, forgetting %.4f (base path)\n",
                        series.method.c_str(), series.final_downstream_accuracy,
                        series.forgetting);
        } else if (cmd_select->parsed()) {
            const ExperimentConfig cfg = load_with_seed(config_path, seed_override);
            const SelectionResult sel = run_selection(cfg);
            std::cout << expansion::plan_to_json(sel.plan) << "\n";
        } else if (cmd_partition->parsed()) {
            const ExperimentConfig cfg = load_with_seed(config_path, seed_override);
            auto [g_spec, d_spec] = datagen::make_task_pair(
                cfg.tasks.general_id, cfg.tasks.downstream_id, cfg.tasks.vocab_size,
                cfg.tasks.seq_len, cfg.tasks.num_classes, cfg.tasks.markers_per_class,
                cfg.tasks.marker_density, cfg.seed,
                datagen::noise_layout_from_string(cfg.tasks.noise_layout),
                cfg.tasks.downstream_marker_density);
            const datagen::TaskData d_data = datagen::gen_task(
                d_spec, cfg.tasks.examples_per_task, substream_seed(cfg.seed, "data", 1));
            const auto shards =
                fed::partition_dirichlet(d_data.train, cfg.clients, cfg.alpha, cfg.seed);
            nlohmann::json out = nlohmann::json::array();
            for (std::size_t i = 0; i < shards.size(); ++i) {
                out.push_back({{"client", i},
                               {"samples", shards[i].size()},
                               {"counts", datagen::label_histogram(shards[i])}});
            }
            std::cout << out.dump(2) << "\n";
        } else if (cmd_gradcheck->parsed()) {
            return run_gradcheck();
        } else if (cmd_forget->parsed()) {
            const ExperimentConfig cfg = load_with_seed(config_path, seed_override);
            const MetricsSeries series = forgetting_experiment(cfg);
            emit_report(series, out_dir);
            std::printf("method %s\n", series.method.c_str());
            std::printf("  general before        %.4f\n", series.acc_general_before);
            std::printf("  general after (base)  %.4f  -> forgetting %.4f\n",
                        series.acc_general_after, series.forgetting);
            std::printf("  general after (active)%.4f  -> forgetting %.4f\n",
                        series.acc_general_after_active, series.forgetting_active);
            std::printf("  downstream final      %.4f\n", series.final_downstream_accuracy);
        } else if (cmd_report->parsed()) {
            render_charts(in_dir);
        }
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

} // namespace fedbe::harness
