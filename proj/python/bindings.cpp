#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

#include "fedbe/config.hpp"
#include "fedbe/datagen.hpp"
#include "fedbe/errors.hpp"
#include "fedbe/expansion.hpp"
#include "fedbe/federation.hpp"
#include "fedbe/harness.hpp"
#include "fedbe/nn.hpp"

namespace py = pybind11;
using namespace fedbe;

namespace {

nn::TokenBatch batch_from_lists(const std::vector<std::vector<std::int32_t>>& rows) {
    nn::TokenBatch b;
    b.batch_size = rows.size();
    b.seq_len = rows.empty() ? 0 : rows[0].size();
    for (const auto& r : rows) {
        if (r.size() != b.seq_len) throw InputError("ragged token batch");
        b.tokens.insert(b.tokens.end(), r.begin(), r.end());
    }
    return b;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "federated fine-tuning simulator with transformer block expansion";

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<InputError>(m, "InputError");
    py::register_exception<RunError>(m, "RunError");

    py::class_<nn::ModelSpec>(m, "ModelSpec")
        .def(py::init([](std::size_t num_blocks, std::size_t hidden_dim, std::size_t num_heads,
                         std::size_t ff_dim, std::size_t vocab_size, std::size_t max_seq_len,
                         std::size_t num_classes) {
                 return nn::ModelSpec{num_blocks, hidden_dim, num_heads, ff_dim,
                                      vocab_size,  max_seq_len, num_classes};
             }),
             py::arg("num_blocks"), py::arg("hidden_dim"), py::arg("num_heads"),
             py::arg("ff_dim"), py::arg("vocab_size"), py::arg("max_seq_len"),
             py::arg("num_classes"))
        .def_readonly("num_blocks", &nn::ModelSpec::num_blocks)
        .def_readonly("hidden_dim", &nn::ModelSpec::hidden_dim)
        .def("validate", &nn::ModelSpec::validate);

    py::class_<nn::BaseModel>(m, "BaseModel")
        .def_property_readonly("num_blocks",
                               [](const nn::BaseModel& b) { return b.spec.num_blocks; });

    py::class_<datagen::SyntheticTaskSpec>(m, "TaskSpec")
        .def_readonly("task_id", &datagen::SyntheticTaskSpec::task_id)
        .def_readonly("marker_sets", &datagen::SyntheticTaskSpec::marker_sets)
        .def_readonly("noise_pool", &datagen::SyntheticTaskSpec::noise_pool);

    py::class_<datagen::LabeledDataset>(m, "Dataset")
        .def("__len__", &datagen::LabeledDataset::size)
        .def_property_readonly("task_id",
                               [](const datagen::LabeledDataset& d) { return d.task_id; })
        .def("label_histogram",
             [](const datagen::LabeledDataset& d) { return datagen::label_histogram(d); })
        .def("tokens", [](const datagen::LabeledDataset& d, std::size_t i) {
            return d.examples.at(i).tokens;
        })
        .def("label",
             [](const datagen::LabeledDataset& d, std::size_t i) { return d.examples.at(i).label; });

    py::class_<datagen::TaskData>(m, "TaskData")
        .def_readonly("train", &datagen::TaskData::train)
        .def_readonly("test", &datagen::TaskData::test);

    m.def(
        "make_task_pair",
        [](const std::string& first_id, const std::string& second_id, std::size_t vocab_size,
           std::size_t seq_len, std::size_t num_classes, std::size_t markers_per_class,
           double marker_density, std::uint64_t seed, const std::string& noise_layout) {
            return datagen::make_task_pair(first_id, second_id, vocab_size, seq_len, num_classes,
                                           markers_per_class, marker_density, seed,
                                           datagen::noise_layout_from_string(noise_layout));
        },
        py::arg("first_id"), py::arg("second_id"), py::arg("vocab_size"), py::arg("seq_len"),
        py::arg("num_classes"), py::arg("markers_per_class"), py::arg("marker_density"),
        py::arg("seed"), py::arg("noise_layout") = "exclusive");
    m.def("gen_task", &datagen::gen_task, py::arg("spec"), py::arg("n"), py::arg("seed"));
    m.def("bayes_oracle", &datagen::bayes_oracle, py::arg("dataset"), py::arg("spec"));

    m.def("init_model", &nn::init_model, py::arg("spec"), py::arg("seed"),
          py::arg("tasks") = std::vector<std::string>{"G", "D"});
    m.def("evaluate", &nn::evaluate, py::arg("model"), py::arg("dataset"), py::arg("task"));
    m.def(
        "finite_diff_oracle",
        [](const nn::BaseModel& model, const std::vector<std::vector<std::int32_t>>& tokens,
           const std::vector<int>& labels, const std::string& task, double eps) {
            return nn::finite_diff_oracle(model, batch_from_lists(tokens), labels, task, eps);
        },
        py::arg("model"), py::arg("tokens"), py::arg("labels"), py::arg("task"),
        py::arg("eps") = 1e-5);

    m.def("flops_estimate", &expansion::flops_estimate, py::arg("spec"), py::arg("n_blocks"),
          py::arg("seq_len"));
    m.def(
        "choose_k",
        [](const nn::ModelSpec& spec, std::uint64_t max_extra_params,
           std::uint64_t max_extra_flops) {
            return expansion::choose_k(spec, {max_extra_params, max_extra_flops});
        },
        py::arg("spec"), py::arg("max_extra_params"), py::arg("max_extra_flops"));
    m.def("select_expansion_layers", &expansion::select_expansion_layers,
          py::arg("grad_norms"), py::arg("k"), py::arg("lambda_"));
    m.def("uniform_positions", &expansion::uniform_positions, py::arg("num_blocks"),
          py::arg("k"));
    m.def("block_param_count", &nn::block_param_count, py::arg("spec"));

    m.def("heterogeneity", &fed::heterogeneity, py::arg("alpha"));
    m.def(
        "adjust_task_size",
        [](double tau, std::optional<double> prev_seconds, std::size_t k) {
            return fed::adjust_task_size(tau, prev_seconds, k);
        },
        py::arg("tau"), py::arg("prev_seconds"), py::arg("k"));
    m.def(
        "partition_histograms",
        [](const datagen::LabeledDataset& data, std::size_t clients,
           const std::vector<double>& alphas, std::uint64_t seed) {
            const auto shards = fed::partition_dirichlet(data, clients, alphas, seed);
            std::vector<std::vector<std::size_t>> out;
            for (const auto& s : shards) out.push_back(datagen::label_histogram(s));
            return out;
        },
        py::arg("dataset"), py::arg("clients"), py::arg("alphas"), py::arg("seed"));

    m.def(
        "run_experiment_json",
        [](const std::string& config_json) {
            const ExperimentConfig cfg = parse_config(config_json);
            return harness::series_to_json(fed::run_experiment(cfg));
        },
        py::arg("config_json"), "run one experiment from a config JSON string; "
                                "returns the metrics series as JSON");
    m.def("default_config_json",
          []() { return serialize_config(ExperimentConfig{}); });
    m.def(
        "toy_config_json",
        []() {
            ExperimentConfig cfg;
            apply_preset(cfg, "toy");
            return serialize_config(cfg);
        },
        "the desk-scale preset as a config JSON string");
    m.def("cli", &harness::cli, py::arg("args"), "invoke the command line interface");

#ifdef FEDBE_VERSION
    m.attr("__version__") = FEDBE_VERSION;
#else
    m.attr("__version__") = "dev";
#endif
}
