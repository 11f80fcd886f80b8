#include "fedbe/datagen.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "fedbe/errors.hpp"
#include "fedbe/rng.hpp"

namespace fedbe::datagen {

void SyntheticTaskSpec::validate() const {
    if (vocab_size < 2 || seq_len < 1 || num_classes < 2) {
        throw ConfigError("task spec: need V >= 2, T >= 1, K >= 2");
    }
    if (marker_sets.size() != num_classes) {
        throw ConfigError("task spec: need one marker set per class");
    }
    if (marker_density < 0.0 || marker_density > 1.0) {
        throw ConfigError("task spec: marker density outside [0, 1]");
    }
    std::set<std::int32_t> seen;
    std::size_t total_markers = 0;
    for (const auto& ms : marker_sets) {
        if (ms.empty()) throw ConfigError("task spec: empty marker set");
        for (std::int32_t t : ms) {
            if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
                throw ConfigError("task spec: marker token outside vocabulary");
            }
            if (!seen.insert(t).second) {
                throw ConfigError("task spec: marker sets not disjoint");
            }
        }
        total_markers += ms.size();
    }
    if (noise_pool.empty() && marker_density < 1.0) {
        throw ConfigError("task spec: empty noise pool with density < 1");
    }
    for (std::int32_t t : noise_pool) {
        if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
            throw ConfigError("task spec: noise token outside vocabulary");
        }
        if (seen.count(t)) {
            throw ConfigError("task spec: noise pool overlaps a marker set");
        }
    }
    if (total_markers + noise_pool.size() > vocab_size) {
        throw ConfigError("task spec: K*m + |noise pool| exceeds V");
    }
}

TaskData gen_task(const SyntheticTaskSpec& spec, std::size_t n, std::uint64_t seed) {
    spec.validate();
    if (n < 10 * spec.num_classes) {
        throw ConfigError("gen_task: need at least 10 examples per class");
    }
    Rng rng = substream(seed, "gen_task");
    std::vector<Example> examples;
    examples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Example ex;
        ex.label = static_cast<int>(rng.bounded(spec.num_classes));
        ex.tokens.resize(spec.seq_len);
        const auto& markers = spec.marker_sets[static_cast<std::size_t>(ex.label)];
        for (std::size_t t = 0; t < spec.seq_len; ++t) {
            if (rng.uniform() < spec.marker_density) {
                ex.tokens[t] = markers[rng.bounded(markers.size())];
            } else {
                ex.tokens[t] = spec.noise_pool[rng.bounded(spec.noise_pool.size())];
            }
        }
        examples.push_back(std::move(ex));
    }

    const std::size_t n_train = (n * 8) / 10;
    TaskData out;
    for (auto* ds : {&out.train, &out.test}) {
        ds->task_id = spec.task_id;
        ds->vocab_size = spec.vocab_size;
        ds->num_classes = spec.num_classes;
        ds->seq_len = spec.seq_len;
        ds->seed = seed;
    }
    out.train.examples.assign(examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.test.examples.assign(examples.begin() + static_cast<std::ptrdiff_t>(n_train), examples.end());
    return out;
}

double bayes_oracle(const LabeledDataset& data, const SyntheticTaskSpec& spec) {
    if (data.empty()) return 0.0;
    // token -> class whose marker set contains it (or -1)
    std::vector<int> owner(spec.vocab_size, -1);
    for (std::size_t c = 0; c < spec.marker_sets.size(); ++c) {
        for (std::int32_t t : spec.marker_sets[c]) owner[static_cast<std::size_t>(t)] = static_cast<int>(c);
    }
    std::size_t correct = 0;
    std::vector<std::size_t> counts(spec.num_classes);
    for (const Example& ex : data.examples) {
        std::fill(counts.begin(), counts.end(), 0);
        for (std::int32_t t : ex.tokens) {
            int c = owner[static_cast<std::size_t>(t)];
            if (c >= 0) ++counts[static_cast<std::size_t>(c)];
        }
        int best = 0;
        for (std::size_t c = 1; c < counts.size(); ++c) {
            if (counts[c] > counts[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
        }
        if (best == ex.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<std::size_t> label_histogram(const LabeledDataset& shard) {
    std::vector<std::size_t> counts(shard.num_classes, 0);
    for (const Example& ex : shard.examples) {
        counts[static_cast<std::size_t>(ex.label)] += 1;
    }
    return counts;
}

NoiseLayout noise_layout_from_string(const std::string& s) {
    if (s == "exclusive") return NoiseLayout::Exclusive;
    if (s == "cross-task") return NoiseLayout::CrossTask;
    if (s == "downstream-cross") return NoiseLayout::DownstreamCross;
    throw ConfigError("unknown noise_layout: " + s);
}

const char* to_string(NoiseLayout layout) {
    switch (layout) {
        case NoiseLayout::Exclusive: return "exclusive";
        case NoiseLayout::CrossTask: return "cross-task";
        case NoiseLayout::DownstreamCross: return "downstream-cross";
    }
    return "?";
}

std::pair<SyntheticTaskSpec, SyntheticTaskSpec> make_task_pair(
    const std::string& first_id, const std::string& second_id,
    std::size_t vocab_size, std::size_t seq_len, std::size_t num_classes,
    std::size_t markers_per_class, double marker_density, std::uint64_t seed,
    NoiseLayout layout, std::optional<double> second_density) {
    const std::size_t markers_total = 2 * num_classes * markers_per_class;
    if (markers_total >= vocab_size) {
        throw ConfigError("make_task_pair: vocabulary too small for two disjoint marker layouts");
    }
    auto build = [&](const std::string& id, std::size_t offset, std::uint64_t task_seed,
                     bool cross, double density) {
        SyntheticTaskSpec s;
        s.task_id = id;
        s.vocab_size = vocab_size;
        s.seq_len = seq_len;
        s.num_classes = num_classes;
        s.marker_density = density;
        s.seed = task_seed;
        const std::size_t own_lo = offset;
        const std::size_t own_hi = offset + num_classes * markers_per_class;
        for (std::size_t c = 0; c < num_classes; ++c) {
            std::vector<std::int32_t> ms;
            for (std::size_t j = 0; j < markers_per_class; ++j) {
                ms.push_back(static_cast<std::int32_t>(offset + c * markers_per_class + j));
            }
            s.marker_sets.push_back(std::move(ms));
        }
        if (cross) {
            for (std::size_t t = 0; t < vocab_size; ++t) {
                if (t >= own_lo && t < own_hi) continue;
                s.noise_pool.push_back(static_cast<std::int32_t>(t));
            }
        } else {
            for (std::size_t t = markers_total; t < vocab_size; ++t) {
                s.noise_pool.push_back(static_cast<std::int32_t>(t));
            }
        }
        s.validate();
        return s;
    };
    const bool first_cross = layout == NoiseLayout::CrossTask;
    const bool second_cross = layout != NoiseLayout::Exclusive;
    return {build(first_id, 0, substream_seed(seed, "task", 0), first_cross, marker_density),
            build(second_id, num_classes * markers_per_class, substream_seed(seed, "task", 1),
                  second_cross, second_density.value_or(marker_density))};
}

void write_jsonl(const LabeledDataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw RunError("cannot open for writing: " + path);
    for (const Example& ex : data.examples) {
        nlohmann::json rec;
        rec["tokens"] = ex.tokens;
        rec["label"] = ex.label;
        out << rec.dump() << '\n';
    }
}

LabeledDataset read_jsonl(const std::string& path, const std::string& task_id,
                          std::size_t vocab_size, std::size_t num_classes) {
    std::ifstream in(path);
    if (!in) throw RunError("cannot open for reading: " + path);
    LabeledDataset ds;
    ds.task_id = task_id;
    ds.vocab_size = vocab_size;
    ds.num_classes = num_classes;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json rec = nlohmann::json::parse(line);
        Example ex;
        ex.tokens = rec.at("tokens").get<std::vector<std::int32_t>>();
        ex.label = rec.at("label").get<int>();
        for (std::int32_t t : ex.tokens) {
            if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
                throw InputError("dataset token outside vocabulary: " + path);
            }
        }
        if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= num_classes) {
            throw InputError("dataset label out of range: " + path);
        }
        ds.seq_len = ex.tokens.size();
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

} // namespace fedbe::datagen
