#pragma once

#include <string>
#include <vector>

#include "fedbe/config.hpp"

namespace fedbe::harness {

// Writes metrics.csv (round, accuracy, cum_seconds, mean_assignment_size),
// summary.json, and two static SVG line charts into out_dir. Re-emitting the
// same series produces byte-identical files.
void emit_report(const MetricsSeries& series, const std::string& out_dir);

// Rebuilds accuracy.svg and time.svg from an existing metrics.csv.
void render_charts(const std::string& dir);

// Pretrain on the general task, federate the downstream task per the
// configured method, and measure the general-task accuracy drop against the
// untouched general head (the downstream A/B pipeline).
MetricsSeries forgetting_experiment(const ExperimentConfig& cfg);

// Full series (per-round arrays plus the summary fields) as one JSON object.
std::string series_to_json(const MetricsSeries& series);

// Subcommands: run, select-layers, partition, gradcheck, forgetting, report.
// Returns 0 on success, 1 on configuration errors, 2 on runtime errors.
int cli(const std::vector<std::string>& args);

} // namespace fedbe::harness
