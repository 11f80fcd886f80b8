#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedbe/errors.hpp"
#include "fedbe/harness.hpp"

namespace fedbe::harness {

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

std::string fmt2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw RunError("cannot write: " + path);
    out << content;
    if (!out) throw RunError("write failed: " + path);
}

// Minimal polyline chart with axes and tick labels; no external renderer.
std::string line_chart_svg(const std::string& title, const std::string& y_label,
                           const std::vector<double>& ys) {
    const double width = 640, height = 400;
    const double ml = 64, mr = 16, mt = 36, mb = 44;
    const double pw = width - ml - mr, ph = height - mt - mb;

    double y_min = 0.0, y_max = 1e-9;
    for (double y : ys) {
        y_min = std::min(y_min, y);
        y_max = std::max(y_max, y);
    }
    y_max *= 1.05;
    const std::size_t n = ys.size();
    const double x_max = n > 1 ? static_cast<double>(n - 1) : 1.0;

    auto px = [&](double x) { return ml + pw * (x / x_max); };
    auto py = [&](double y) { return mt + ph * (1.0 - (y - y_min) / (y_max - y_min)); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
    // axes
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
        << mt + ph << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw
        << "\" y2=\"" << mt + ph << "\" stroke=\"black\"/>\n";
    // ticks
    for (int i = 0; i <= 5; ++i) {
        const double fy = y_min + (y_max - y_min) * i / 5.0;
        const double yy = py(fy);
        svg << "<line x1=\"" << ml - 4 << "\" y1=\"" << fmt2(yy) << "\" x2=\"" << ml
            << "\" y2=\"" << fmt2(yy) << "\" stroke=\"black\"/>\n";
        svg << "<text x=\"" << ml - 8 << "\" y=\"" << fmt2(yy + 4)
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
            << fmt(std::round(fy * 1000.0) / 1000.0) << "</text>\n";
        const double fx = x_max * i / 5.0;
        const double xx = px(fx);
        svg << "<line x1=\"" << fmt2(xx) << "\" y1=\"" << mt + ph << "\" x2=\"" << fmt2(xx)
            << "\" y2=\"" << mt + ph + 4 << "\" stroke=\"black\"/>\n";
        svg << "<text x=\"" << fmt2(xx) << "\" y=\"" << mt + ph + 18
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
            << fmt(std::round(fx)) << "</text>\n";
    }
    svg << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 8
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">round</text>\n";
    svg << "<text x=\"16\" y=\"" << mt + ph / 2
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
        << "transform=\"rotate(-90 16 " << mt + ph / 2 << ")\">" << y_label << "</text>\n";

    if (!ys.empty()) {
        svg << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < n; ++i) {
            if (i) svg << ' ';
            svg << fmt2(px(static_cast<double>(i))) << ',' << fmt2(py(ys[i]));
        }
        svg << "\"/>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

} // namespace

void emit_report(const MetricsSeries& series, const std::string& out_dir) {
    if (series.rounds() == 0) throw InputError("emit_report: empty series");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw RunError("cannot create output directory: " + out_dir);

    std::ostringstream csv;
    csv << "round,accuracy,cum_seconds,mean_assignment_size\n";
    for (std::size_t r = 0; r < series.rounds(); ++r) {
        csv << r << ',' << fmt(series.accuracy[r]) << ',' << fmt(series.cumulative_seconds[r])
            << ',' << fmt(series.mean_assignment_size[r]) << '\n';
    }
    write_file(out_dir + "/metrics.csv", csv.str());

    nlohmann::json j;
    j["method"] = series.method;
    j["rounds"] = series.rounds();
    j["acc_general_before"] = series.acc_general_before;
    j["acc_general_after"] = series.acc_general_after;
    j["acc_general_after_active"] = series.acc_general_after_active;
    j["forgetting"] = series.forgetting;
    j["forgetting_active"] = series.forgetting_active;
    j["final_downstream_accuracy"] = series.final_downstream_accuracy;
    j["target_accuracy"] = series.target_accuracy;
    j["pretrain_steps"] = series.pretrain_steps;
    j["total_seconds"] =
        series.cumulative_seconds.empty() ? 0.0 : series.cumulative_seconds.back();
    if (series.time_to_target_round) {
        j["time_to_target"] = nlohmann::json{{"reached", true},
                                             {"round", *series.time_to_target_round},
                                             {"cum_seconds", *series.time_to_target_seconds}};
    } else {
        j["time_to_target"] = nlohmann::json{{"reached", false}};
    }
    write_file(out_dir + "/summary.json", j.dump(2) + "\n");

    write_file(out_dir + "/accuracy.svg",
               line_chart_svg("downstream accuracy", "accuracy", series.accuracy));
    write_file(out_dir + "/time.svg",
               line_chart_svg("cumulative simulated time", "seconds", series.cumulative_seconds));
}

std::string series_to_json(const MetricsSeries& series) {
    nlohmann::json j;
    j["method"] = series.method;
    j["accuracy"] = series.accuracy;
    j["cumulative_seconds"] = series.cumulative_seconds;
    j["mean_assignment_size"] = series.mean_assignment_size;
    j["acc_general_before"] = series.acc_general_before;
    j["acc_general_after"] = series.acc_general_after;
    j["acc_general_after_active"] = series.acc_general_after_active;
    j["forgetting"] = series.forgetting;
    j["forgetting_active"] = series.forgetting_active;
    j["final_downstream_accuracy"] = series.final_downstream_accuracy;
    j["target_accuracy"] = series.target_accuracy;
    j["pretrain_steps"] = series.pretrain_steps;
    if (series.time_to_target_round) {
        j["time_to_target_round"] = *series.time_to_target_round;
        j["time_to_target_seconds"] = *series.time_to_target_seconds;
    }
    return j.dump();
}

void render_charts(const std::string& dir) {
    std::ifstream in(dir + "/metrics.csv");
    if (!in) throw RunError("cannot open " + dir + "/metrics.csv");
    std::string line;
    if (!std::getline(in, line)) throw RunError("empty metrics.csv");
    std::vector<double> acc, secs;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(row, field, ',')) fields.push_back(field);
        if (fields.size() < 3) throw RunError("malformed metrics.csv row: " + line);
        acc.push_back(std::stod(fields[1]));
        secs.push_back(std::stod(fields[2]));
    }
    write_file(dir + "/accuracy.svg", line_chart_svg("downstream accuracy", "accuracy", acc));
    write_file(dir + "/time.svg", line_chart_svg("cumulative simulated time", "seconds", secs));
}

} // namespace fedbe::harness
