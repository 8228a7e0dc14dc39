#include "patchkit/errors.hpp"
#include "patchkit/runner.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace patchkit {

using nlohmann::json;

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::string fmt_field(int v) { return v < 0 ? "" : std::to_string(v); }

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    for (const char c : line) {
        if (c == ',') {
            out.push_back(field);
            field.clear();
        } else if (c != '\r') {
            field.push_back(c);
        }
    }
    out.push_back(field);
    return out;
}

} // namespace

void write_effects_csv(const EffectMatrix& matrix, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);

    out << "layer,head,position,window_center";
    for (const Metric m : matrix.metrics) out << "," << to_string(m);
    out << "\n";

    for (size_t t = 0; t < matrix.targets.size(); ++t) {
        const TargetDesc& d = matrix.targets[t];
        out << fmt_field(d.layer) << "," << fmt_field(d.head) << "," << fmt_field(d.position)
            << "," << fmt_field(d.window_center);
        for (size_t m = 0; m < matrix.metrics.size(); ++m)
            out << "," << fmt_double(matrix.effects[t][m]);
        out << "\n";
    }
    // Sweep statistics rows (inputs to the 2-SD detection rule).
    out << "mean,,,";
    for (const auto& st : matrix.stats) out << "," << fmt_double(st.mean);
    out << "\n";
    out << "sd,,,";
    for (const auto& st : matrix.stats) out << "," << fmt_double(st.sd);
    out << "\n";
}

EffectMatrix read_effects_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open effects CSV: " + path);

    std::string line;
    if (!std::getline(in, line)) throw ConfigError("empty effects CSV: " + path);
    const std::vector<std::string> header = split_csv_line(line);
    if (header.size() < 5 || header[0] != "layer" || header[1] != "head" ||
        header[2] != "position" || header[3] != "window_center")
        throw ConfigError("unrecognized effects CSV header in " + path);

    EffectMatrix mx;
    for (size_t i = 4; i < header.size(); ++i) mx.metrics.push_back(parse_metric(header[i]));

    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const std::vector<std::string> fields = split_csv_line(line);
        if (fields[0] == "mean" || fields[0] == "sd") continue; // recomputed below
        if (fields.size() != header.size())
            throw ConfigError("effects CSV row has " + std::to_string(fields.size()) +
                              " fields, header has " + std::to_string(header.size()));
        TargetDesc d;
        d.layer = fields[0].empty() ? -1 : std::stoi(fields[0]);
        d.head = fields[1].empty() ? -1 : std::stoi(fields[1]);
        d.position = fields[2].empty() ? -1 : std::stoi(fields[2]);
        d.window_center = fields[3].empty() ? -1 : std::stoi(fields[3]);
        mx.targets.push_back(d);
        std::vector<double> row;
        for (size_t i = 4; i < fields.size(); ++i) row.push_back(std::stod(fields[i]));
        mx.effects.push_back(std::move(row));
    }
    if (mx.targets.empty()) throw ConfigError("effects CSV has no target rows: " + path);
    mx.excluded_prompts.assign(mx.metrics.size(), 0);
    mx.excluded_cells.assign(mx.metrics.size(), 0);
    mx.finalize_stats();
    return mx;
}

void write_detections_json(const EffectMatrix& matrix,
                           const std::map<Metric, Detection>& detections,
                           const std::string& path) {
    json j;
    for (const auto& [metric, det] : detections) {
        json entry;
        entry["mean"] = det.mean;
        entry["sd"] = det.sd;
        json pos = json::array(), neg = json::array();
        for (const int t : det.positive) pos.push_back(matrix.targets[static_cast<size_t>(t)].label());
        for (const int t : det.negative) neg.push_back(matrix.targets[static_cast<size_t>(t)].label());
        entry["positive"] = pos;
        entry["negative"] = neg;
        j[to_string(metric)] = entry;
    }
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << j.dump(2) << "\n";
}

} // namespace patchkit
