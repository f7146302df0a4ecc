#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "whathow/runner.hpp"

namespace whathow {

namespace detail {

/// Shortest representation that round-trips the double; locale-independent,
/// so the CSV bytes are stable for a fixed seed and platform.
inline std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string quoted = "\"";
    for (char c : s) {
        if (c == '"') quoted += '"';
        quoted += c;
    }
    return quoted + "\"";
}

}  // namespace detail

/// `metrics.csv`: one row per evaluation event, sorted by (trial, iteration).
/// The accuracy field is left empty for regression records.
inline void write_metrics_csv(std::vector<MetricsRecord> records, const std::string& path) {
    std::stable_sort(records.begin(), records.end(), [](const MetricsRecord& a, const MetricsRecord& b) {
        return a.trial != b.trial ? a.trial < b.trial : a.iteration < b.iteration;
    });
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write metrics file: " + path);
    out << "trial,iteration,task,phase,loss,accuracy\n";
    for (const auto& r : records) {
        out << r.trial << ',' << r.iteration << ',' << r.task << ',' << detail::csv_field(phase_name(r.phase)) << ','
            << detail::format_double(r.loss) << ',';
        if (r.accuracy) out << detail::format_double(*r.accuracy);
        out << '\n';
    }
}

inline nlohmann::json summary_to_json(const std::vector<SummaryRow>& rows, const std::string& experiment,
                                      const std::string& learner, int trials) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& row : rows) {
        nlohmann::json entry{{"task", row.task},
                             {"phase", phase_name(row.phase)},
                             {"loss", {{"mean", row.loss_mean}, {"std", row.loss_std}}}};
        if (row.accuracy_mean)
            entry["accuracy"] = {{"mean", *row.accuracy_mean}, {"std", *row.accuracy_std}};
        tasks.push_back(std::move(entry));
    }
    return nlohmann::json{{"experiment", experiment}, {"learner", learner}, {"trials", trials}, {"tasks", tasks}};
}

/// Writes `metrics.csv` and `summary.json` under `dir`.
inline void emit_metrics(const std::vector<MetricsRecord>& records, const std::string& dir,
                         const std::string& experiment, const std::string& learner, int trials) {
    std::filesystem::create_directories(dir);
    write_metrics_csv(records, (std::filesystem::path(dir) / "metrics.csv").string());
    nlohmann::json summary = summary_to_json(aggregate_trials(records), experiment, learner, trials);
    std::ofstream out(std::filesystem::path(dir) / "summary.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write summary under: " + dir);
    out << summary.dump(2) << "\n";
}

/// Side-by-side per-task table from several summary files of the same
/// experiment: eval-phase accuracy for classification, loss otherwise.
inline std::string compare_report(const std::vector<std::string>& summary_paths) {
    if (summary_paths.size() < 2) throw std::invalid_argument("compare_report: need at least two summaries");

    struct Column {
        std::string learner;
        std::map<int, std::string> cells;
    };
    std::string experiment;
    std::vector<Column> columns;
    std::vector<int> task_order;

    for (const auto& path : summary_paths) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open summary: " + path);
        nlohmann::json j;
        in >> j;
        const std::string exp = j.at("experiment").get<std::string>();
        if (experiment.empty())
            experiment = exp;
        else if (exp != experiment)
            throw std::runtime_error("mismatched experiment tags: '" + experiment + "' vs '" + exp + "' in " + path);

        Column col;
        col.learner = j.at("learner").get<std::string>();
        for (const auto& entry : j.at("tasks")) {
            if (entry.at("phase").get<std::string>() != "eval") continue;
            const int task = entry.at("task").get<int>();
            const auto& metric = entry.contains("accuracy") ? entry.at("accuracy") : entry.at("loss");
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.4f ± %.4f", metric.at("mean").get<double>(),
                          metric.at("std").get<double>());
            col.cells[task] = buf;
            if (std::find(task_order.begin(), task_order.end(), task) == task_order.end()) task_order.push_back(task);
        }
        columns.push_back(std::move(col));
    }
    std::sort(task_order.begin(), task_order.end());

    std::string out = "| task |";
    for (const auto& c : columns) out += " " + c.learner + " |";
    out += "\n|---|";
    for (std::size_t i = 0; i < columns.size(); ++i) out += "---|";
    out += "\n";
    for (int task : task_order) {
        out += "| " + std::to_string(task) + " |";
        for (const auto& c : columns) {
            auto it = c.cells.find(task);
            out += " " + (it == c.cells.end() ? std::string("-") : it->second) + " |";
        }
        out += "\n";
    }
    return out;
}

}  // namespace whathow
