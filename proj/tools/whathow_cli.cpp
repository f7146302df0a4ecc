#include <filesystem>
#include <fstream>
#include <iostream>

#include "whathow/cli.hpp"
#include "whathow/experiments.hpp"
#include "whathow/metrics_io.hpp"

using namespace whathow;

namespace {

void print_run_summary(const std::vector<MetricsRecord>& records) {
    auto rows = aggregate_trials(records);
    std::printf("%-6s %-8s %12s %12s %12s\n", "task", "phase", "loss", "loss_std", "accuracy");
    for (const auto& row : rows) {
        if (row.phase == Phase::train) continue;
        std::printf("%-6d %-8s %12.5f %12.5f ", row.task, phase_name(row.phase), row.loss_mean, row.loss_std);
        if (row.accuracy_mean)
            std::printf("%7.4f±%.4f\n", *row.accuracy_mean, *row.accuracy_std);
        else
            std::printf("%12s\n", "-");
    }
}

}  // namespace

int main(int argc, char** argv) {
    try {
        CliCommand cmd = parse_cli({argv + 1, argv + argc});
        if (cmd.kind == CliCommand::Kind::help) {
            std::cout << cmd.help_text;
            return 0;
        }
        if (cmd.kind == CliCommand::Kind::report) {
            const std::string table = compare_report(cmd.summaries);
            if (cmd.report_out.empty()) {
                std::cout << table;
            } else {
                std::ofstream out(cmd.report_out);
                if (!out) throw std::runtime_error("cannot write report to " + cmd.report_out);
                out << table;
            }
            return 0;
        }

        const ResolvedConfig& cfg = cmd.config;
        std::cerr << "running " << cfg.experiment << " with learner " << cfg.learner << ": " << cfg.n_tasks
                  << " tasks x " << cfg.iters << (cfg.experiment == "omniglot" ? " epochs" : " iterations") << ", "
                  << cfg.trials << " trial(s), seed " << cfg.seed << (cfg.first_order ? ", first-order" : "") << "\n";

        RunPlan plan = make_plan(cfg);
        std::vector<MetricsRecord> records = plan.run();

        std::filesystem::create_directories(cfg.out_dir);
        emit_config(cfg, (std::filesystem::path(cfg.out_dir) / "config.json").string());
        emit_metrics(records, cfg.out_dir, cfg.experiment, cfg.learner, cfg.trials);
        std::cerr << "wrote " << (std::filesystem::path(cfg.out_dir) / "metrics.csv").string() << " and summary.json\n";
        print_run_summary(records);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
