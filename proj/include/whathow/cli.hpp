#pragma once

#include <CLI11.hpp>

#include <string>
#include <vector>

#include "whathow/config.hpp"

namespace whathow {

struct CliCommand {
    enum class Kind { run, report, help };
    Kind kind = Kind::help;
    ResolvedConfig config;                  // run
    std::vector<std::string> summaries;     // report
    std::string report_out;                 // report: optional output file
    std::string help_text;
};

/// Parses `run <experiment> --learner <tag> [...]` and `report <summary...>`.
/// Precedence for run settings: command line > config file > defaults.
inline CliCommand parse_cli(std::vector<std::string> args) {
    CLI::App app{"Task-agnostic continual meta-learning experiments"};
    app.require_subcommand(1);

    std::string experiment, learner, config_file;
    ConfigOverrides cli;
    std::uint64_t seed = 0;
    int trials = 0, threads = 0, steps = 0, mc_samples = 0, batch_size = 0, n_tasks = 0, iters = 0;
    double eta = 0, sigma0 = 0, lambda_in = 0, gamma = 0, mu_l1 = 0, adam_lr = 0;
    std::string data_dir, out_dir;
    bool full = false, first_order = false;

    CLI::App* run = app.add_subcommand("run", "Run an experiment stream");
    run->add_option("experiment", experiment, "sine | permuted-mnist | omniglot")->required();
    run->add_option("--learner", learner, "adam | bgd | bgd-multihead | metabgd | metacog | metaella")->required();
    run->add_option("--config", config_file, "JSON config file (overridden by command-line flags)");
    auto* o_seed = run->add_option("--seed", seed, "base RNG seed");
    auto* o_trials = run->add_option("--trials", trials, "number of seeded trials");
    auto* o_full = run->add_flag("--full", full, "published scale for the alphabet stream");
    auto* o_first = run->add_flag("--first-order", first_order, "truncate meta-gradients at the inner loop");
    auto* o_data = run->add_option("--data-dir", data_dir, "dataset directory (IDX files / alphabet tree)");
    auto* o_out = run->add_option("--out", out_dir, "output directory for metrics and summary");
    auto* o_threads = run->add_option("--threads", threads, "worker threads for the Monte Carlo samples");
    auto* o_eta = run->add_option("--eta", eta, "mean learning rate of the consolidation update");
    auto* o_sigma0 = run->add_option("--sigma0", sigma0, "initial parameter standard deviation");
    auto* o_lambda = run->add_option("--lambda-in", lambda_in, "inner-loop learning rate");
    auto* o_gamma = run->add_option("--gamma", gamma, "mask sparsity weight");
    auto* o_mu = run->add_option("--mu-l1", mu_l1, "code sparsity weight");
    auto* o_adam = run->add_option("--adam-lr", adam_lr, "Adam learning rate");
    auto* o_steps = run->add_option("--steps", steps, "inner-loop steps");
    auto* o_mc = run->add_option("--mc-samples", mc_samples, "Monte Carlo samples per update");
    auto* o_batch = run->add_option("--batch-size", batch_size, "mini-batch size");
    auto* o_tasks = run->add_option("--tasks", n_tasks, "tasks in the stream");
    auto* o_iters = run->add_option("--iters", iters, "iterations per task (epochs for omniglot)");

    std::vector<std::string> summaries;
    std::string report_out;
    CLI::App* report = app.add_subcommand("report", "Side-by-side table from summary.json files");
    report->add_option("summaries", summaries, "summary.json paths")->required()->expected(-2);
    report->add_option("--out", report_out, "write the table to a file instead of stdout");

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        CliCommand cmd;
        cmd.kind = CliCommand::Kind::help;
        cmd.help_text = app.help();
        return cmd;
    }  // other CLI::ParseError propagates to the caller

    if (report->parsed()) {
        CliCommand cmd;
        cmd.kind = CliCommand::Kind::report;
        cmd.summaries = std::move(summaries);
        cmd.report_out = std::move(report_out);
        return cmd;
    }

    if (o_seed->count()) cli.seed = seed;
    if (o_trials->count()) cli.trials = trials;
    if (o_full->count()) cli.full = full;
    if (o_first->count()) cli.first_order = first_order;
    if (o_data->count()) cli.data_dir = data_dir;
    if (o_out->count()) cli.out_dir = out_dir;
    if (o_threads->count()) cli.threads = threads;
    if (o_eta->count()) cli.eta = eta;
    if (o_sigma0->count()) cli.sigma0 = sigma0;
    if (o_lambda->count()) cli.lambda_in = lambda_in;
    if (o_gamma->count()) cli.gamma = gamma;
    if (o_mu->count()) cli.mu_l1 = mu_l1;
    if (o_adam->count()) cli.adam_lr = adam_lr;
    if (o_steps->count()) cli.steps = steps;
    if (o_mc->count()) cli.mc_samples = mc_samples;
    if (o_batch->count()) cli.batch_size = batch_size;
    if (o_tasks->count()) cli.n_tasks = n_tasks;
    if (o_iters->count()) cli.iters = iters;

    ConfigOverrides merged;
    if (!config_file.empty()) merged = load_config_file(config_file);
    merged.layer_over(cli);

    CliCommand cmd;
    cmd.kind = CliCommand::Kind::run;
    cmd.config = resolve_config(experiment, learner, merged);
    return cmd;
}

}  // namespace whathow
