#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "whathow/config.hpp"
#include "whathow/runner.hpp"
#include "whathow/tasks.hpp"

namespace whathow {

/// Everything run_stream needs, assembled from a resolved configuration.
struct RunPlan {
    StreamConfig stream;
    LearnerConfig learner;
    ExperimentBuilder builder;
    std::string experiment;
    std::string learner_tag;

    std::vector<MetricsRecord> run() const {
        LearnerConfig lc = learner;
        const std::string tag = learner_tag;
        return run_stream(stream, builder, [lc, tag](Rng& init_rng, std::uint64_t sampler_seed) mutable {
            lc.sampler_seed = sampler_seed;
            return make_learner(tag, lc, init_rng);
        });
    }
};

namespace detail {

inline std::string require_file(const std::filesystem::path& p, const std::string& what) {
    if (!std::filesystem::exists(p))
        throw std::runtime_error("missing data path for " + what + ": " + p.string() +
                                 " (point --data-dir at the dataset, or generate one with the datagen tool)");
    return p.string();
}

}  // namespace detail

inline RunPlan make_plan(const ResolvedConfig& c) {
    RunPlan plan;
    plan.experiment = c.experiment;
    plan.learner_tag = c.learner;

    plan.stream.n_tasks = c.n_tasks;
    plan.stream.iters_per_task = c.iters;
    plan.stream.batch_size = static_cast<std::size_t>(c.batch_size);
    plan.stream.trials = c.trials;
    plan.stream.seed = c.seed;
    plan.stream.adapt_steps = c.steps;

    plan.learner.eta = c.eta;
    plan.learner.sigma0 = c.sigma0;
    plan.learner.mc_samples = c.mc_samples;
    plan.learner.inner = InnerLoopConfig{c.lambda_in, c.steps, !c.first_order,
                                         c.learner == "metacog" ? c.gamma : (c.learner == "metaella" ? c.mu_l1 : 0.0)};
    plan.learner.adam = AdamConfig{c.adam_lr, 0.9, 0.999, 1e-8};
    plan.learner.threads = c.threads;

    if (c.experiment == "sine") {
        plan.learner.kind = TaskKind::regression;
        plan.learner.model = ModelSpec::mlp_spec({1, 50, 50, 1}, Nonlinearity::tanh_fn);
        const int n = c.n_tasks;
        plan.builder = [n](Rng& rng) { return sine_stream(rng, n); };
        return plan;
    }

    if (c.experiment == "permuted-mnist") {
        plan.learner.kind = TaskKind::classification;
        plan.learner.classes = 10;
        plan.learner.model = ModelSpec::mlp_spec({784, 300, 300, 10}, Nonlinearity::relu_fn);
        plan.stream.run_replay = true;

        namespace fs = std::filesystem;
        const fs::path dir = c.data_dir.empty() ? fs::path(".") : fs::path(c.data_dir);
        auto train = std::make_shared<MnistData>(
            load_mnist_idx(detail::require_file(dir / "train-images-idx3-ubyte", "permuted-mnist"),
                           detail::require_file(dir / "train-labels-idx1-ubyte", "permuted-mnist")));
        auto test = std::make_shared<MnistData>(
            load_mnist_idx(detail::require_file(dir / "t10k-images-idx3-ubyte", "permuted-mnist"),
                           detail::require_file(dir / "t10k-labels-idx1-ubyte", "permuted-mnist")));
        const int n = c.n_tasks;
        plan.builder = [train, test, n](Rng& rng) { return permuted_mnist_stream(*train, *test, rng, n); };
        return plan;
    }

    // omniglot
    plan.learner.kind = TaskKind::classification;
    plan.learner.classes = static_cast<std::size_t>(c.n_tasks) * kAlphabetClasses;
    if (c.learner == "bgd-multihead")
        plan.learner.model = ModelSpec::cnn_spec(0, static_cast<std::size_t>(c.n_tasks), kAlphabetClasses);
    else
        plan.learner.model = ModelSpec::cnn_spec(plan.learner.classes);
    plan.stream.epochs_mode = true;

    if (c.data_dir.empty())
        throw std::runtime_error("missing data path for omniglot: pass --data-dir (the datagen tool can create one)");
    detail::require_file(c.data_dir, "omniglot");
    const std::string root = c.data_dir;
    const int n = c.n_tasks;
    plan.builder = [root, n](Rng& rng) { return load_omniglot(root, n, rng); };
    return plan;
}

}  // namespace whathow
