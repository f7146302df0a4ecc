#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "whathow/data_types.hpp"
#include "whathow/learners.hpp"
#include "whathow/tensor.hpp"

namespace whathow {

/// Stream protocol settings: N tasks presented consecutively, each for M
/// iterations (or M epochs when epochs_mode is set), one mini-batch per
/// iteration. The learner never receives a task index or a boundary signal;
/// the context window is always the previous mini-batch with its targets.
struct StreamConfig {
    int n_tasks = 1;
    int iters_per_task = 1000;  // epochs per task in epochs_mode
    bool epochs_mode = false;
    std::size_t batch_size = 128;
    int trials = 10;
    std::uint64_t seed = 1;

    bool run_replay = false;  // replay protocol after evaluation
    int replay_iters = 10;
    int adapt_steps = 5;  // evaluation-time optimizer steps for the baselines
};

enum class Phase { train, eval, replay };

inline const char* phase_name(Phase p) {
    switch (p) {
        case Phase::train: return "train";
        case Phase::eval: return "eval";
        default: return "replay";
    }
}

/// One evaluation event. Tasks are numbered from 1 in presentation order;
/// iterations count on through evaluation and replay.
struct MetricsRecord {
    int trial = 0;
    long iteration = 0;
    int task = 0;
    Phase phase = Phase::train;
    double loss = 0.0;
    std::optional<double> accuracy;
};

using ExperimentBuilder = std::function<std::vector<TaskData>(Rng& data_rng)>;
using LearnerFactory = std::function<std::unique_ptr<Learner>(Rng& init_rng, std::uint64_t sampler_seed)>;

namespace detail {

inline std::vector<std::size_t> draw_indices(std::size_t n, std::size_t batch, Rng& rng) {
    std::vector<std::size_t> idx(batch);
    for (std::size_t i = 0; i < batch; ++i) idx[i] = rng.integer(n);
    return idx;
}

inline void set_head_if_able(Learner& learner, int task_index) {
    if (auto* h = dynamic_cast<HeadSelector*>(&learner)) h->set_active_head(task_index);
}

inline bool wants_head(const Learner& learner) { return dynamic_cast<const HeadSelector*>(&learner) != nullptr; }

}  // namespace detail

/// Post-stream evaluation: for each task, draw one training mini-batch as the
/// context, give baselines `adapt_steps` optimizer steps on it (on a copy;
/// the learner itself is never mutated), and measure on the task's full test
/// set. Meta learners adapt inside evaluate and need no optimizer steps.
inline std::vector<MetricsRecord> evaluate_all_tasks(const Learner& learner, const std::vector<TaskData>& tasks,
                                                     const StreamConfig& cfg, Rng& eval_rng, int trial,
                                                     long iteration) {
    std::vector<MetricsRecord> records;
    for (std::size_t j = 0; j < tasks.size(); ++j) {
        const Dataset& train = tasks[j].train;
        ContextWindow ctx = train.gather(detail::draw_indices(train.size(), std::min(cfg.batch_size, train.size()), eval_rng));
        std::unique_ptr<Learner> probe = learner.clone();
        detail::set_head_if_able(*probe, static_cast<int>(j));
        probe->adapt(ctx, cfg.adapt_steps);
        StepMetrics m = probe->evaluate(tasks[j].test, ctx);
        records.push_back({trial, iteration, static_cast<int>(j) + 1, Phase::eval, m.loss, m.accuracy});
    }
    return records;
}

/// Replays the tasks in their original order for a few iterations each,
/// continuing online updates. Each row reports the prediction made from the
/// current context before the corresponding update, so the first iteration
/// after a switch still sees the previous task's context.
inline std::vector<MetricsRecord> replay_protocol(Learner& learner, const std::vector<TaskData>& tasks,
                                                  const StreamConfig& cfg, ContextWindow& ctx, Rng& stream_rng,
                                                  int trial, long start_iteration) {
    std::vector<MetricsRecord> records;
    long iter = start_iteration;
    for (std::size_t j = 0; j < tasks.size(); ++j) {
        detail::set_head_if_able(learner, static_cast<int>(j));
        const Dataset& train = tasks[j].train;
        for (int i = 0; i < cfg.replay_iters; ++i, ++iter) {
            Minibatch batch = train.gather(detail::draw_indices(train.size(), std::min(cfg.batch_size, train.size()), stream_rng));
            if (ctx.empty()) ctx = batch;
            StepMetrics pred = learner.evaluate(dataset_from(batch), ctx);
            records.push_back({trial, iter, static_cast<int>(j) + 1, Phase::replay, pred.loss, pred.accuracy});
            learner.observe(batch, ctx);
            ctx = batch;
        }
    }
    return records;
}

/// Runs the full protocol for every trial: the sequential stream, the
/// end-of-stream evaluation, and (when configured) the replay pass. Trials
/// differ only in their derived seeds; identical configuration and seed give
/// an identical record list.
inline std::vector<MetricsRecord> run_stream(const StreamConfig& cfg, const ExperimentBuilder& build_experiment,
                                             const LearnerFactory& make) {
    std::vector<MetricsRecord> all;
    for (int trial = 0; trial < cfg.trials; ++trial) {
        const std::uint64_t base = mix_seed(cfg.seed, static_cast<std::uint64_t>(trial));
        Rng data_rng(mix_seed(base, 0));
        Rng init_rng(mix_seed(base, 1));
        Rng stream_rng(mix_seed(base, 2));
        Rng eval_rng(mix_seed(base, 4));

        std::vector<TaskData> tasks = build_experiment(data_rng);
        if (static_cast<int>(tasks.size()) != cfg.n_tasks)
            throw std::runtime_error("experiment produced " + std::to_string(tasks.size()) + " tasks, expected " +
                                     std::to_string(cfg.n_tasks));
        std::unique_ptr<Learner> learner = make(init_rng, mix_seed(base, 3));

        ContextWindow ctx;
        long iter = 0;
        for (std::size_t j = 0; j < tasks.size(); ++j) {
            detail::set_head_if_able(*learner, static_cast<int>(j));
            const Dataset& train = tasks[j].train;

            std::vector<std::vector<std::size_t>> batches;
            if (cfg.epochs_mode) {
                std::vector<std::size_t> order(train.size());
                for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
                for (int e = 0; e < cfg.iters_per_task; ++e) {
                    stream_rng.shuffle(order);
                    for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
                        std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(off),
                                                   order.begin() + static_cast<std::ptrdiff_t>(
                                                                       std::min(order.size(), off + cfg.batch_size)));
                        batches.push_back(std::move(b));
                    }
                }
            } else {
                for (int i = 0; i < cfg.iters_per_task; ++i)
                    batches.push_back(detail::draw_indices(train.size(), std::min(cfg.batch_size, train.size()), stream_rng));
            }

            for (const auto& idx : batches) {
                Minibatch batch = train.gather(idx);
                if (ctx.empty()) ctx = batch;  // first iteration: the batch doubles as its own context
                StepMetrics m;
                try {
                    m = learner->observe(batch, ctx);
                } catch (const std::exception& e) {
                    throw std::runtime_error("trial " + std::to_string(trial) + ", iteration " + std::to_string(iter) +
                                             ": " + e.what());
                }
                all.push_back({trial, iter, static_cast<int>(j) + 1, Phase::train, m.loss, m.accuracy});
                ctx = batch;
                ++iter;
            }
        }

        auto eval_records = evaluate_all_tasks(*learner, tasks, cfg, eval_rng, trial, iter);
        all.insert(all.end(), eval_records.begin(), eval_records.end());
        ++iter;

        if (cfg.run_replay) {
            auto replay_records = replay_protocol(*learner, tasks, cfg, ctx, stream_rng, trial, iter);
            all.insert(all.end(), replay_records.begin(), replay_records.end());
        }
    }
    return all;
}

/// Per-(task, phase) mean and population standard deviation across trials.
/// Within a trial, rows of the same (task, phase) group are averaged first.
struct SummaryRow {
    int task = 0;
    Phase phase = Phase::eval;
    int trials = 0;
    double loss_mean = 0.0;
    double loss_std = 0.0;
    std::optional<double> accuracy_mean;
    std::optional<double> accuracy_std;
};

inline std::vector<SummaryRow> aggregate_trials(const std::vector<MetricsRecord>& records) {
    struct Key {
        int task;
        Phase phase;
        bool operator<(const Key& o) const { return task != o.task ? task < o.task : phase < o.phase; }
    };
    struct PerTrial {
        double loss = 0.0;
        double acc = 0.0;
        std::size_t n = 0;
        bool has_acc = false;
    };
    std::map<Key, std::map<int, PerTrial>> groups;
    for (const auto& r : records) {
        PerTrial& p = groups[{r.task, r.phase}][r.trial];
        p.loss += r.loss;
        if (r.accuracy) {
            p.acc += *r.accuracy;
            p.has_acc = true;
        }
        p.n += 1;
    }

    auto stats = [](const std::vector<double>& xs) {
        double mean = 0.0;
        for (double x : xs) mean += x;
        mean /= static_cast<double>(xs.size());
        double var = 0.0;
        for (double x : xs) var += (x - mean) * (x - mean);
        var /= static_cast<double>(xs.size());
        return std::pair<double, double>{mean, std::sqrt(var)};
    };

    std::vector<SummaryRow> rows;
    for (const auto& [key, trials] : groups) {
        std::vector<double> losses, accs;
        bool any_acc = false;
        for (const auto& [trial, p] : trials) {
            losses.push_back(p.loss / static_cast<double>(p.n));
            if (p.has_acc) {
                accs.push_back(p.acc / static_cast<double>(p.n));
                any_acc = true;
            }
        }
        SummaryRow row;
        row.task = key.task;
        row.phase = key.phase;
        row.trials = static_cast<int>(losses.size());
        auto [lm, ls] = stats(losses);
        row.loss_mean = lm;
        row.loss_std = ls;
        if (any_acc) {
            auto [am, as] = stats(accs);
            row.accuracy_mean = am;
            row.accuracy_std = as;
        }
        rows.push_back(row);
    }
    return rows;
}

}  // namespace whathow
