#include <gtest/gtest.h>

#include "whathow/runner.hpp"
#include "whathow/tasks.hpp"

using namespace whathow;

namespace {

// The update path receives exactly (batch, ctx) and nothing else; there is no
// task identity to leak through this interface.
template <class T>
concept CarriesTaskIdentity = requires(T t) { t.task; } || requires(T t) { t.task_index; } ||
                              requires(T t) { t.head; };
static_assert(!CarriesTaskIdentity<Minibatch>);
static_assert(!CarriesTaskIdentity<ContextWindow>);

/// Records everything it is handed so protocol invariants can be asserted.
/// The record buffer is owned by the test; the learner dies with run_stream.
class ProbeLearner : public Learner {
public:
    struct Seen {
        Minibatch batch;
        ContextWindow ctx;
    };
    using Log = std::vector<Seen>;

    explicit ProbeLearner(std::shared_ptr<Log> log) : seen_(std::move(log)) {}

    StepMetrics observe(const Minibatch& batch, const ContextWindow& ctx) override {
        seen_->push_back({batch, ctx});
        return {0.5, std::nullopt};
    }

    StepMetrics evaluate(const Dataset&, const ContextWindow&) const override { return {0.25, std::nullopt}; }

    std::unique_ptr<Learner> clone() const override { return std::make_unique<ProbeLearner>(*this); }

private:
    std::shared_ptr<Log> seen_;
};

LearnerConfig sine_learner_config(const std::string&) {
    LearnerConfig cfg;
    cfg.kind = TaskKind::regression;
    cfg.model = ModelSpec::mlp_spec({1, 16, 1}, Nonlinearity::tanh_fn);
    cfg.eta = 5.0;
    cfg.sigma0 = 0.03;
    cfg.mc_samples = 3;
    cfg.inner = InnerLoopConfig{0.05, 3, true, 0.0};
    cfg.threads = 2;
    return cfg;
}

StreamConfig small_stream(int tasks, int iters, int trials) {
    StreamConfig cfg;
    cfg.n_tasks = tasks;
    cfg.iters_per_task = iters;
    cfg.batch_size = 16;
    cfg.trials = trials;
    cfg.seed = 99;
    return cfg;
}

ExperimentBuilder sine_builder(int tasks) {
    return [tasks](Rng& rng) { return sine_stream(rng, tasks); };
}

}  // namespace

TEST(RunStream, SingleStationaryTaskLossDecreases) {
    StreamConfig cfg = small_stream(1, 120, 1);
    auto records = run_stream(cfg, sine_builder(1), [&](Rng& init_rng, std::uint64_t) {
        LearnerConfig lc = sine_learner_config("adam");
        return std::make_unique<AdamLearner>(lc, init_rng);
    });
    double head = 0.0, tail = 0.0;
    int n = 0;
    for (const auto& r : records)
        if (r.phase == Phase::train) {
            if (r.iteration < 20) {
                head += r.loss;
                ++n;
            }
            if (r.iteration >= 100) tail += r.loss;
        }
    EXPECT_LT(tail / 20.0, head / n);
}

TEST(RunStream, ContextIsAlwaysThePreviousBatch) {
    StreamConfig cfg = small_stream(2, 10, 1);
    auto log = std::make_shared<ProbeLearner::Log>();
    run_stream(cfg, sine_builder(2), [&](Rng&, std::uint64_t) { return std::make_unique<ProbeLearner>(log); });
    const auto& seen = *log;
    ASSERT_EQ(seen.size(), 20u);
    // t = 0: the batch doubles as its own context.
    EXPECT_EQ(seen[0].ctx.x.data, seen[0].batch.x.data);
    EXPECT_EQ(seen[0].ctx.y.data, seen[0].batch.y.data);
    // t > 0: the context is the previous batch with its targets, across task
    // boundaries too.
    for (std::size_t t = 1; t < seen.size(); ++t) {
        EXPECT_EQ(seen[t].ctx.x.data, seen[t - 1].batch.x.data);
        EXPECT_EQ(seen[t].ctx.y.data, seen[t - 1].batch.y.data);
    }
}

TEST(RunStream, DeterministicForFixedSeed) {
    StreamConfig cfg = small_stream(2, 15, 2);
    auto make = [](Rng& init_rng, std::uint64_t sampler_seed) {
        LearnerConfig lc = sine_learner_config("metabgd");
        lc.sampler_seed = sampler_seed;
        return make_learner("metabgd", lc, init_rng);
    };
    auto a = run_stream(cfg, sine_builder(2), make);
    auto b = run_stream(cfg, sine_builder(2), make);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].trial, b[i].trial);
        EXPECT_EQ(a[i].iteration, b[i].iteration);
        EXPECT_EQ(a[i].task, b[i].task);
        EXPECT_EQ(a[i].phase, b[i].phase);
        EXPECT_EQ(a[i].loss, b[i].loss);  // bitwise
        EXPECT_EQ(a[i].accuracy.has_value(), b[i].accuracy.has_value());
        if (a[i].accuracy) EXPECT_EQ(*a[i].accuracy, *b[i].accuracy);
    }
}

TEST(Evaluation, RepeatedEvaluationIsIdenticalAndNonMutating) {
    Rng data_rng(7);
    auto tasks = sine_stream(data_rng, 2);
    Rng init_rng(8);
    LearnerConfig lc = sine_learner_config("bgd");
    lc.sampler_seed = 123;
    auto learner = make_learner("bgd", lc, init_rng);

    // A couple of online steps so the state is not the initialization.
    Rng stream_rng(9);
    for (int i = 0; i < 3; ++i) {
        Minibatch b = tasks[0].train.gather({stream_rng.integer(tasks[0].train.size()),
                                             stream_rng.integer(tasks[0].train.size())});
        learner->observe(b, b);
    }

    StreamConfig cfg = small_stream(2, 5, 1);
    Rng eval1(42), eval2(42);
    auto r1 = evaluate_all_tasks(*learner, tasks, cfg, eval1, 0, 100);
    auto r2 = evaluate_all_tasks(*learner, tasks, cfg, eval2, 0, 100);
    ASSERT_EQ(r1.size(), r2.size());
    for (std::size_t i = 0; i < r1.size(); ++i) EXPECT_EQ(r1[i].loss, r2[i].loss);
}

TEST(Aggregation, SingleTrialHasZeroStd) {
    std::vector<MetricsRecord> records = {{0, 10, 1, Phase::eval, 0.8, 0.9}};
    auto rows = aggregate_trials(records);
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_DOUBLE_EQ(rows[0].loss_mean, 0.8);
    EXPECT_DOUBLE_EQ(rows[0].loss_std, 0.0);
}

TEST(Aggregation, IdenticalTrialsHaveZeroStd) {
    std::vector<MetricsRecord> records = {{0, 10, 1, Phase::eval, 0.8, {}}, {1, 10, 1, Phase::eval, 0.8, {}}};
    auto rows = aggregate_trials(records);
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_DOUBLE_EQ(rows[0].loss_std, 0.0);
}

TEST(Aggregation, TwoTrialHandValues) {
    std::vector<MetricsRecord> records = {{0, 10, 1, Phase::eval, 0.8, 0.8}, {1, 10, 1, Phase::eval, 1.0, 1.0}};
    auto rows = aggregate_trials(records);
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_NEAR(rows[0].loss_mean, 0.9, 1e-12);
    EXPECT_NEAR(rows[0].loss_std, 0.1, 1e-12);  // population std
    EXPECT_NEAR(*rows[0].accuracy_mean, 0.9, 1e-12);
}

TEST(Aggregation, GroupsByTaskAndPhase) {
    std::vector<MetricsRecord> records = {
        {0, 0, 1, Phase::train, 1.0, {}}, {0, 1, 1, Phase::train, 0.5, {}},  // averaged within trial
        {0, 10, 1, Phase::eval, 0.3, {}}, {0, 10, 2, Phase::eval, 0.6, {}},
    };
    auto rows = aggregate_trials(records);
    ASSERT_EQ(rows.size(), 3u);
    for (const auto& row : rows) {
        if (row.phase == Phase::train) EXPECT_DOUBLE_EQ(row.loss_mean, 0.75);
        if (row.phase == Phase::eval && row.task == 2) EXPECT_DOUBLE_EQ(row.loss_mean, 0.6);
    }
}

TEST(Replay, StaleContextThenRecovery) {
    // Replay rows exist per task and iterate the context forward; the first
    // row of each task must be predicted under the previous task's context.
    StreamConfig cfg = small_stream(2, 8, 1);
    cfg.run_replay = true;
    cfg.replay_iters = 4;
    auto records = run_stream(cfg, sine_builder(2), [&](Rng& init_rng, std::uint64_t sampler_seed) {
        LearnerConfig lc = sine_learner_config("metabgd");
        lc.sampler_seed = sampler_seed;
        return make_learner("metabgd", lc, init_rng);
    });
    int replay_rows = 0;
    long last_iter = -1;
    for (const auto& r : records)
        if (r.phase == Phase::replay) {
            ++replay_rows;
            EXPECT_GT(r.iteration, last_iter);
            last_iter = r.iteration;
        }
    EXPECT_EQ(replay_rows, 2 * 4);
}

TEST(RunStream, EpochsModeCoversEachSampleOncePerEpoch) {
    StreamConfig cfg = small_stream(1, 2, 1);  // 2 epochs
    cfg.epochs_mode = true;
    cfg.batch_size = 7;
    auto log = std::make_shared<ProbeLearner::Log>();

    // 20-sample regression task.
    auto builder = [](Rng& rng) {
        Tensor x{Shape{20, 1}};
        for (std::size_t i = 0; i < 20; ++i) x.data[i] = rng.uniform(-1.0, 1.0);
        Dataset d = Dataset::of(x);
        d.y = Tensor{Shape{20, 1}, 0.0};
        TaskData t;
        t.train = d;
        t.test = d;
        return std::vector<TaskData>{t};
    };
    run_stream(cfg, builder, [&](Rng&, std::uint64_t) { return std::make_unique<ProbeLearner>(log); });
    const auto& seen = *log;
    // ceil(20 / 7) = 3 batches per epoch, 2 epochs.
    ASSERT_EQ(seen.size(), 6u);
    std::size_t count = 0;
    for (const auto& s : seen) count += s.batch.size();
    EXPECT_EQ(count, 40u);
}
