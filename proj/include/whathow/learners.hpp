#pragma once

#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "whathow/data_types.hpp"
#include "whathow/meta.hpp"
#include "whathow/models.hpp"
#include "whathow/optimizers.hpp"

namespace whathow {

struct StepMetrics {
    double loss = 0.0;
    std::optional<double> accuracy;
};

/// Settings shared by every learner; fields irrelevant to a given learner are
/// ignored (eta/sigma0 for Adam, the inner loop for the baselines).
struct LearnerConfig {
    TaskKind kind = TaskKind::regression;
    ModelSpec model;
    std::size_t classes = 0;

    double eta = 1.0;
    double sigma0 = 0.05;
    int mc_samples = 10;

    InnerLoopConfig inner;
    AdamConfig adam;

    int threads = 1;
    std::uint64_t sampler_seed = 0;
};

inline std::optional<double> logits_accuracy(const Tensor& logits, const std::vector<int>& labels) {
    if (labels.empty()) return std::nullopt;
    const std::size_t classes = logits.shape[1];
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double* row = logits.data.data() + i * classes;
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c)
            if (row[c] > row[best]) best = c;
        if (static_cast<int>(best) == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Online learner contract. The update and evaluation paths receive only the
/// current batch and the context window; task identity is deliberately not
/// part of this interface.
class Learner {
public:
    virtual ~Learner() = default;

    /// One online update from (batch, ctx); returns the training metrics.
    virtual StepMetrics observe(const Minibatch& batch, const ContextWindow& ctx) = 0;

    /// Deterministic evaluation on a test set given a context window; must
    /// not mutate the learner.
    virtual StepMetrics evaluate(const Dataset& test, const ContextWindow& ctx) const = 0;

    /// Optimizer steps on the context data; used at evaluation time for the
    /// baselines (meta learners adapt inside evaluate and need nothing here).
    virtual void adapt(const ContextWindow& ctx, int steps) { (void)ctx, (void)steps; }

    virtual std::unique_ptr<Learner> clone() const = 0;
};

/// Implemented only by learners that legitimately receive task identity
/// (the multi-head baseline).
class HeadSelector {
public:
    virtual ~HeadSelector() = default;
    virtual void set_active_head(int head) = 0;
};

namespace detail {

constexpr std::size_t kEvalChunk = 256;

inline void check_finite_loss(double loss, const char* who) {
    if (!std::isfinite(loss)) throw std::runtime_error(std::string(who) + ": non-finite loss");
}

/// Runs fn(k) for k in [0, n) across up to `threads` workers; any exception
/// is rethrown on the calling thread.
template <class F>
void parallel_samples(int n, int threads, F&& fn) {
    const int t = std::min(std::max(threads, 1), n);
    if (t <= 1) {
        for (int k = 0; k < n; ++k) fn(k);
        return;
    }
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(t));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(t));
    for (int w = 0; w < t; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (int k = w; k < n; k += t) fn(k);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Plain Adam on the task parameters; ignores the context during training.
class AdamLearner : public Learner {
public:
    AdamLearner(LearnerConfig cfg, Rng& init_rng)
        : cfg_(std::move(cfg)), params_(init_params(cfg_.model, init_rng)), state_(AdamState::like(params_)) {}

    StepMetrics observe(const Minibatch& batch, const ContextWindow&) override { return step_on(batch); }

    StepMetrics evaluate(const Dataset& test, const ContextWindow&) const override {
        return forward_metrics(cfg_, params_, test);
    }

    void adapt(const ContextWindow& ctx, int steps) override {
        for (int s = 0; s < steps; ++s) step_on(ctx);
    }

    std::unique_ptr<Learner> clone() const override { return std::make_unique<AdamLearner>(*this); }

    static StepMetrics forward_metrics(const LearnerConfig& cfg, const ParamVector& params, const Dataset& test) {
        StepMetrics m;
        double hits = 0.0;
        std::size_t seen = 0;
        for (std::size_t off = 0; off < test.size(); off += detail::kEvalChunk) {
            std::vector<std::size_t> idx;
            for (std::size_t i = off; i < std::min(test.size(), off + detail::kEvalChunk); ++i) idx.push_back(i);
            Minibatch chunk = test.gather(idx);
            Tape tape;
            auto leaves = push_params(tape, params);
            auto b = detail::push_batch(tape, chunk, cfg.kind, cfg.classes);
            Var pred = model_forward(cfg.model, leaves, b.x);
            const Tensor logits = val(pred);
            m.loss += val(detail::fit_loss(pred, b, cfg.kind, false)).item() * static_cast<double>(idx.size());
            if (auto acc = logits_accuracy(logits, chunk.labels)) hits += *acc * static_cast<double>(idx.size());
            seen += idx.size();
        }
        m.loss /= static_cast<double>(seen);
        if (cfg.kind == TaskKind::classification) m.accuracy = hits / static_cast<double>(seen);
        return m;
    }

private:
    StepMetrics step_on(const Minibatch& batch) {
        Tape tape;
        auto leaves = push_params(tape, params_);
        auto b = detail::push_batch(tape, batch, cfg_.kind, cfg_.classes);
        Var pred = model_forward(cfg_.model, leaves, b.x);
        Var loss = detail::fit_loss(pred, b, cfg_.kind, false);
        StepMetrics m{val(loss).item(), logits_accuracy(val(pred), batch.labels)};
        detail::check_finite_loss(m.loss, "adam learner");
        auto grads = tape.gradients(loss, leaves, false);
        ParamVector g = collect_params(params_, grads);
        adam_step(state_, params_, g, cfg_.adam);
        return m;
    }

    LearnerConfig cfg_;
    ParamVector params_;
    AdamState state_;
};

/// BGD applied directly to the task parameters.
class BgdLearner : public Learner {
public:
    BgdLearner(LearnerConfig cfg, Rng& init_rng)
        : cfg_(std::move(cfg)),
          dist_(init_gaussian(init_params(cfg_.model, init_rng), cfg_.sigma0)),
          sampler_(cfg_.sampler_seed) {}

    StepMetrics observe(const Minibatch& batch, const ContextWindow&) override { return update_on(batch); }

    StepMetrics evaluate(const Dataset& test, const ContextWindow&) const override {
        StepMetrics m;
        double hits = 0.0;
        std::size_t seen = 0;
        for (std::size_t off = 0; off < test.size(); off += detail::kEvalChunk) {
            std::vector<std::size_t> idx;
            for (std::size_t i = off; i < std::min(test.size(), off + detail::kEvalChunk); ++i) idx.push_back(i);
            Minibatch chunk = remap(test.gather(idx));
            Tape tape;
            auto leaves = push_params(tape, dist_.mu);
            auto b = detail::push_batch(tape, chunk, cfg_.kind, head_classes());
            Var pred = model_forward(cfg_.model, leaves, b.x, head_);
            m.loss += val(detail::fit_loss(pred, b, cfg_.kind, false)).item() * static_cast<double>(idx.size());
            if (auto acc = logits_accuracy(val(pred), chunk.labels)) hits += *acc * static_cast<double>(idx.size());
            seen += idx.size();
        }
        m.loss /= static_cast<double>(seen);
        if (cfg_.kind == TaskKind::classification) m.accuracy = hits / static_cast<double>(seen);
        return m;
    }

    void adapt(const ContextWindow& ctx, int steps) override {
        for (int s = 0; s < steps; ++s) update_on(ctx);
    }

    std::unique_ptr<Learner> clone() const override { return std::make_unique<BgdLearner>(*this); }

protected:
    void select_head(int head) { head_ = head; }

private:
    std::size_t head_classes() const { return cfg_.model.multi_head() ? cfg_.model.head_width : cfg_.classes; }

    /// Global labels -> within-head labels when a head is active.
    Minibatch remap(Minibatch b) const {
        if (!cfg_.model.multi_head()) return b;
        const int base = head_ * static_cast<int>(cfg_.model.head_width);
        for (int& l : b.labels) {
            l -= base;
            if (l < 0 || l >= static_cast<int>(cfg_.model.head_width))
                throw std::invalid_argument("bgd learner: label outside the active head's range");
        }
        return b;
    }

    StepMetrics update_on(const Minibatch& raw) {
        Minibatch batch = remap(raw);
        const int k = cfg_.mc_samples;
        std::vector<ParamSample> samples;
        samples.reserve(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) samples.push_back(sample_params(dist_, sampler_));

        std::vector<ParamVector> grads(static_cast<std::size_t>(k));
        std::vector<ParamVector> eps(static_cast<std::size_t>(k));
        std::vector<double> losses(static_cast<std::size_t>(k));
        std::vector<double> accs(static_cast<std::size_t>(k), 0.0);

        detail::parallel_samples(k, cfg_.threads, [&](int i) {
            Tape tape;
            auto leaves = push_params(tape, samples[static_cast<std::size_t>(i)].theta);
            auto b = detail::push_batch(tape, batch, cfg_.kind, head_classes());
            Var pred = model_forward(cfg_.model, leaves, b.x, head_);
            Var loss = detail::fit_loss(pred, b, cfg_.kind, false);
            losses[static_cast<std::size_t>(i)] = val(loss).item();
            if (auto acc = logits_accuracy(val(pred), batch.labels)) accs[static_cast<std::size_t>(i)] = *acc;
            auto g = tape.gradients(loss, leaves, false);
            grads[static_cast<std::size_t>(i)] = collect_params(dist_.mu, g);
            eps[static_cast<std::size_t>(i)] = std::move(samples[static_cast<std::size_t>(i)].eps);
        });

        StepMetrics m;
        for (int i = 0; i < k; ++i) m.loss += losses[static_cast<std::size_t>(i)] / static_cast<double>(k);
        detail::check_finite_loss(m.loss, "bgd learner");
        if (cfg_.kind == TaskKind::classification) {
            double a = 0.0;
            for (int i = 0; i < k; ++i) a += accs[static_cast<std::size_t>(i)] / static_cast<double>(k);
            m.accuracy = a;
        }
        bgd_step(dist_, mc_estimates(grads, eps), cfg_.eta);
        return m;
    }

    LearnerConfig cfg_;
    GaussianParams dist_;
    Rng sampler_;
    int head_ = -1;
};

/// The multi-head baseline: the one learner that legitimately receives task
/// identity, used to select its output layer. Labels arrive in the global
/// space and are mapped onto the active head.
class MultiHeadBgdLearner : public BgdLearner, public HeadSelector {
public:
    MultiHeadBgdLearner(LearnerConfig cfg, Rng& init_rng) : BgdLearner(std::move(cfg), init_rng) {}

    void set_active_head(int head) override { select_head(head); }

    std::unique_ptr<Learner> clone() const override { return std::make_unique<MultiHeadBgdLearner>(*this); }
};

/// Continual meta learner: BGD over the meta parameters of a What & How
/// instance. Training draws K reparametrized samples, runs task inference
/// per sample, and consolidates with the BGD update; prediction runs the
/// inference at the distribution mean.
class MetaLearner : public Learner {
public:
    MetaLearner(LearnerConfig cfg, std::shared_ptr<const MetaInstance> instance, Rng& init_rng)
        : cfg_(std::move(cfg)),
          instance_(std::move(instance)),
          dist_(init_gaussian(instance_->initial_meta(init_rng), cfg_.sigma0)),
          sampler_(cfg_.sampler_seed) {}

    StepMetrics observe(const Minibatch& batch, const ContextWindow& ctx) override {
        const int k = cfg_.mc_samples;
        std::vector<ParamSample> samples;
        samples.reserve(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) samples.push_back(sample_params(dist_, sampler_));

        std::vector<ParamVector> grads(static_cast<std::size_t>(k));
        std::vector<ParamVector> eps(static_cast<std::size_t>(k));
        std::vector<double> losses(static_cast<std::size_t>(k));
        std::vector<double> accs(static_cast<std::size_t>(k), 0.0);

        detail::parallel_samples(k, cfg_.threads, [&](int i) {
            Tape tape;
            auto meta = push_params(tape, samples[static_cast<std::size_t>(i)].theta);
            TaskRepresentation rep = instance_->infer(tape, meta, ctx, cfg_.inner);
            auto b = detail::push_batch(tape, batch, cfg_.kind, cfg_.classes);
            Var pred = instance_->decode(tape, meta, rep, b.x);
            Var loss = detail::fit_loss(pred, b, cfg_.kind, false);
            losses[static_cast<std::size_t>(i)] = val(loss).item();
            if (auto acc = logits_accuracy(val(pred), batch.labels)) accs[static_cast<std::size_t>(i)] = *acc;
            auto targets = instance_->grad_targets(meta, rep, cfg_.inner.second_order);
            auto g = tape.gradients(loss, targets, false);
            grads[static_cast<std::size_t>(i)] = collect_params(dist_.mu, g);
            eps[static_cast<std::size_t>(i)] = std::move(samples[static_cast<std::size_t>(i)].eps);
        });

        StepMetrics m;
        for (int i = 0; i < k; ++i) m.loss += losses[static_cast<std::size_t>(i)] / static_cast<double>(k);
        detail::check_finite_loss(m.loss, "meta learner");
        if (cfg_.kind == TaskKind::classification) {
            double a = 0.0;
            for (int i = 0; i < k; ++i) a += accs[static_cast<std::size_t>(i)] / static_cast<double>(k);
            m.accuracy = a;
        }
        bgd_step(dist_, mc_estimates(grads, eps), cfg_.eta);
        return m;
    }

    StepMetrics evaluate(const Dataset& test, const ContextWindow& ctx) const override {
        // Inference at the mean of the meta distribution; no sampling.
        Tape tape;
        auto meta = push_params(tape, dist_.mu);
        InnerLoopConfig inf = cfg_.inner;
        inf.second_order = false;  // prediction only; no meta-gradient needed
        TaskRepresentation rep = instance_->infer(tape, meta, ctx, inf);

        StepMetrics m;
        double hits = 0.0;
        std::size_t seen = 0;
        for (std::size_t off = 0; off < test.size(); off += detail::kEvalChunk) {
            std::vector<std::size_t> idx;
            for (std::size_t i = off; i < std::min(test.size(), off + detail::kEvalChunk); ++i) idx.push_back(i);
            Minibatch chunk = test.gather(idx);
            auto b = detail::push_batch(tape, chunk, cfg_.kind, cfg_.classes);
            Var pred = instance_->decode(tape, meta, rep, b.x);
            m.loss += val(detail::fit_loss(pred, b, cfg_.kind, false)).item() * static_cast<double>(idx.size());
            if (auto acc = logits_accuracy(val(pred), chunk.labels)) hits += *acc * static_cast<double>(idx.size());
            seen += idx.size();
        }
        m.loss /= static_cast<double>(seen);
        if (cfg_.kind == TaskKind::classification) m.accuracy = hits / static_cast<double>(seen);
        return m;
    }

    std::unique_ptr<Learner> clone() const override { return std::make_unique<MetaLearner>(*this); }

    const GaussianParams& distribution() const { return dist_; }

private:
    LearnerConfig cfg_;
    std::shared_ptr<const MetaInstance> instance_;
    GaussianParams dist_;
    Rng sampler_;
};

/// Learner tags accepted across the library and the CLI.
inline const std::vector<std::string>& learner_tags() {
    static const std::vector<std::string> tags = {"adam", "bgd", "bgd-multihead", "metabgd", "metacog", "metaella"};
    return tags;
}

inline std::unique_ptr<Learner> make_learner(const std::string& tag, const LearnerConfig& cfg, Rng& init_rng) {
    if (tag == "adam") return std::make_unique<AdamLearner>(cfg, init_rng);
    if (tag == "bgd") {
        if (cfg.model.multi_head()) throw std::invalid_argument("learner 'bgd' expects a single-head model");
        return std::make_unique<BgdLearner>(cfg, init_rng);
    }
    if (tag == "bgd-multihead") {
        if (!cfg.model.multi_head())
            throw std::invalid_argument("learner 'bgd-multihead' expects a multi-head model");
        return std::make_unique<MultiHeadBgdLearner>(cfg, init_rng);
    }
    if (tag == "metabgd")
        return std::make_unique<MetaLearner>(
            cfg, std::make_shared<MetaBgdInstance>(cfg.model, cfg.kind, cfg.classes), init_rng);
    if (tag == "metacog")
        return std::make_unique<MetaLearner>(
            cfg, std::make_shared<MetaCogInstance>(cfg.model, cfg.kind, cfg.classes), init_rng);
    if (tag == "metaella")
        return std::make_unique<MetaLearner>(
            cfg, std::make_shared<MetaEllaInstance>(cfg.model, cfg.kind, cfg.classes), init_rng);
    throw std::invalid_argument("unknown learner tag: " + tag);
}

}  // namespace whathow
