#pragma once

#include <memory>
#include <vector>

#include "whathow/autodiff.hpp"
#include "whathow/data_types.hpp"
#include "whathow/models.hpp"
#include "whathow/params.hpp"

namespace whathow {

/// Inner-loop settings for task inference: a few plain SGD steps on the
/// context window. With second_order, the meta-gradient flows through the
/// whole inner trajectory; otherwise the inferred representation is treated
/// as a constant of the meta loss.
struct InnerLoopConfig {
    double lambda_in = 0.0;
    int steps = 5;
    bool second_order = true;
    double reg = 0.0;  // gamma (mask sparsity) or mu (code sparsity)

    void validate() const {
        if (steps < 1) throw std::invalid_argument("InnerLoopConfig: steps must be >= 1");
        if (lambda_in < 0.0) throw std::invalid_argument("InnerLoopConfig: lambda_in must be >= 0");
    }
};

/// Inferred task representation: adapted parameters, a mask set, or a sparse
/// code, depending on the instance that produced it.
struct TaskRepresentation {
    enum class Kind { adapted_params, mask, code };
    Kind kind;
    std::vector<Var> vars;
};

namespace detail {

struct BatchOnTape {
    Var x;
    Var target;  // regression y or one-hot labels
};

inline BatchOnTape push_batch(Tape& tape, const Minibatch& b, TaskKind kind, std::size_t classes) {
    check(!b.empty(), "task inference: empty batch/context");
    BatchOnTape r;
    r.x = tape.push(b.x);
    r.target = kind == TaskKind::regression ? tape.push(b.y) : tape.push(one_hot(b.labels, classes));
    return r;
}

inline Var fit_loss(const Var& pred, const BatchOnTape& b, TaskKind kind, bool sum_form) {
    if (kind == TaskKind::regression) return sum_form ? sse(pred, b.target) : mse(pred, b.target);
    return softmax_cross_entropy(pred, b.target, /*mean_over_batch=*/!sum_form);
}

/// Replace vars by constant copies, severing the meta-gradient path.
inline std::vector<Var> cut_graph(Tape& tape, const std::vector<Var>& vars) {
    std::vector<Var> out;
    out.reserve(vars.size());
    for (const Var& v : vars) out.push_back(tape.push(val(v)));
    return out;
}

}  // namespace detail

/// A What & How instance: task inference from context (What) and a
/// task-conditioned predictor (How). Instances are stateless transforms over
/// (meta parameters, context); all state lives in the caller's distribution.
class MetaInstance {
public:
    virtual ~MetaInstance() = default;

    virtual ParamVector initial_meta(Rng& rng) const = 0;

    virtual TaskRepresentation infer(Tape& tape, const std::vector<Var>& meta, const ContextWindow& ctx,
                                     const InnerLoopConfig& cfg) const = 0;

    virtual Var decode(Tape& tape, const std::vector<Var>& meta, const TaskRepresentation& rep,
                       const Var& x) const = 0;

    /// Leaves the meta-gradient is taken against. Second order and the gated
    /// and dictionary instances differentiate the meta leaves themselves; the
    /// adapted-parameter instance in first-order mode differentiates the
    /// inferred parameters instead (their grads stand in for the meta ones).
    virtual std::vector<Var> grad_targets(const std::vector<Var>& meta, const TaskRepresentation& rep,
                                          bool second_order) const {
        (void)rep;
        (void)second_order;
        return meta;
    }

    TaskKind kind() const { return kind_; }
    const ModelSpec& model() const { return spec_; }
    std::size_t classes() const { return classes_; }

protected:
    MetaInstance(ModelSpec spec, TaskKind kind, std::size_t classes)
        : spec_(std::move(spec)), kind_(kind), classes_(classes) {}

    ModelSpec spec_;
    TaskKind kind_;
    std::size_t classes_;
};

/// Task inference by adapting all network parameters from a meta-learned
/// initialization: a few SGD steps on the context loss.
class MetaBgdInstance : public MetaInstance {
public:
    MetaBgdInstance(ModelSpec spec, TaskKind kind, std::size_t classes = 0)
        : MetaInstance(std::move(spec), kind, classes) {}

    ParamVector initial_meta(Rng& rng) const override { return init_params(spec_, rng); }

    TaskRepresentation infer(Tape& tape, const std::vector<Var>& meta, const ContextWindow& ctx,
                             const InnerLoopConfig& cfg) const override {
        cfg.validate();
        auto b = detail::push_batch(tape, ctx, kind_, classes_);
        std::vector<Var> theta = meta;
        for (int s = 0; s < cfg.steps; ++s) {
            Var loss = detail::fit_loss(model_forward(spec_, theta, b.x), b, kind_, /*sum_form=*/false);
            std::vector<Var> g = tape.gradients(loss, theta, cfg.second_order);
            for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = sub(theta[i], scale(g[i], cfg.lambda_in));
        }
        if (!cfg.second_order) theta = detail::cut_graph(tape, theta);
        return TaskRepresentation{TaskRepresentation::Kind::adapted_params, std::move(theta)};
    }

    Var decode(Tape& tape, const std::vector<Var>&, const TaskRepresentation& rep, const Var& x) const override {
        (void)tape;
        return model_forward(spec_, rep.vars, x);
    }

    std::vector<Var> grad_targets(const std::vector<Var>& meta, const TaskRepresentation& rep,
                                  bool second_order) const override {
        return second_order ? meta : rep.vars;
    }
};

/// Task inference through per-parameter sigmoid gates: masks start at zero
/// and take a few SGD steps on the context loss plus an L1 sparsity term on
/// the gate values.
class MetaCogInstance : public MetaInstance {
public:
    MetaCogInstance(ModelSpec spec, TaskKind kind, std::size_t classes = 0)
        : MetaInstance(std::move(spec), kind, classes) {}

    ParamVector initial_meta(Rng& rng) const override { return init_params(spec_, rng); }

    Var inner_loss(Tape& tape, const std::vector<Var>& theta, const std::vector<Var>& mask,
                   const detail::BatchOnTape& b, double gamma) const {
        Var loss = detail::fit_loss(gated_forward(spec_, theta, mask, b.x), b, kind_, /*sum_form=*/true);
        if (gamma != 0.0) {
            Var gate_l1 = sum(sigmoid(mask[0]));
            for (std::size_t i = 1; i < mask.size(); ++i) gate_l1 = add(gate_l1, sum(sigmoid(mask[i])));
            loss = add(loss, scale(gate_l1, gamma));
        }
        (void)tape;
        return loss;
    }

    TaskRepresentation infer(Tape& tape, const std::vector<Var>& meta, const ContextWindow& ctx,
                             const InnerLoopConfig& cfg) const override {
        cfg.validate();
        auto b = detail::push_batch(tape, ctx, kind_, classes_);
        std::vector<Var> mask;
        mask.reserve(meta.size());
        for (const Var& m : meta) mask.push_back(tape.push(Tensor{tape.shape(m)}));  // m_init = 0
        for (int s = 0; s < cfg.steps; ++s) {
            Var loss = inner_loss(tape, meta, mask, b, cfg.reg);
            std::vector<Var> g = tape.gradients(loss, mask, cfg.second_order);
            for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = sub(mask[i], scale(g[i], cfg.lambda_in));
        }
        if (!cfg.second_order) mask = detail::cut_graph(tape, mask);
        return TaskRepresentation{TaskRepresentation::Kind::mask, std::move(mask)};
    }

    Var decode(Tape& tape, const std::vector<Var>& meta, const TaskRepresentation& rep, const Var& x) const override {
        (void)tape;
        return gated_forward(spec_, meta, rep.vars, x);
    }
};

/// Task inference as a sparse code over a shared dictionary of parameter
/// columns: theta = L s, with s adapted from 1/k by a few SGD steps on the
/// mean context loss plus an L1 term.
class MetaEllaInstance : public MetaInstance {
public:
    MetaEllaInstance(ModelSpec spec, TaskKind kind, std::size_t classes = 0, std::size_t components = 10)
        : MetaInstance(std::move(spec), kind, classes), k_(components) {
        Rng shape_rng(0);
        template_ = init_params(spec_, shape_rng);
    }

    std::size_t components() const { return k_; }
    const ParamVector& layout() const { return template_; }

    ParamVector initial_meta(Rng& rng) const override {
        // Each dictionary column is an independent draw of a full network
        // initialization.
        const std::size_t d = template_.numel();
        Tensor dict{Shape{d, k_}};
        for (std::size_t j = 0; j < k_; ++j) {
            Tensor col = init_params(spec_, rng).flatten();
            for (std::size_t i = 0; i < d; ++i) dict.data[i * k_ + j] = col.data[i];
        }
        ParamVector pv;
        pv.add("dictionary", std::move(dict));
        return pv;
    }

    TaskRepresentation infer(Tape& tape, const std::vector<Var>& meta, const ContextWindow& ctx,
                             const InnerLoopConfig& cfg) const override {
        cfg.validate();
        auto b = detail::push_batch(tape, ctx, kind_, classes_);
        Var s = tape.push(Tensor{Shape{k_, 1}, 1.0 / static_cast<double>(k_)});
        for (int step = 0; step < cfg.steps; ++step) {
            std::vector<Var> theta = dictionary_params(template_, meta[0], s);
            Var loss = detail::fit_loss(model_forward(spec_, theta, b.x), b, kind_, /*sum_form=*/false);
            if (cfg.reg != 0.0) loss = add(loss, scale(l1_norm(s), cfg.reg));
            Var g = tape.gradients(loss, {s}, cfg.second_order)[0];
            s = sub(s, scale(g, cfg.lambda_in));
        }
        if (!cfg.second_order) s = tape.push(val(s));
        return TaskRepresentation{TaskRepresentation::Kind::code, {s}};
    }

    Var decode(Tape& tape, const std::vector<Var>& meta, const TaskRepresentation& rep, const Var& x) const override {
        (void)tape;
        return model_forward(spec_, dictionary_params(template_, meta[0], rep.vars[0]), x);
    }

private:
    std::size_t k_;
    ParamVector template_;
};

/// Loss of the task-conditioned predictor on the current batch: infer the
/// representation from the context with the given (sampled) meta parameters,
/// decode, and evaluate.
inline Var meta_loss(const MetaInstance& inst, Tape& tape, const std::vector<Var>& meta, const ContextWindow& ctx,
                     const Minibatch& batch, const InnerLoopConfig& cfg) {
    detail::check(!batch.empty(), "meta_loss: empty batch");
    TaskRepresentation rep = inst.infer(tape, meta, ctx, cfg);
    auto b = detail::push_batch(tape, batch, inst.kind(), inst.classes());
    return detail::fit_loss(inst.decode(tape, meta, rep, b.x), b, inst.kind(), /*sum_form=*/false);
}

}  // namespace whathow
