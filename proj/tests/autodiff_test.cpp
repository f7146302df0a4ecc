#include <gtest/gtest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "whathow/autodiff.hpp"

using namespace whathow;
using whathow::testing::grad_check;
using whathow::testing::random_tensor;
using whathow::testing::random_tensor_away_from_zero;

namespace {

constexpr double kOpTol = 1e-4;

// Scalarize an arbitrary output through a fixed weighting so the checked loss
// is the same function on every evaluation.
Var project(Tape& t, const Var& x, const Tensor& weights) {
    return sum(mul(x, t.push(weights)));
}

Tensor projection_for(const Shape& shape, std::uint64_t salt) {
    Rng rng(mix_seed(0xABCD, salt));
    return random_tensor(shape, rng);
}

}  // namespace

TEST(ForwardOps, MatmulIdentity) {
    Tape t;
    Var a = t.push(Tensor::from({2, 2}, {1, 2, 3, 4}));
    Var eye = t.push(Tensor::from({2, 2}, {1, 0, 0, 1}));
    Tensor out = val(matmul(a, eye));
    EXPECT_EQ(out.data, (std::vector<double>{1, 2, 3, 4}));
}

TEST(ForwardOps, SigmoidAtZero) {
    Tape t;
    Var x = t.push(Tensor::scalar(0.0));
    EXPECT_DOUBLE_EQ(val(sigmoid(x)).item(), 0.5);
}

TEST(ForwardOps, MsePerfectFitIsZero) {
    Tape t;
    Var pred = t.push(Tensor::from({2}, {1, 2}));
    Var target = t.push(Tensor::from({2}, {1, 2}));
    EXPECT_DOUBLE_EQ(val(mse(pred, target)).item(), 0.0);
}

TEST(ForwardOps, ShapeMismatchNamesOpAndShapes) {
    Tape t;
    Var a = t.push(Tensor{Shape{2, 3}});
    Var b = t.push(Tensor{Shape{2, 2}});
    try {
        (void)mul(a, b);
        FAIL() << "expected shape error";
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("mul"), std::string::npos) << msg;
        EXPECT_NE(msg.find("(2, 3)"), std::string::npos) << msg;
        EXPECT_NE(msg.find("(2, 2)"), std::string::npos) << msg;
    }
}

TEST(ForwardOps, MatmulInnerDimMismatchThrows) {
    Tape t;
    Var a = t.push(Tensor{Shape{2, 3}});
    Var b = t.push(Tensor{Shape{2, 2}});
    EXPECT_THROW((void)matmul(a, b), std::invalid_argument);
}

TEST(Gradients, SquareAtThree) {
    Tape t;
    Var x = t.push(Tensor::scalar(3.0));
    Var loss = mul(x, x);
    auto g = t.gradients(loss, {x}, false);
    EXPECT_NEAR(val(g[0]).item(), 6.0, 1e-12);
}

TEST(Gradients, UnreachableLeafGetsZeros) {
    Tape t;
    Var x = t.push(Tensor{Shape{2, 2}, 1.0});
    Var unused = t.push(Tensor{Shape{3}, 5.0});
    Var loss = sum(x);
    auto g = t.gradients(loss, {unused}, false);
    EXPECT_EQ(val(g[0]).shape, (Shape{3}));
    for (double v : val(g[0]).data) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Gradients, EveryOpMatchesFiniteDifferences) {
    Rng rng(20240817);

    struct Case {
        const char* name;
        whathow::testing::LossBuilder build;
        std::vector<Tensor> inputs;
    };

    std::vector<Case> cases;

    cases.push_back({"add", [](Tape&, const std::vector<Var>& v) { return sum(add(v[0], v[1])); },
                     {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}});
    cases.push_back({"add_broadcast", [](Tape&, const std::vector<Var>& v) { return sum(mul(add(v[0], v[1]), add(v[0], v[1]))); },
                     {random_tensor({3, 4}, rng), random_tensor({4}, rng)}});
    cases.push_back({"sub", [](Tape&, const std::vector<Var>& v) { return sum(mul(sub(v[0], v[1]), sub(v[0], v[1]))); },
                     {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}});
    cases.push_back({"mul_broadcast", [](Tape&, const std::vector<Var>& v) { return sum(mul(v[0], v[1])); },
                     {random_tensor({2, 3, 2}, rng), random_tensor({3, 2}, rng)}});
    cases.push_back({"scale", [](Tape&, const std::vector<Var>& v) { return sum(scale(v[0], -2.5)); },
                     {random_tensor({5}, rng)}});
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            Shape sa = ta ? Shape{4, 3} : Shape{3, 4};
            Shape sb = tb ? Shape{2, 4} : Shape{4, 2};
            Tensor proj = projection_for({3, 2}, 10 + (ta ? 1 : 0) + (tb ? 2 : 0));
            cases.push_back({"matmul", [ta, tb, proj](Tape& t, const std::vector<Var>& v) {
                                 return project(t, matmul(v[0], v[1], ta, tb), proj);
                             },
                             {random_tensor(sa, rng), random_tensor(sb, rng)}});
        }
    cases.push_back({"reshape", [](Tape&, const std::vector<Var>& v) { return sum(mul(reshape(v[0], {6}), reshape(v[0], {6}))); },
                     {random_tensor({2, 3}, rng)}});
    cases.push_back({"narrow", [](Tape&, const std::vector<Var>& v) { return sum(mul(narrow(v[0], 2, 3), narrow(v[0], 2, 3))); },
                     {random_tensor({8}, rng)}});
    cases.push_back({"pad_segment", [](Tape&, const std::vector<Var>& v) {
                         Var p = pad_segment(v[0], 1, 6);
                         return sum(mul(p, p));
                     },
                     {random_tensor({3}, rng)}});
    cases.push_back({"sum", [](Tape&, const std::vector<Var>& v) { return mul(sum(v[0]), sum(v[0])); },
                     {random_tensor({3, 3}, rng)}});
    cases.push_back({"mean", [](Tape&, const std::vector<Var>& v) { return mul(mean(v[0]), mean(v[0])); },
                     {random_tensor({4, 2}, rng)}});
    {
        Tensor proj = projection_for({3, 1}, 20);
        cases.push_back({"sum_last", [proj](Tape& t, const std::vector<Var>& v) {
                             return project(t, sum_last(v[0]), proj);
                         },
                         {random_tensor({3, 5}, rng)}});
    }
    {
        Tensor proj = projection_for({3, 4}, 21);
        cases.push_back({"bcast_last", [proj](Tape& t, const std::vector<Var>& v) {
                             return project(t, bcast_last(v[0], 4), proj);
                         },
                         {random_tensor({3, 1}, rng)}});
    }
    {
        Tensor proj = projection_for({4}, 22);
        cases.push_back({"sum_lead", [proj](Tape& t, const std::vector<Var>& v) {
                             return project(t, sum_lead(v[0], {4}), proj);
                         },
                         {random_tensor({3, 4}, rng)}});
    }
    {
        Tensor proj = projection_for({2, 3}, 23);
        cases.push_back({"bcast_lead", [proj](Tape& t, const std::vector<Var>& v) {
                             return project(t, bcast_lead(v[0], {2, 3}), proj);
                         },
                         {random_tensor({3}, rng)}});
    }
    {
        Tensor proj = projection_for({2, 3, 2, 2}, 24);
        cases.push_back({"bcast_channel", [proj](Tape& t, const std::vector<Var>& v) {
                             return project(t, bcast_channel(v[0], {2, 3, 2, 2}), proj);
                         },
                         {random_tensor({3}, rng)}});
    }
    cases.push_back({"tanh", [](Tape&, const std::vector<Var>& v) { return sum(whathow::tanh(v[0])); },
                     {random_tensor({3, 3}, rng, -2.0, 2.0)}});
    cases.push_back({"sigmoid", [](Tape&, const std::vector<Var>& v) { return sum(mul(sigmoid(v[0]), sigmoid(v[0]))); },
                     {random_tensor({3, 3}, rng, -2.0, 2.0)}});
    cases.push_back({"relu", [](Tape&, const std::vector<Var>& v) { return sum(mul(relu(v[0]), relu(v[0]))); },
                     {random_tensor_away_from_zero({4, 4}, rng)}});
    cases.push_back({"exp", [](Tape&, const std::vector<Var>& v) { return sum(whathow::exp(v[0])); },
                     {random_tensor({3, 2}, rng)}});
    {
        Tensor proj = projection_for({4, 5}, 25);
        cases.push_back({"log_softmax", [proj](Tape& t, const std::vector<Var>& v) {
                             return project(t, log_softmax(v[0]), proj);
                         },
                         {random_tensor({4, 5}, rng, -2.0, 2.0)}});
    }
    cases.push_back({"l1_norm", [](Tape&, const std::vector<Var>& v) { return l1_norm(v[0]); },
                     {random_tensor_away_from_zero({4, 3}, rng)}});
    {
        Tensor proj = projection_for({2, 3, 3, 3}, 26);
        cases.push_back({"conv2d", [proj](Tape& t, const std::vector<Var>& v) {
                             return project(t, conv2d(v[0], v[1]), proj);
                         },
                         {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng)}});
    }
    {
        Tensor proj = projection_for({2, 2, 2, 2}, 27);
        cases.push_back({"maxpool2d", [proj](Tape& t, const std::vector<Var>& v) {
                             return project(t, maxpool2d(v[0]), proj);
                         },
                         {random_tensor({2, 2, 4, 4}, rng)}});  // distinct uniform draws: ties have measure zero
    }
    cases.push_back({"mse", [](Tape&, const std::vector<Var>& v) { return mse(v[0], v[1]); },
                     {random_tensor({4, 2}, rng), random_tensor({4, 2}, rng)}});
    cases.push_back({"sse", [](Tape&, const std::vector<Var>& v) { return sse(v[0], v[1]); },
                     {random_tensor({4, 2}, rng), random_tensor({4, 2}, rng)}});
    cases.push_back({"softmax_cross_entropy", [](Tape& t, const std::vector<Var>& v) {
                         Var targets = t.push(one_hot({1, 0, 3}, 4));
                         return softmax_cross_entropy(v[0], targets);
                     },
                     {random_tensor({3, 4}, rng, -2.0, 2.0)}});

    for (auto& c : cases) {
        auto res = grad_check(c.build, c.inputs);
        EXPECT_LT(res.max_rel_err, kOpTol) << c.name << ": ad=" << res.worst_ad << " fd=" << res.worst_fd;
    }
}

TEST(SecondOrder, SgdStepDerivativeMatchesHandValue) {
    // One SGD step on f(x) = x^2 from x = 1 with lr 0.1 maps x to 0.8 x,
    // so the derivative of the step output w.r.t. x is 0.8.
    Tape t;
    Var x = t.push(Tensor::scalar(1.0));
    Var loss = mul(x, x);
    Var g = t.gradients(loss, {x}, /*create_graph=*/true)[0];
    Var stepped = sub(x, scale(g, 0.1));
    Var d = t.gradients(stepped, {x}, false)[0];
    EXPECT_NEAR(val(d).item(), 0.8, 1e-10);
}

namespace {

// Composite map: theta -> inner_loss -> one SGD step -> outer loss. Used both
// for the AD route (create_graph) and the FD oracle (value-only evaluation).
double inner_step_outer_loss(const std::vector<Tensor>& theta_vals, const Tensor& x, const Tensor& y, double lr,
                             std::vector<Tensor>* out_meta_grads) {
    Tape t;
    std::vector<Var> theta;
    for (const auto& tv : theta_vals) theta.push_back(t.push(tv));
    Var xa = t.push(x);
    Var ya = t.push(y);

    auto forward = [&](const std::vector<Var>& p) {
        Var h = whathow::tanh(add(matmul(xa, p[0]), p[1]));
        return add(matmul(h, p[2]), p[3]);
    };

    const bool create = out_meta_grads != nullptr;
    Var inner = mse(forward(theta), ya);
    std::vector<Var> g = t.gradients(inner, theta, create);
    std::vector<Var> stepped;
    for (std::size_t i = 0; i < theta.size(); ++i) stepped.push_back(sub(theta[i], scale(g[i], lr)));
    Var outer = mse(forward(stepped), ya);

    if (out_meta_grads) {
        out_meta_grads->clear();
        for (Var mg : t.gradients(outer, theta, false)) out_meta_grads->push_back(val(mg));
    }
    return val(outer).item();
}

}  // namespace

TEST(SecondOrder, GradientThroughInnerStepMatchesFiniteDifferences) {
    Rng rng(99);
    std::vector<Tensor> theta = {random_tensor({2, 3}, rng), random_tensor({3}, rng), random_tensor({3, 1}, rng),
                                 random_tensor({1}, rng)};
    Tensor x = random_tensor({4, 2}, rng);
    Tensor y = random_tensor({4, 1}, rng);
    const double lr = 0.2;

    std::vector<Tensor> ad;
    inner_step_outer_loss(theta, x, y, lr, &ad);

    const double h = 1e-5;
    double max_rel = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        for (std::size_t j = 0; j < theta[i].numel(); ++j) {
            const double orig = theta[i].data[j];
            theta[i].data[j] = orig + h;
            const double up = inner_step_outer_loss(theta, x, y, lr, nullptr);
            theta[i].data[j] = orig - h;
            const double down = inner_step_outer_loss(theta, x, y, lr, nullptr);
            theta[i].data[j] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double rel = std::abs(ad[i].data[j] - fd) / std::max({1.0, std::abs(fd), std::abs(ad[i].data[j])});
            max_rel = std::max(max_rel, rel);
        }
    }
    EXPECT_LT(max_rel, 1e-3);
}

TEST(SecondOrder, ConvPoolCrossEntropyInnerStep) {
    Rng rng(1234);
    std::vector<Tensor> theta = {random_tensor({2, 1, 3, 3}, rng, -0.5, 0.5), random_tensor({2}, rng, -0.2, 0.2),
                                 random_tensor({8, 3}, rng, -0.5, 0.5)};
    Tensor x = random_tensor({2, 1, 6, 6}, rng);
    Tensor targets = one_hot({2, 0}, 3);
    const double lr = 0.1;

    auto run = [&](const std::vector<Tensor>& tv, std::vector<Tensor>* meta) {
        Tape t;
        std::vector<Var> p;
        for (const auto& v : tv) p.push_back(t.push(v));
        Var xa = t.push(x);
        Var ta = t.push(targets);
        auto forward = [&](const std::vector<Var>& w) {
            Var h = conv2d(xa, w[0]);
            h = maxpool2d(relu(add(h, bcast_channel(w[1], val(h).shape))));
            h = reshape(h, {2, 8});
            return matmul(h, w[2]);
        };
        Var inner = softmax_cross_entropy(forward(p), ta);
        auto g = t.gradients(inner, p, meta != nullptr);
        std::vector<Var> stepped;
        for (std::size_t i = 0; i < p.size(); ++i) stepped.push_back(sub(p[i], scale(g[i], lr)));
        Var outer = softmax_cross_entropy(forward(stepped), ta);
        if (meta) {
            meta->clear();
            for (Var mg : t.gradients(outer, p, false)) meta->push_back(val(mg));
        }
        return val(outer).item();
    };

    std::vector<Tensor> ad;
    run(theta, &ad);
    const double h = 1e-5;
    double max_rel = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i)
        for (std::size_t j = 0; j < theta[i].numel(); ++j) {
            const double orig = theta[i].data[j];
            theta[i].data[j] = orig + h;
            const double up = run(theta, nullptr);
            theta[i].data[j] = orig - h;
            const double down = run(theta, nullptr);
            theta[i].data[j] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double rel = std::abs(ad[i].data[j] - fd) / std::max({1.0, std::abs(fd), std::abs(ad[i].data[j])});
            max_rel = std::max(max_rel, rel);
        }
    EXPECT_LT(max_rel, 1e-3);
}

TEST(Determinism, SameSeedSameBits) {
    auto run = [] {
        Rng rng(42);
        Tape t;
        Var a = t.push(random_tensor({8, 8}, rng));
        Var b = t.push(random_tensor({8, 8}, rng));
        Var loss = mse(whathow::tanh(matmul(a, b)), b);
        auto g = t.gradients(loss, {a, b}, false);
        return std::make_pair(val(g[0]).data, val(g[1]).data);
    };
    auto [g1a, g1b] = run();
    auto [g2a, g2b] = run();
    EXPECT_EQ(g1a, g2a);
    EXPECT_EQ(g1b, g2b);
}

TEST(Tape, GradientAccumulatesAcrossPaths) {
    Tape t;
    Var x = t.push(Tensor::scalar(2.0));
    Var y = add(mul(x, x), scale(x, 3.0));  // x^2 + 3x, dy/dx = 2x + 3 = 7
    auto g = t.gradients(y, {x}, false);
    EXPECT_NEAR(val(g[0]).item(), 7.0, 1e-12);
}
