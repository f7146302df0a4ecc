#include <gtest/gtest.h>

#include "support/gradcheck.hpp"
#include "whathow/models.hpp"

using namespace whathow;
using whathow::testing::random_tensor;

namespace {

ParamVector random_params(const ModelSpec& spec, std::uint64_t seed) {
    Rng rng(seed);
    return init_params(spec, rng);
}

Tensor forward_values(const ModelSpec& spec, const ParamVector& pv, const Tensor& x, int head = -1) {
    Tape t;
    auto params = push_params(t, pv);
    return val(model_forward(spec, params, t.push(x), head));
}

}  // namespace

TEST(Mlp, ZeroParamsGiveZeroOutput) {
    auto spec = ModelSpec::mlp_spec({3, 4, 2}, Nonlinearity::tanh_fn);
    ParamVector pv = random_params(spec, 1).like(0.0);
    Rng rng(2);
    Tensor out = forward_values(spec, pv, random_tensor({5, 3}, rng));
    for (double v : out.data) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Mlp, SineShapeContract) {
    auto spec = ModelSpec::mlp_spec({1, 50, 50, 1}, Nonlinearity::tanh_fn);
    ParamVector pv = random_params(spec, 3);
    Rng rng(4);
    Tensor out = forward_values(spec, pv, random_tensor({128, 1}, rng, -5.0, 5.0));
    EXPECT_EQ(out.shape, (Shape{128, 1}));
}

TEST(Mlp, MnistShapeContract) {
    auto spec = ModelSpec::mlp_spec({784, 300, 300, 10}, Nonlinearity::relu_fn);
    ParamVector pv = random_params(spec, 5);
    Rng rng(6);
    Tensor out = forward_values(spec, pv, random_tensor({128, 784}, rng, 0.0, 1.0));
    EXPECT_EQ(out.shape, (Shape{128, 10}));
}

TEST(Cnn, SingleHeadShapeContract) {
    auto spec = ModelSpec::cnn_spec(200);
    ParamVector pv = random_params(spec, 7);
    Rng rng(8);
    Tensor out = forward_values(spec, pv, random_tensor({4, 1, 28, 28}, rng, 0.0, 1.0));
    EXPECT_EQ(out.shape, (Shape{4, 200}));
}

TEST(Cnn, MultiHeadSelectsHead) {
    auto spec = ModelSpec::cnn_spec(0, /*heads=*/10, /*head_width=*/20);
    ParamVector pv = random_params(spec, 9);
    Rng rng(10);
    Tensor x = random_tensor({2, 1, 28, 28}, rng, 0.0, 1.0);
    Tensor out3 = forward_values(spec, pv, x, 3);
    EXPECT_EQ(out3.shape, (Shape{2, 20}));
    Tensor out7 = forward_values(spec, pv, x, 7);
    EXPECT_NE(out3.data, out7.data);  // heads are distinct layers
}

TEST(Cnn, MissingHeadIndexThrows) {
    auto spec = ModelSpec::cnn_spec(0, 10, 20);
    ParamVector pv = random_params(spec, 11);
    Rng rng(12);
    EXPECT_THROW(forward_values(spec, pv, random_tensor({1, 1, 28, 28}, rng), -1), std::invalid_argument);
}

TEST(Cnn, ZeroInputZeroParamsGiveZeroLogits) {
    auto spec = ModelSpec::cnn_spec(200);
    ParamVector pv = random_params(spec, 13).like(0.0);
    Tensor out = forward_values(spec, pv, Tensor{Shape{2, 1, 28, 28}});
    for (double v : out.data) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Gating, ZeroMaskHalvesParameters) {
    auto spec = ModelSpec::mlp_spec({2, 5, 1}, Nonlinearity::tanh_fn);
    ParamVector theta = random_params(spec, 14);
    Rng rng(15);
    Tensor x = random_tensor({6, 2}, rng);

    Tape t;
    auto theta_vars = push_params(t, theta);
    auto mask_vars = push_params(t, theta.like(0.0));
    Tensor gated = val(gated_forward(spec, theta_vars, mask_vars, t.push(x)));

    ParamVector halved = theta;
    for (auto& e : halved) {
        for (double& v : e.tensor.data) v *= 0.5;
    }
    Tensor plain = forward_values(spec, halved, x);
    for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_NEAR(gated.data[i], plain.data[i], 1e-12);
}

TEST(Gating, SaturatedMaskMatchesPlainForward) {
    auto spec = ModelSpec::mlp_spec({2, 5, 1}, Nonlinearity::tanh_fn);
    ParamVector theta = random_params(spec, 16);
    Rng rng(17);
    Tensor x = random_tensor({6, 2}, rng);

    Tape t;
    auto theta_vars = push_params(t, theta);
    auto mask_vars = push_params(t, theta.like(60.0));
    Tensor gated = val(gated_forward(spec, theta_vars, mask_vars, t.push(x)));
    Tensor plain = forward_values(spec, theta, x);
    for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_NEAR(gated.data[i], plain.data[i], 1e-9);
}

TEST(Gating, LargeNegativeMaskZeroesTheNetwork) {
    auto spec = ModelSpec::mlp_spec({2, 5, 1}, Nonlinearity::tanh_fn);
    ParamVector theta = random_params(spec, 18);
    Rng rng(19);
    Tensor x = random_tensor({4, 2}, rng);

    Tape t;
    auto theta_vars = push_params(t, theta);
    auto mask_vars = push_params(t, theta.like(-60.0));
    Tensor gated = val(gated_forward(spec, theta_vars, mask_vars, t.push(x)));
    Tensor zeroed = forward_values(spec, theta.like(0.0), x);
    for (std::size_t i = 0; i < zeroed.numel(); ++i) EXPECT_NEAR(gated.data[i], zeroed.data[i], 1e-9);
}

TEST(Gating, MaskShapeMismatchThrows) {
    auto spec = ModelSpec::mlp_spec({2, 5, 1}, Nonlinearity::tanh_fn);
    ParamVector theta = random_params(spec, 20);
    ParamVector bad = theta;
    bad[0].tensor = Tensor{Shape{3, 3}};
    Tape t;
    auto theta_vars = push_params(t, theta);
    auto mask_vars = push_params(t, bad);
    Rng rng(21);
    EXPECT_THROW((void)gated_forward(spec, theta_vars, mask_vars, t.push(random_tensor({2, 2}, rng))),
                 std::invalid_argument);
}

namespace {

ParamVector dict_to_params(const ParamVector& like, const Tensor& dict, const Tensor& s) {
    Tape t;
    auto vars = dictionary_params(like, t.push(dict), t.push(s));
    return collect_params(like, vars);
}

}  // namespace

TEST(Dictionary, OneHotSelectsColumn) {
    auto spec = ModelSpec::mlp_spec({2, 3, 1}, Nonlinearity::tanh_fn);
    ParamVector like = random_params(spec, 22);
    const std::size_t d = like.numel(), k = 4;
    Rng rng(23);
    Tensor dict = random_tensor({d, k}, rng);
    Tensor s{Shape{k, 1}};
    s.data[2] = 1.0;
    ParamVector out = dict_to_params(like, dict, s);
    Tensor flat = out.flatten();
    for (std::size_t i = 0; i < d; ++i) EXPECT_DOUBLE_EQ(flat.data[i], dict.data[i * k + 2]);
}

TEST(Dictionary, ZeroCodeGivesZeroParams) {
    auto spec = ModelSpec::mlp_spec({2, 3, 1}, Nonlinearity::tanh_fn);
    ParamVector like = random_params(spec, 24);
    Rng rng(25);
    Tensor dict = random_tensor({like.numel(), 3}, rng);
    ParamVector out = dict_to_params(like, dict, Tensor{Shape{3, 1}});
    for (const auto& e : out)
        for (double v : e.tensor.data) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Dictionary, UniformTenthCodeIsScaledRowSum) {
    auto spec = ModelSpec::mlp_spec({2, 3, 1}, Nonlinearity::tanh_fn);
    ParamVector like = random_params(spec, 26);
    const std::size_t d = like.numel(), k = 10;
    Rng rng(27);
    Tensor dict = random_tensor({d, k}, rng);
    Tensor s{Shape{k, 1}, 0.1};
    Tensor flat = dict_to_params(like, dict, s).flatten();
    for (std::size_t i = 0; i < d; ++i) {
        double rowsum = 0.0;
        for (std::size_t j = 0; j < k; ++j) rowsum += dict.data[i * k + j];
        EXPECT_NEAR(flat.data[i], 0.1 * rowsum, 1e-12);
    }
}

TEST(Dictionary, LinearInTheCode) {
    auto spec = ModelSpec::mlp_spec({3, 2, 2}, Nonlinearity::relu_fn);
    ParamVector like = random_params(spec, 28);
    const std::size_t k = 5;
    Rng rng(29);
    Tensor dict = random_tensor({like.numel(), k}, rng);
    Tensor s1 = random_tensor({k, 1}, rng);
    Tensor s2 = random_tensor({k, 1}, rng);
    const double a = 0.7, b = -1.3;
    Tensor combo{Shape{k, 1}};
    for (std::size_t i = 0; i < k; ++i) combo.data[i] = a * s1.data[i] + b * s2.data[i];

    Tensor lhs = dict_to_params(like, dict, combo).flatten();
    Tensor f1 = dict_to_params(like, dict, s1).flatten();
    Tensor f2 = dict_to_params(like, dict, s2).flatten();
    for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs.data[i], a * f1.data[i] + b * f2.data[i], 1e-9);
}

TEST(Dictionary, DimensionMismatchThrows) {
    auto spec = ModelSpec::mlp_spec({2, 3, 1}, Nonlinearity::tanh_fn);
    ParamVector like = random_params(spec, 30);
    Tape t;
    Rng rng(31);
    Var dict = t.push(random_tensor({like.numel() + 1, 3}, rng));
    Var s = t.push(random_tensor({3, 1}, rng));
    EXPECT_THROW((void)dictionary_params(like, dict, s), std::invalid_argument);
}

TEST(ParamVectorOps, FlattenUnflattenRoundTrip) {
    auto spec = ModelSpec::mlp_spec({4, 7, 3}, Nonlinearity::relu_fn);
    ParamVector pv = random_params(spec, 32);
    ParamVector back = pv.unflatten(pv.flatten());
    ASSERT_EQ(back.size(), pv.size());
    for (std::size_t i = 0; i < pv.size(); ++i) {
        EXPECT_EQ(back[i].name, pv[i].name);
        EXPECT_EQ(back[i].tensor.shape, pv[i].tensor.shape);
        EXPECT_EQ(back[i].tensor.data, pv[i].tensor.data);
    }
}

TEST(ParamVectorOps, ParameterCountIsArchitectureConstant) {
    auto spec = ModelSpec::mlp_spec({784, 300, 300, 10}, Nonlinearity::relu_fn);
    EXPECT_EQ(random_params(spec, 33).numel(), random_params(spec, 34).numel());
    EXPECT_EQ(random_params(spec, 33).numel(), 784u * 300 + 300 + 300 * 300 + 300 + 300 * 10 + 10);
}
