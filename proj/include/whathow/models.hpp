#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "whathow/autodiff.hpp"
#include "whathow/params.hpp"
#include "whathow/tensor.hpp"

namespace whathow {

enum class Arch { mlp, cnn };
enum class Nonlinearity { tanh_fn, relu_fn };

/// Network architecture description. The CNN topology is fixed to the shape
/// used for the image experiments: two 5x5 valid convolutions with 40
/// channels, each followed by ReLU and 2x2 max pooling, then a 300-wide
/// fully connected layer and the output layer.
struct ModelSpec {
    Arch arch = Arch::mlp;
    std::vector<std::size_t> layer_sizes;  // mlp: input, hidden..., output
    Nonlinearity act = Nonlinearity::tanh_fn;

    // multi-head output: `heads` separate (fc_width x head_width) layers
    std::size_t heads = 1;
    std::size_t head_width = 0;  // per-head outputs; 0 = single head, width from layer_sizes/cnn_out
    std::size_t cnn_out = 0;     // single-head cnn output width

    std::size_t input_hw = 28;
    std::size_t conv_channels = 40;
    std::size_t kernel = 5;
    std::size_t fc_width = 300;

    static ModelSpec mlp_spec(std::vector<std::size_t> sizes, Nonlinearity act) {
        ModelSpec s;
        s.arch = Arch::mlp;
        s.layer_sizes = std::move(sizes);
        s.act = act;
        return s;
    }

    static ModelSpec cnn_spec(std::size_t out_width, std::size_t heads = 1, std::size_t head_width = 0) {
        ModelSpec s;
        s.arch = Arch::cnn;
        s.act = Nonlinearity::relu_fn;
        s.cnn_out = out_width;
        s.heads = heads;
        s.head_width = head_width;
        return s;
    }

    bool multi_head() const { return heads > 1; }

    std::size_t conv_flat() const {
        std::size_t hw = input_hw;
        hw = (hw - kernel + 1) / 2;  // conv1 + pool
        hw = (hw - kernel + 1) / 2;  // conv2 + pool
        return conv_channels * hw * hw;
    }

    std::size_t output_width() const { return multi_head() ? head_width : (arch == Arch::cnn ? cnn_out : layer_sizes.back()); }
};

namespace detail {

inline Tensor uniform_init(const Shape& shape, std::size_t fan_in, Rng& rng) {
    Tensor t{shape};
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.uniform(-bound, bound);
    return t;
}

}  // namespace detail

/// Fan-in scaled uniform initialization; biases start at zero.
inline ParamVector init_params(const ModelSpec& spec, Rng& rng) {
    ParamVector pv;
    if (spec.arch == Arch::mlp) {
        detail::check(spec.layer_sizes.size() >= 2, "init_params: mlp needs at least input and output sizes");
        for (std::size_t l = 0; l + 1 < spec.layer_sizes.size(); ++l) {
            const std::size_t in = spec.layer_sizes[l], out = spec.layer_sizes[l + 1];
            pv.add("w" + std::to_string(l), detail::uniform_init(Shape{in, out}, in, rng));
            pv.add("b" + std::to_string(l), Tensor{Shape{out}});
        }
        return pv;
    }
    const std::size_t c = spec.conv_channels, k = spec.kernel;
    pv.add("conv0.w", detail::uniform_init(Shape{c, 1, k, k}, k * k, rng));
    pv.add("conv0.b", Tensor{Shape{c}});
    pv.add("conv1.w", detail::uniform_init(Shape{c, c, k, k}, c * k * k, rng));
    pv.add("conv1.b", Tensor{Shape{c}});
    const std::size_t flat = spec.conv_flat();
    pv.add("fc0.w", detail::uniform_init(Shape{flat, spec.fc_width}, flat, rng));
    pv.add("fc0.b", Tensor{Shape{spec.fc_width}});
    if (spec.multi_head()) {
        for (std::size_t h = 0; h < spec.heads; ++h) {
            pv.add("head" + std::to_string(h) + ".w",
                   detail::uniform_init(Shape{spec.fc_width, spec.head_width}, spec.fc_width, rng));
            pv.add("head" + std::to_string(h) + ".b", Tensor{Shape{spec.head_width}});
        }
    } else {
        pv.add("out.w", detail::uniform_init(Shape{spec.fc_width, spec.cnn_out}, spec.fc_width, rng));
        pv.add("out.b", Tensor{Shape{spec.cnn_out}});
    }
    return pv;
}

namespace detail {

inline Var activate(const Var& x, Nonlinearity act) {
    return act == Nonlinearity::tanh_fn ? whathow::tanh(x) : relu(x);
}

inline Var mlp_forward_impl(const ModelSpec& spec, const std::vector<Var>& params, const Var& x) {
    const std::size_t layers = spec.layer_sizes.size() - 1;
    check(params.size() == 2 * layers, "mlp forward: parameter count mismatch");
    const Tensor& tx = val(x);
    check(tx.rank() == 2 && tx.shape[1] == spec.layer_sizes[0],
          "mlp forward: input " + shape_str(tx.shape) + " does not match input width " +
              std::to_string(spec.layer_sizes[0]));
    Var h = x;
    for (std::size_t l = 0; l < layers; ++l) {
        h = add(matmul(h, params[2 * l]), params[2 * l + 1]);
        if (l + 1 < layers) h = activate(h, spec.act);
    }
    return h;
}

inline Var cnn_forward_impl(const ModelSpec& spec, const std::vector<Var>& params, const Var& x, int head) {
    const Tensor& tx = val(x);
    check(tx.rank() == 4 && tx.shape[1] == 1 && tx.shape[2] == spec.input_hw && tx.shape[3] == spec.input_hw,
          "cnn forward: input must be (batch, 1, " + std::to_string(spec.input_hw) + ", " +
              std::to_string(spec.input_hw) + "), got " + shape_str(tx.shape));
    if (spec.multi_head()) {
        check(head >= 0 && static_cast<std::size_t>(head) < spec.heads,
              "cnn forward: multi-head model requires a head index in [0, " + std::to_string(spec.heads) + ")");
    }
    const std::size_t batch = tx.shape[0];  // tape pushes may invalidate tx
    Var h = conv2d(x, params[0]);
    h = add(h, bcast_channel(params[1], Shape(val(h).shape)));
    h = maxpool2d(relu(h));
    h = conv2d(h, params[2]);
    h = add(h, bcast_channel(params[3], Shape(val(h).shape)));
    h = maxpool2d(relu(h));
    h = reshape(h, Shape{batch, spec.conv_flat()});
    h = relu(add(matmul(h, params[4]), params[5]));
    const std::size_t out_idx = spec.multi_head() ? 6 + 2 * static_cast<std::size_t>(head) : 6;
    return add(matmul(h, params[out_idx]), params[out_idx + 1]);
}

}  // namespace detail

/// Forward pass; `head` selects the output layer of a multi-head model.
inline Var model_forward(const ModelSpec& spec, const std::vector<Var>& params, const Var& x, int head = -1) {
    return spec.arch == Arch::mlp ? detail::mlp_forward_impl(spec, params, x)
                                  : detail::cnn_forward_impl(spec, params, x, head);
}

/// Forward pass with effective parameters theta * sigmoid(mask), elementwise.
inline Var gated_forward(const ModelSpec& spec, const std::vector<Var>& theta, const std::vector<Var>& mask,
                         const Var& x, int head = -1) {
    detail::check(theta.size() == mask.size(), "gated_forward: mask count does not match parameter count");
    std::vector<Var> effective;
    effective.reserve(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        detail::check(val(theta[i]).same_shape(val(mask[i])),
                      "gated_forward: mask shape " + shape_str(val(mask[i]).shape) + " does not match parameter " +
                          shape_str(val(theta[i]).shape));
        effective.push_back(mul(theta[i], sigmoid(mask[i])));
    }
    return model_forward(spec, effective, x, head);
}

/// theta = L s for a dictionary L (d x k) and coefficients s (k, 1), split
/// back into per-layer tensors shaped like `like`.
inline std::vector<Var> dictionary_params(const ParamVector& like, const Var& dict, const Var& s) {
    const Tensor& td = val(dict);
    const Tensor& ts = val(s);
    detail::check(td.rank() == 2, "dictionary_params: dictionary must be (d, k), got " + shape_str(td.shape));
    detail::check(ts.rank() == 2 && ts.shape[1] == 1 && ts.shape[0] == td.shape[1],
                  "dictionary_params: coefficients must be (k, 1) with k = " + std::to_string(td.shape[1]) +
                      ", got " + shape_str(ts.shape));
    detail::check(td.shape[0] == like.numel(), "dictionary_params: dictionary rows " + std::to_string(td.shape[0]) +
                                                   " do not match parameter count " + std::to_string(like.numel()));
    const std::size_t d = td.shape[0];  // tape pushes may invalidate td
    Var flat = reshape(matmul(dict, s), Shape{d});
    std::vector<Var> out;
    out.reserve(like.size());
    std::size_t off = 0;
    for (const auto& e : like) {
        out.push_back(reshape(narrow(flat, off, e.tensor.numel()), e.tensor.shape));
        off += e.tensor.numel();
    }
    return out;
}

}  // namespace whathow
