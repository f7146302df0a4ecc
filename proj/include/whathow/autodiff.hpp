#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "whathow/tensor.hpp"

namespace whathow {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
};

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
    return ConstMatMap(t.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
}  // namespace detail

/// Reverse-mode tape. Forward ops append nodes; gradients() walks the tape
/// backwards, emitting the adjoint computation as further ops. When the
/// adjoints are emitted with recording enabled (create_graph), they can be
/// differentiated again, which is what the meta-gradients rely on.
///
/// A tape and its Vars are confined to a single thread. Tapes are cheap to
/// construct and are rebuilt per iteration rather than reused.
class Tape {
public:
    using Contribs = std::vector<std::pair<int, Var>>;
    using BackwardFn = std::function<void(const Var& upstream, Contribs& out)>;

    Var push(Tensor value) {
        nodes_.push_back(Node{std::move(value), nullptr});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    void set_backward(const Var& v, BackwardFn fn) {
        if (recording_) nodes_[static_cast<std::size_t>(v.id)].backward = std::move(fn);
    }

    const Tensor& value(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
    const Shape& shape(const Var& v) const { return value(v).shape; }

    std::size_t size() const { return nodes_.size(); }
    bool recording() const { return recording_; }

    /// Adjoints of `loss` w.r.t. each of `wrt`. A node unreachable from the
    /// loss yields a zero tensor of its shape. With create_graph the returned
    /// Vars are differentiable in a subsequent gradients() call.
    std::vector<Var> gradients(const Var& loss, const std::vector<Var>& wrt, bool create_graph);

private:
    struct Node {
        Tensor value;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    bool recording_ = true;
};

inline const Tensor& val(const Var& v) { return v.tape->value(v); }

namespace detail {

inline void check(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

inline bool is_suffix(const Shape& suffix, const Shape& of) {
    if (suffix.size() >= of.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), of.rbegin());
}

inline void check_same_tape(const Var& a, const Var& b, const char* op) {
    check(a.tape != nullptr && a.tape == b.tape, std::string(op) + ": operands must live on the same tape");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

Var bcast_lead(const Var& x, const Shape& full);
Var sum_lead(const Var& x, const Shape& target);

namespace detail {

template <class F>
Var binary_same_shape(const Var& a, const Var& b, const char* name, F&& fn, bool a_grad_is_upstream,
                      const std::function<Var(const Var&, const Var&, const Var&)>& grad_a,
                      const std::function<Var(const Var&, const Var&, const Var&)>& grad_b);

}  // namespace detail

inline Var prim_add(const Var& a, const Var& b) {
    detail::check_same_tape(a, b, "add");
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    detail::check(ta.same_shape(tb), "add: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out = ta;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += tb.data[i];
    Tape& t = *a.tape;
    Var r = t.push(std::move(out));
    t.set_backward(r, [a, b](const Var& u, Tape::Contribs& out) {
        out.emplace_back(a.id, u);
        out.emplace_back(b.id, u);
    });
    return r;
}

inline Var scale(const Var& x, double c) {
    Tensor out = val(x);
    for (double& v : out.data) v *= c;
    Tape& t = *x.tape;
    Var r = t.push(std::move(out));
    t.set_backward(r, [x, c](const Var& u, Tape::Contribs& out) { out.emplace_back(x.id, scale(u, c)); });
    return r;
}

inline Var prim_sub(const Var& a, const Var& b) {
    detail::check_same_tape(a, b, "sub");
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    detail::check(ta.same_shape(tb), "sub: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out = ta;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= tb.data[i];
    Tape& t = *a.tape;
    Var r = t.push(std::move(out));
    t.set_backward(r, [a, b](const Var& u, Tape::Contribs& out) {
        out.emplace_back(a.id, u);
        out.emplace_back(b.id, scale(u, -1.0));
    });
    return r;
}

inline Var prim_mul(const Var& a, const Var& b) {
    detail::check_same_tape(a, b, "mul");
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    detail::check(ta.same_shape(tb), "mul: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out = ta;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= tb.data[i];
    Tape& t = *a.tape;
    Var r = t.push(std::move(out));
    t.set_backward(r, [a, b](const Var& u, Tape::Contribs& out) {
        out.emplace_back(a.id, prim_mul(u, b));
        out.emplace_back(b.id, prim_mul(u, a));
    });
    return r;
}

namespace detail {

/// Dispatch with the only supported broadcast: a trailing-shape operand is
/// tiled over the leading (batch) dimensions of the other.
template <class Prim>
Var broadcasting(const char* name, const Var& a, const Var& b, Prim&& prim) {
    const Shape& sa = val(a).shape;
    const Shape& sb = val(b).shape;
    if (sa == sb) return prim(a, b);
    if (is_suffix(sb, sa)) return prim(a, bcast_lead(b, sa));
    if (is_suffix(sa, sb)) return prim(bcast_lead(a, sb), b);
    throw std::invalid_argument(std::string(name) + ": incompatible shapes " + shape_str(sa) + " vs " +
                                shape_str(sb) + " (only leading-batch broadcast is supported)");
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) { return detail::broadcasting("add", a, b, prim_add); }
inline Var sub(const Var& a, const Var& b) { return detail::broadcasting("sub", a, b, prim_sub); }
inline Var mul(const Var& a, const Var& b) { return detail::broadcasting("mul", a, b, prim_mul); }

// ---------------------------------------------------------------------------
// Shape movement
// ---------------------------------------------------------------------------

inline Var reshape(const Var& x, Shape target) {
    const Tensor& tx = val(x);
    detail::check(shape_numel(target) == tx.numel(),
                  "reshape: cannot view " + shape_str(tx.shape) + " as " + shape_str(target));
    Shape back = tx.shape;
    Tensor out;
    out.shape = std::move(target);
    out.data = tx.data;
    Tape& t = *x.tape;
    Var r = t.push(std::move(out));
    t.set_backward(r, [x, back](const Var& u, Tape::Contribs& out) { out.emplace_back(x.id, reshape(u, back)); });
    return r;
}

Var pad_segment(const Var& x, std::size_t offset, std::size_t total);

/// Slice [offset, offset+len) of a rank-1 tensor.
inline Var narrow(const Var& x, std::size_t offset, std::size_t len) {
    const Tensor& tx = val(x);
    detail::check(tx.rank() == 1, "narrow: expects rank-1 input, got " + shape_str(tx.shape));
    detail::check(offset + len <= tx.numel(), "narrow: segment out of range");
    const std::size_t total = tx.numel();
    Tensor out{Shape{len}};
    std::copy_n(tx.data.begin() + static_cast<std::ptrdiff_t>(offset), len, out.data.begin());
    Tape& t = *x.tape;
    Var r = t.push(std::move(out));
    t.set_backward(r, [x, offset, total](const Var& u, Tape::Contribs& out) {
        out.emplace_back(x.id, pad_segment(u, offset, total));
    });
    return r;
}

inline Var pad_segment(const Var& x, std::size_t offset, std::size_t total) {
    const Tensor& tx = val(x);
    detail::check(tx.rank() == 1, "pad_segment: expects rank-1 input");
    detail::check(offset + tx.numel() <= total, "pad_segment: segment out of range");
    const std::size_t len = tx.numel();
    Tensor out{Shape{total}};
    std::copy(tx.data.begin(), tx.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(offset));
    Tape& t = *x.tape;
    Var r = t.push(std::move(out));
    t.set_backward(r, [x, offset, len](const Var& u, Tape::Contribs& out) {
        out.emplace_back(x.id, narrow(u, offset, len));
    });
    return r;
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts (each pair is the other's adjoint)
// ---------------------------------------------------------------------------

Var sum(const Var& x);

inline Var bcast_scalar(const Var& x, const Shape& target) {
    const Tensor& tx = val(x);
    detail::check(tx.numel() == 1, "bcast_scalar: source must be scalar");
    Tensor out{target, tx.data[0]};
    Tape& t = *x.tape;
    Var r = t.push(std::move(out));
    t.set_backward(r, [x](const Var& u, Tape::Contribs& out) { out.emplace_back(x.id, sum(u)); });
    return r;
}

inline Var sum(const Var& x) {
    const Tensor& tx = val(x);
    Shape sh = tx.shape;
    double acc = 0.0;
    for (double v : tx.data) acc += v;
    Tape& t = *x.tape;
    Var r = t.push(Tensor::scalar(acc));
    t.set_backward(r, [x, sh](const Var& u, Tape::Contribs& out) { out.emplace_back(x.id, bcast_scalar(u, sh)); });
    return r;
}

inline Var mean(const Var& x) {
    const std::size_t n = val(x).numel();
    detail::check(n > 0, "mean: empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(n));
}

inline Var bcast_lead(const Var& x, const Shape& full) {
    const Tensor& tx = val(x);
    detail::check(detail::is_suffix(tx.shape, full),
                  "bcast_lead: " + shape_str(tx.shape) + " is not a suffix of " + shape_str(full));
    const std::size_t inner = tx.numel();
    const std::size_t reps = shape_numel(full) / std::max<std::size_t>(inner, 1);
    Tensor out{full};
    for (std::size_t r = 0; r < reps; ++r)
        std::copy(tx.data.begin(), tx.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(r * inner));
    Shape target = tx.shape;
    Tape& t = *x.tape;
    Var rv = t.push(std::move(out));
    t.set_backward(rv, [x, target](const Var& u, Tape::Contribs& out) { out.emplace_back(x.id, sum_lead(u, target)); });
    return rv;
}

inline Var sum_lead(const Var& x, const Shape& target) {
    const Tensor& tx = val(x);
    detail::check(detail::is_suffix(target, tx.shape),
                  "sum_lead: " + shape_str(target) + " is not a suffix of " + shape_str(tx.shape));
    const std::size_t inner = shape_numel(target);
    const std::size_t reps = tx.numel() / std::max<std::size_t>(inner, 1);
    Tensor out{target};
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < inner; ++i) out.data[i] += tx.data[r * inner + i];
    Shape full = tx.shape;
    Tape& t = *x.tape;
    Var rv = t.push(std::move(out));
    t.set_backward(rv, [x, full](const Var& u, Tape::Contribs& out) { out.emplace_back(x.id, bcast_lead(u, full)); });
    return rv;
}

Var bcast_last(const Var& x, std::size_t n);

/// Sum over the last axis, keeping it as size 1.
inline Var sum_last(const Var& x) {
    const Tensor& tx = val(x);
    detail::check(tx.rank() >= 1, "sum_last: needs rank >= 1");
    const std::size_t cols = tx.shape.back();
    const std::size_t rows = tx.numel() / std::max<std::size_t>(cols, 1);
    Shape out_shape = tx.shape;
    out_shape.back() = 1;
    Tensor out{out_shape};
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += tx.data[r * cols + c];
        out.data[r] = acc;
    }
    Tape& t = *x.tape;
    Var rv = t.push(std::move(out));
    t.set_backward(rv, [x, cols](const Var& u, Tape::Contribs& out) { out.emplace_back(x.id, bcast_last(u, cols)); });
    return rv;
}

inline Var bcast_last(const Var& x, std::size_t n) {
    const Tensor& tx = val(x);
    detail::check(tx.rank() >= 1 && tx.shape.back() == 1, "bcast_last: last axis must be 1");
    Shape out_shape = tx.shape;
    out_shape.back() = n;
    Tensor out{out_shape};
    const std::size_t rows = tx.numel();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) out.data[r * n + c] = tx.data[r];
    Tape& t = *x.tape;
    Var rv = t.push(std::move(out));
    t.set_backward(rv, [x](const Var& u, Tape::Contribs& out) { out.emplace_back(x.id, sum_last(u)); });
    return rv;
}

Var sum_channel(const Var& x);

/// Tile a per-channel vector (C) over a (B, C, H, W) shape.
inline Var bcast_channel(const Var& x, const Shape& full) {
    const Tensor& tx = val(x);
    detail::check(tx.rank() == 1 && full.size() == 4 && full[1] == tx.shape[0],
                  "bcast_channel: need (C) source and (B, C, H, W) target, got " + shape_str(tx.shape) + " and " +
                      shape_str(full));
    Tensor out{full};
    const std::size_t b = full[0], c = full[1], hw = full[2] * full[3];
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ci = 0; ci < c; ++ci) {
            double v = tx.data[ci];
            double* dst = out.data.data() + (bi * c + ci) * hw;
            std::fill_n(dst, hw, v);
        }
    Tape& t = *x.tape;
    Var rv = t.push(std::move(out));
    t.set_backward(rv, [x](const Var& u, Tape::Contribs& out) { out.emplace_back(x.id, sum_channel(u)); });
    return rv;
}

inline Var sum_channel(const Var& x) {
    const Tensor& tx = val(x);
    detail::check(tx.rank() == 4, "sum_channel: expects (B, C, H, W)");
    const std::size_t b = tx.shape[0], c = tx.shape[1], hw = tx.shape[2] * tx.shape[3];
    Tensor out{Shape{c}};
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double* src = tx.data.data() + (bi * c + ci) * hw;
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += src[i];
            out.data[ci] += acc;
        }
    Shape full = tx.shape;
    Tape& t = *x.tape;
    Var rv = t.push(std::move(out));
    t.set_backward(rv, [x, full](const Var& u, Tape::Contribs& out) { out.emplace_back(x.id, bcast_channel(u, full)); });
    return rv;
}

// ---------------------------------------------------------------------------
// Matrix product
// ---------------------------------------------------------------------------

/// C = op(A) * op(B) with optional transposes; rank-2 operands only.
inline Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false) {
    detail::check_same_tape(a, b, "matmul");
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    detail::check(ta.rank() == 2 && tb.rank() == 2,
                  "matmul: rank-2 tensors required, got " + shape_str(ta.shape) + " and " + shape_str(tb.shape));
    const std::size_t m = trans_a ? ta.shape[1] : ta.shape[0];
    const std::size_t ka = trans_a ? ta.shape[0] : ta.shape[1];
    const std::size_t kb = trans_b ? tb.shape[1] : tb.shape[0];
    const std::size_t n = trans_b ? tb.shape[0] : tb.shape[1];
    detail::check(ka == kb, "matmul: inner dimensions disagree, " + shape_str(ta.shape) + (trans_a ? "^T" : "") +
                                " * " + shape_str(tb.shape) + (trans_b ? "^T" : ""));

    Tensor out{Shape{m, n}};
    auto ma = detail::as_matrix(ta, ta.shape[0], ta.shape[1]);
    auto mb = detail::as_matrix(tb, tb.shape[0], tb.shape[1]);
    detail::MatMap mc(out.data.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (!trans_a && !trans_b)
        mc.noalias() = ma * mb;
    else if (trans_a && !trans_b)
        mc.noalias() = ma.transpose() * mb;
    else if (!trans_a && trans_b)
        mc.noalias() = ma * mb.transpose();
    else
        mc.noalias() = ma.transpose() * mb.transpose();

    Tape& t = *a.tape;
    Var r = t.push(std::move(out));
    t.set_backward(r, [a, b, trans_a, trans_b](const Var& u, Tape::Contribs& out) {
        Var da = trans_a ? matmul(b, u, trans_b, true) : matmul(u, b, false, !trans_b);
        Var db = trans_b ? matmul(u, a, true, trans_a) : matmul(a, u, !trans_a, false);
        out.emplace_back(a.id, da);
        out.emplace_back(b.id, db);
    });
    return r;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

inline Var tanh(const Var& x) {
    Tensor out = val(x);
    for (double& v : out.data) v = std::tanh(v);
    Tape& t = *x.tape;
    Var y = t.push(std::move(out));
    t.set_backward(y, [x, y](const Var& u, Tape::Contribs& out) {
        Var y2 = prim_mul(y, y);
        out.emplace_back(x.id, prim_sub(u, prim_mul(u, y2)));
    });
    return y;
}

inline Var sigmoid(const Var& x) {
    Tensor out = val(x);
    for (double& v : out.data) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    Tape& t = *x.tape;
    Var y = t.push(std::move(out));
    t.set_backward(y, [x, y](const Var& u, Tape::Contribs& out) {
        Var uy = prim_mul(u, y);
        out.emplace_back(x.id, prim_sub(uy, prim_mul(uy, y)));
    });
    return y;
}

inline Var relu(const Var& x) {
    const Tensor& tx = val(x);
    Tensor out = tx;
    auto mask = std::make_shared<Tensor>(tx.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        if (out.data[i] > 0.0) {
            mask->data[i] = 1.0;
        } else {
            out.data[i] = 0.0;
        }
    }
    Tape& t = *x.tape;
    Var y = t.push(std::move(out));
    t.set_backward(y, [x, mask](const Var& u, Tape::Contribs& out) {
        Var m = u.tape->push(*mask);
        out.emplace_back(x.id, prim_mul(u, m));
    });
    return y;
}

inline Var exp(const Var& x) {
    Tensor out = val(x);
    for (double& v : out.data) v = std::exp(v);
    Tape& t = *x.tape;
    Var y = t.push(std::move(out));
    t.set_backward(y, [x, y](const Var& u, Tape::Contribs& out) { out.emplace_back(x.id, prim_mul(u, y)); });
    return y;
}

/// Numerically stable log-softmax over the last axis of a (B, C) tensor.
inline Var log_softmax(const Var& x) {
    const Tensor& tx = val(x);
    detail::check(tx.rank() == 2, "log_softmax: expects (batch, classes), got " + shape_str(tx.shape));
    const std::size_t rows = tx.shape[0], cols = tx.shape[1];
    Tensor out = tx;
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = out.data.data() + r * cols;
        double mx = *std::max_element(row, row + cols);
        double lse = 0.0;
        for (std::size_t c = 0; c < cols; ++c) lse += std::exp(row[c] - mx);
        lse = mx + std::log(lse);
        for (std::size_t c = 0; c < cols; ++c) row[c] -= lse;
    }
    Tape& t = *x.tape;
    Var y = t.push(std::move(out));
    t.set_backward(y, [x, y, cols](const Var& u, Tape::Contribs& out) {
        Var p = exp(y);  // softmax
        Var row_sums = bcast_last(sum_last(u), cols);
        out.emplace_back(x.id, prim_sub(u, prim_mul(p, row_sums)));
    });
    return y;
}

/// Sum of absolute values; the subgradient at 0 is taken as 0.
inline Var l1_norm(const Var& x) {
    const Tensor& tx = val(x);
    double acc = 0.0;
    auto sign = std::make_shared<Tensor>(tx.shape);
    for (std::size_t i = 0; i < tx.numel(); ++i) {
        acc += std::abs(tx.data[i]);
        sign->data[i] = tx.data[i] > 0.0 ? 1.0 : (tx.data[i] < 0.0 ? -1.0 : 0.0);
    }
    Shape sh = tx.shape;
    Tape& t = *x.tape;
    Var r = t.push(Tensor::scalar(acc));
    t.set_backward(r, [x, sign, sh](const Var& u, Tape::Contribs& out) {
        Var s = u.tape->push(*sign);
        out.emplace_back(x.id, prim_mul(bcast_scalar(u, sh), s));
    });
    return r;
}

// ---------------------------------------------------------------------------
// Convolution (valid padding, stride 1) and 2x2 max pooling
// ---------------------------------------------------------------------------

namespace detail {

// col layout: (C*KH*KW) x (OH*OW), one image at a time.
inline void im2col(const double* img, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                   double* col) {
    const std::size_t oh = h - kh + 1, ow = w - kw + 1;
    std::size_t row = 0;
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t p = 0; p < kh; ++p)
            for (std::size_t q = 0; q < kw; ++q, ++row) {
                double* dst = col + row * (oh * ow);
                for (std::size_t i = 0; i < oh; ++i) {
                    const double* src = img + ci * h * w + (i + p) * w + q;
                    std::copy_n(src, ow, dst + i * ow);
                }
            }
}

inline void col2im_accumulate(const double* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
                              std::size_t kw, double* img) {
    const std::size_t oh = h - kh + 1, ow = w - kw + 1;
    std::size_t row = 0;
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t p = 0; p < kh; ++p)
            for (std::size_t q = 0; q < kw; ++q, ++row) {
                const double* src = col + row * (oh * ow);
                for (std::size_t i = 0; i < oh; ++i) {
                    double* dst = img + ci * h * w + (i + p) * w + q;
                    for (std::size_t j = 0; j < ow; ++j) dst[j] += src[i * ow + j];
                }
            }
}

}  // namespace detail

Var conv2d_grad_input(const Var& gy, const Var& w, std::size_t h, std::size_t w_in);
Var conv2d_grad_weight(const Var& x, const Var& gy, std::size_t kh, std::size_t kw);

/// x: (B, C, H, W), weight: (O, C, KH, KW) -> (B, O, H-KH+1, W-KW+1).
inline Var conv2d(const Var& x, const Var& w) {
    detail::check_same_tape(x, w, "conv2d");
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    detail::check(tx.rank() == 4 && tw.rank() == 4,
                  "conv2d: expects (B, C, H, W) input and (O, C, KH, KW) weight, got " + shape_str(tx.shape) +
                      " and " + shape_str(tw.shape));
    const std::size_t b = tx.shape[0], c = tx.shape[1], h = tx.shape[2], wd = tx.shape[3];
    const std::size_t o = tw.shape[0], kh = tw.shape[2], kw = tw.shape[3];
    detail::check(tw.shape[1] == c, "conv2d: channel mismatch " + shape_str(tx.shape) + " vs " + shape_str(tw.shape));
    detail::check(h >= kh && wd >= kw, "conv2d: kernel larger than input");
    const std::size_t oh = h - kh + 1, ow = wd - kw + 1;

    Tensor out{Shape{b, o, oh, ow}};
    const std::size_t ck = c * kh * kw;
    std::vector<double> col(ck * oh * ow);
    auto wm = detail::as_matrix(tw, o, ck);
    for (std::size_t bi = 0; bi < b; ++bi) {
        detail::im2col(tx.data.data() + bi * c * h * wd, c, h, wd, kh, kw, col.data());
        detail::ConstMatMap cm(col.data(), static_cast<Eigen::Index>(ck), static_cast<Eigen::Index>(oh * ow));
        detail::MatMap om(out.data.data() + bi * o * oh * ow, static_cast<Eigen::Index>(o),
                          static_cast<Eigen::Index>(oh * ow));
        om.noalias() = wm * cm;
    }

    Tape& t = *x.tape;
    Var r = t.push(std::move(out));
    t.set_backward(r, [x, w, h, wd, kh, kw](const Var& u, Tape::Contribs& out) {
        out.emplace_back(x.id, conv2d_grad_input(u, w, h, wd));
        out.emplace_back(w.id, conv2d_grad_weight(x, u, kh, kw));
    });
    return r;
}

inline Var conv2d_grad_input(const Var& gy, const Var& w, std::size_t h, std::size_t w_in) {
    const Tensor& tg = val(gy);
    const Tensor& tw = val(w);
    detail::check(tg.rank() == 4 && tw.rank() == 4, "conv2d_grad_input: rank-4 tensors required");
    const std::size_t b = tg.shape[0], o = tg.shape[1], oh = tg.shape[2], ow = tg.shape[3];
    const std::size_t c = tw.shape[1], kh = tw.shape[2], kw = tw.shape[3];
    detail::check(tw.shape[0] == o && oh == h - kh + 1 && ow == w_in - kw + 1,
                  "conv2d_grad_input: inconsistent shapes");

    Tensor out{Shape{b, c, h, w_in}};
    const std::size_t ck = c * kh * kw;
    std::vector<double> col(ck * oh * ow);
    auto wm = detail::as_matrix(tw, o, ck);
    for (std::size_t bi = 0; bi < b; ++bi) {
        detail::ConstMatMap gm(tg.data.data() + bi * o * oh * ow, static_cast<Eigen::Index>(o),
                               static_cast<Eigen::Index>(oh * ow));
        detail::MatMap cm(col.data(), static_cast<Eigen::Index>(ck), static_cast<Eigen::Index>(oh * ow));
        cm.noalias() = wm.transpose() * gm;
        detail::col2im_accumulate(col.data(), c, h, w_in, kh, kw, out.data.data() + bi * c * h * w_in);
    }

    Tape& t = *gy.tape;
    Var r = t.push(std::move(out));
    t.set_backward(r, [gy, w, kh, kw](const Var& u, Tape::Contribs& out) {
        out.emplace_back(gy.id, conv2d(u, w));
        out.emplace_back(w.id, conv2d_grad_weight(u, gy, kh, kw));
    });
    return r;
}

inline Var conv2d_grad_weight(const Var& x, const Var& gy, std::size_t kh, std::size_t kw) {
    const Tensor& tx = val(x);
    const Tensor& tg = val(gy);
    detail::check(tx.rank() == 4 && tg.rank() == 4, "conv2d_grad_weight: rank-4 tensors required");
    const std::size_t b = tx.shape[0], c = tx.shape[1], h = tx.shape[2], wd = tx.shape[3];
    const std::size_t o = tg.shape[1], oh = tg.shape[2], ow = tg.shape[3];
    detail::check(tg.shape[0] == b && oh == h - kh + 1 && ow == wd - kw + 1,
                  "conv2d_grad_weight: inconsistent shapes");

    Tensor out{Shape{o, c, kh, kw}};
    const std::size_t ck = c * kh * kw;
    std::vector<double> col(ck * oh * ow);
    detail::MatMap om(out.data.data(), static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(ck));
    for (std::size_t bi = 0; bi < b; ++bi) {
        detail::im2col(tx.data.data() + bi * c * h * wd, c, h, wd, kh, kw, col.data());
        detail::ConstMatMap cm(col.data(), static_cast<Eigen::Index>(ck), static_cast<Eigen::Index>(oh * ow));
        detail::ConstMatMap gm(tg.data.data() + bi * o * oh * ow, static_cast<Eigen::Index>(o),
                               static_cast<Eigen::Index>(oh * ow));
        om.noalias() += gm * cm.transpose();
    }

    Tape& t = *x.tape;
    Var r = t.push(std::move(out));
    std::size_t h_in = h, w_in = wd;
    t.set_backward(r, [x, gy, h_in, w_in](const Var& u, Tape::Contribs& out) {
        out.emplace_back(x.id, conv2d_grad_input(gy, u, h_in, w_in));
        out.emplace_back(gy.id, conv2d(x, u));
    });
    return r;
}

Var maxunpool2d(const Var& x, std::shared_ptr<std::vector<std::size_t>> idx, const Shape& in_shape);
Var pool_pick(const Var& x, std::shared_ptr<std::vector<std::size_t>> idx, const Shape& out_shape);

/// 2x2 max pooling, stride 2; spatial dims must be even.
inline Var maxpool2d(const Var& x) {
    const Tensor& tx = val(x);
    detail::check(tx.rank() == 4, "maxpool2d: expects (B, C, H, W), got " + shape_str(tx.shape));
    const std::size_t b = tx.shape[0], c = tx.shape[1], h = tx.shape[2], w = tx.shape[3];
    detail::check(h % 2 == 0 && w % 2 == 0, "maxpool2d: spatial dims must be even, got " + shape_str(tx.shape));
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor out{Shape{b, c, oh, ow}};
    auto idx = std::make_shared<std::vector<std::size_t>>(out.numel());
    std::size_t oi = 0;
    for (std::size_t bc = 0; bc < b * c; ++bc) {
        const double* plane = tx.data.data() + bc * h * w;
        const std::size_t base = bc * h * w;
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j, ++oi) {
                std::size_t best = (2 * i) * w + 2 * j;
                double bv = plane[best];
                const std::size_t cand[3] = {(2 * i) * w + 2 * j + 1, (2 * i + 1) * w + 2 * j,
                                             (2 * i + 1) * w + 2 * j + 1};
                for (std::size_t k = 0; k < 3; ++k)
                    if (plane[cand[k]] > bv) {
                        bv = plane[cand[k]];
                        best = cand[k];
                    }
                out.data[oi] = bv;
                (*idx)[oi] = base + best;
            }
    }
    Shape in_shape = tx.shape;
    Tape& t = *x.tape;
    Var r = t.push(std::move(out));
    t.set_backward(r, [x, idx, in_shape](const Var& u, Tape::Contribs& out) {
        out.emplace_back(x.id, maxunpool2d(u, idx, in_shape));
    });
    return r;
}

inline Var maxunpool2d(const Var& x, std::shared_ptr<std::vector<std::size_t>> idx, const Shape& in_shape) {
    const Tensor& tx = val(x);
    detail::check(tx.numel() == idx->size(), "maxunpool2d: index count mismatch");
    Tensor out{in_shape};
    for (std::size_t i = 0; i < tx.numel(); ++i) out.data[(*idx)[i]] += tx.data[i];
    Shape pooled = tx.shape;
    Tape& t = *x.tape;
    Var r = t.push(std::move(out));
    t.set_backward(r, [x, idx, pooled](const Var& u, Tape::Contribs& out) {
        out.emplace_back(x.id, pool_pick(u, idx, pooled));
    });
    return r;
}

inline Var pool_pick(const Var& x, std::shared_ptr<std::vector<std::size_t>> idx, const Shape& out_shape) {
    const Tensor& tx = val(x);
    Tensor out{out_shape};
    detail::check(out.numel() == idx->size(), "pool_pick: index count mismatch");
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = tx.data[(*idx)[i]];
    Shape in_shape = tx.shape;
    Tape& t = *x.tape;
    Var r = t.push(std::move(out));
    t.set_backward(r, [x, idx, in_shape](const Var& u, Tape::Contribs& out) {
        out.emplace_back(x.id, maxunpool2d(u, idx, in_shape));
    });
    return r;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean squared error over all elements.
inline Var mse(const Var& pred, const Var& target) {
    Var d = sub(pred, target);
    return mean(mul(d, d));
}

/// Summed squared error over all elements.
inline Var sse(const Var& pred, const Var& target) {
    Var d = sub(pred, target);
    return sum(mul(d, d));
}

inline Tensor one_hot(const std::vector<int>& labels, std::size_t classes) {
    Tensor t{Shape{labels.size(), classes}};
    for (std::size_t i = 0; i < labels.size(); ++i) {
        int l = labels[i];
        if (l < 0 || static_cast<std::size_t>(l) >= classes)
            throw std::invalid_argument("one_hot: label " + std::to_string(l) + " outside [0, " +
                                        std::to_string(classes) + ")");
        t.data[i * classes + static_cast<std::size_t>(l)] = 1.0;
    }
    return t;
}

/// Cross entropy from logits, averaged over the batch. `targets` is a one-hot
/// constant of the same shape.
inline Var softmax_cross_entropy(const Var& logits, const Var& targets, bool mean_over_batch = true) {
    const Tensor& tl = val(logits);
    detail::check(tl.rank() == 2, "softmax_cross_entropy: logits must be (batch, classes)");
    detail::check(val(targets).same_shape(tl), "softmax_cross_entropy: target shape " +
                                                   shape_str(val(targets).shape) + " does not match logits " +
                                                   shape_str(tl.shape));
    const double denom = mean_over_batch ? static_cast<double>(tl.shape[0]) : 1.0;
    Var picked = mul(log_softmax(logits), targets);
    return scale(sum(picked), -1.0 / denom);
}

// ---------------------------------------------------------------------------
// Backward walk
// ---------------------------------------------------------------------------

inline std::vector<Var> Tape::gradients(const Var& loss, const std::vector<Var>& wrt, bool create_graph) {
    detail::check(loss.tape == this, "gradients: loss lives on another tape");
    detail::check(value(loss).numel() == 1, "gradients: loss must be scalar, got " + shape_str(shape(loss)));
    for (const Var& w : wrt) detail::check(w.tape == this, "gradients: wrt var lives on another tape");

    const bool saved = recording_;
    recording_ = create_graph;

    std::vector<Var> adjoint(static_cast<std::size_t>(loss.id) + 1);
    adjoint[static_cast<std::size_t>(loss.id)] = push(Tensor::scalar(1.0));

    Contribs contribs;
    for (int id = loss.id; id >= 0; --id) {
        Var a = adjoint[static_cast<std::size_t>(id)];
        if (!a.valid()) continue;
        BackwardFn bw = nodes_[static_cast<std::size_t>(id)].backward;  // copy: nodes_ may reallocate
        if (!bw) continue;
        contribs.clear();
        bw(a, contribs);
        for (auto& [input_id, g] : contribs) {
            Var& slot = adjoint[static_cast<std::size_t>(input_id)];
            slot = slot.valid() ? prim_add(slot, g) : g;
        }
    }

    std::vector<Var> result;
    result.reserve(wrt.size());
    for (const Var& w : wrt) {
        Var a = w.id <= loss.id ? adjoint[static_cast<std::size_t>(w.id)] : Var{};
        result.push_back(a.valid() ? a : push(Tensor{shape(w)}));
    }
    recording_ = saved;
    return result;
}

}  // namespace whathow
