#pragma once

#include <string>
#include <utility>
#include <vector>

#include "whathow/autodiff.hpp"
#include "whathow/tensor.hpp"

namespace whathow {

/// Ordered collection of named tensors: the flat view of a network's weights,
/// a mask set, or a dictionary. Entry order is fixed by construction, so
/// flatten/unflatten round-trips exactly.
class ParamVector {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
    };

    ParamVector() = default;

    void add(std::string name, Tensor t) { entries_.push_back({std::move(name), std::move(t)}); }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    Entry& operator[](std::size_t i) { return entries_[i]; }
    const Entry& operator[](std::size_t i) const { return entries_[i]; }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    /// Total element count d.
    std::size_t numel() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    bool congruent(const ParamVector& o) const {
        if (entries_.size() != o.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].tensor.shape != o.entries_[i].tensor.shape) return false;
        return true;
    }

    Tensor flatten() const {
        Tensor out{Shape{numel()}};
        std::size_t off = 0;
        for (const auto& e : entries_) {
            std::copy(e.tensor.data.begin(), e.tensor.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
            off += e.tensor.numel();
        }
        return out;
    }

    /// Rebuild a ParamVector with this one's names/shapes from a flat vector.
    ParamVector unflatten(const Tensor& flat) const {
        if (flat.rank() != 1 || flat.numel() != numel())
            throw std::invalid_argument("unflatten: flat vector of length " + std::to_string(flat.numel()) +
                                        " does not match parameter count " + std::to_string(numel()));
        ParamVector out;
        std::size_t off = 0;
        for (const auto& e : entries_) {
            Tensor t{e.tensor.shape};
            std::copy_n(flat.data.begin() + static_cast<std::ptrdiff_t>(off), t.numel(), t.data.begin());
            off += t.numel();
            out.add(e.name, std::move(t));
        }
        return out;
    }

    /// Same-shape ParamVector filled with a constant.
    ParamVector like(double fill) const {
        ParamVector out;
        for (const auto& e : entries_) out.add(e.name, Tensor{e.tensor.shape, fill});
        return out;
    }

    /// Elementwise visit over aligned entries of several vectors.
    template <class F>
    static void zip(ParamVector& a, const ParamVector& b, F&& f) {
        for (std::size_t i = 0; i < a.size(); ++i)
            for (std::size_t j = 0; j < a[i].tensor.numel(); ++j) f(a[i].tensor.data[j], b[i].tensor.data[j]);
    }

    template <class F>
    static void zip3(ParamVector& a, const ParamVector& b, const ParamVector& c, F&& f) {
        for (std::size_t i = 0; i < a.size(); ++i)
            for (std::size_t j = 0; j < a[i].tensor.numel(); ++j)
                f(a[i].tensor.data[j], b[i].tensor.data[j], c[i].tensor.data[j]);
    }

private:
    std::vector<Entry> entries_;
};

/// Push every tensor of a ParamVector onto a tape, one Var per entry.
inline std::vector<Var> push_params(Tape& tape, const ParamVector& pv) {
    std::vector<Var> vars;
    vars.reserve(pv.size());
    for (const auto& e : pv) vars.push_back(tape.push(e.tensor));
    return vars;
}

/// Collect tape values back into a ParamVector shaped like `like`.
inline ParamVector collect_params(const ParamVector& like, const std::vector<Var>& vars) {
    ParamVector out;
    for (std::size_t i = 0; i < like.size(); ++i) out.add(like[i].name, val(vars[i]));
    return out;
}

}  // namespace whathow
