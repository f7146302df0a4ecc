#pragma once

#include <memory>
#include <vector>

#include "whathow/tensor.hpp"

namespace whathow {

enum class TaskKind { regression, classification };

/// One mini-batch: inputs plus targets. Regression fills `y`, classification
/// fills `labels`. The context window handed to task inference is exactly the
/// previous iteration's mini-batch, so it shares this representation.
struct Minibatch {
    Tensor x;
    Tensor y;                 // (B, 1) regression targets
    std::vector<int> labels;  // classification labels

    std::size_t size() const { return x.rank() == 0 ? 0 : x.shape[0]; }
    bool empty() const { return size() == 0; }
};

using ContextWindow = Minibatch;

/// A task's immutable sample store; batches are drawn from it by index. The
/// input tensor is shared so that tasks differing only in labels (the
/// label-permuted stream) do not duplicate the images.
struct Dataset {
    std::shared_ptr<const Tensor> x;  // (N, ...) stacked inputs
    Tensor y;
    std::vector<int> labels;

    static Dataset of(Tensor inputs) {
        Dataset d;
        d.x = std::make_shared<const Tensor>(std::move(inputs));
        return d;
    }

    std::size_t size() const { return (!x || x->rank() == 0) ? 0 : x->shape[0]; }

    Minibatch gather(const std::vector<std::size_t>& idx) const {
        Minibatch b;
        Shape item_shape(x->shape.begin() + 1, x->shape.end());
        const std::size_t item = shape_numel(item_shape);
        Shape bshape{idx.size()};
        bshape.insert(bshape.end(), item_shape.begin(), item_shape.end());
        b.x = Tensor{bshape};
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy_n(x->data.begin() + static_cast<std::ptrdiff_t>(idx[i] * item), item,
                        b.x.data.begin() + static_cast<std::ptrdiff_t>(i * item));
        if (y.numel() > 0) {
            b.y = Tensor{Shape{idx.size(), 1}};
            for (std::size_t i = 0; i < idx.size(); ++i) b.y.data[i] = y.data[idx[i]];
        }
        if (!labels.empty()) {
            b.labels.reserve(idx.size());
            for (std::size_t i : idx) b.labels.push_back(labels[i]);
        }
        return b;
    }

    Minibatch all() const {
        std::vector<std::size_t> idx(size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        return gather(idx);
    }
};

/// Train/test split for one task in the stream.
struct TaskData {
    Dataset train;
    Dataset test;
};

/// Wrap a single batch as a throwaway dataset (replay-time evaluation).
inline Dataset dataset_from(const Minibatch& b) {
    Dataset d = Dataset::of(b.x);
    d.y = b.y;
    d.labels = b.labels;
    return d;
}

}  // namespace whathow
