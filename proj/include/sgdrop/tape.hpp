#pragma once

#include <functional>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "tensor.hpp"

namespace sgdrop {

/// A tensor bound to a position on a tape. node < 0 means the value is a
/// constant for gradient purposes.
template <typename T>
struct Var {
    Tensor<T> value;
    int node = -1;

    bool tracked() const { return node >= 0; }

    static Var constant(Tensor<T> t) { return Var{std::move(t), -1}; }
};

/// Gradients for the node ids requested from Tape::backward.
template <typename T>
class GradResult {
public:
    const Tensor<T>& at(int node) const {
        auto it = grads_.find(node);
        if (it == grads_.end())
            throw std::invalid_argument("GradResult: node " + std::to_string(node) +
                                        " was not watched");
        return it->second;
    }
    const Tensor<T>& at(const Var<T>& v) const { return at(v.node); }
    bool contains(int node) const { return grads_.count(node) != 0; }

    void insert(int node, Tensor<T> g) { grads_.emplace(node, std::move(g)); }

private:
    std::unordered_map<int, Tensor<T>> grads_;
};

/// Define-by-run reverse-mode tape. Ops append nodes in execution order, so
/// every node's inputs precede it; backward replays the records strictly in
/// reverse. Gradients that fan out accumulate by summation, always in that
/// same reverse order, which makes repeated backward passes bit-identical
/// in single-threaded mode.
template <typename T>
class Tape {
public:
    using BackFn = std::function<void(const Tensor<T>& grad_out, std::vector<Tensor<T>>& grads)>;

    /// Register a leaf (parameter or watched activation). Always tracked.
    Var<T> watch(const Tensor<T>& t) {
        int id = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{nullptr, t.shape()});
        return Var<T>{t, id};
    }

    /// Tracked leaf if the tensor asks for gradients, constant otherwise.
    Var<T> leaf(const Tensor<T>& t) {
        return t.requires_grad ? watch(t) : Var<T>::constant(t);
    }

    /// Append an interior node. `parents` is used only to validate
    /// topological order; the closure owns the actual parent ids.
    int record(const std::vector<int>& parents, Shape out_shape, BackFn back) {
        int id = static_cast<int>(nodes_.size());
        for (int p : parents)
            if (p < 0 || p >= id)
                throw std::logic_error("Tape::record: parent id out of order");
        nodes_.push_back(Node{std::move(back), std::move(out_shape)});
        return id;
    }

    std::size_t size() const { return nodes_.size(); }

    /// Exact reverse-mode gradients of a scalar output with respect to the
    /// watched nodes. Watched nodes with no path to the output get zeros.
    GradResult<T> backward(const Var<T>& output, const std::vector<int>& watched) const {
        if (!output.tracked() || output.node >= static_cast<int>(nodes_.size()))
            throw std::invalid_argument("backward: output is not on this tape");
        if (output.value.numel() != 1)
            throw std::invalid_argument("backward: output must be a scalar, got shape " +
                                        shape_str(output.value.shape()));
        std::vector<char> keep(nodes_.size(), 0);
        for (int w : watched) {
            if (w < 0 || w >= static_cast<int>(nodes_.size()))
                throw std::invalid_argument("backward: watched node " + std::to_string(w) +
                                            " is not on the tape");
            keep[static_cast<std::size_t>(w)] = 1;
        }

        std::vector<Tensor<T>> grads(nodes_.size());
        grads[static_cast<std::size_t>(output.node)] = Tensor<T>(output.value.shape(), T{1});

        for (int i = output.node; i >= 0; --i) {
            auto idx = static_cast<std::size_t>(i);
            if (grads[idx].empty()) continue;
            if (nodes_[idx].back) nodes_[idx].back(grads[idx], grads);
            if (!keep[idx]) grads[idx] = Tensor<T>{}; // release memory early
        }

        GradResult<T> result;
        for (int w : watched) {
            auto idx = static_cast<std::size_t>(w);
            if (grads[idx].empty())
                result.insert(w, Tensor<T>(nodes_[idx].out_shape));
            else
                result.insert(w, grads[idx]);
        }
        return result;
    }

    /// grads[slot] += g, allocating a zero tensor on first touch.
    static void accumulate(std::vector<Tensor<T>>& grads, int slot, const Tensor<T>& g) {
        Tensor<T>& dst = grads[static_cast<std::size_t>(slot)];
        if (dst.empty()) {
            dst = g.deep_copy();
            return;
        }
        T* d = dst.data();
        const T* s = g.data();
        const std::size_t n = dst.numel();
        for (std::size_t i = 0; i < n; ++i) d[i] += s[i];
    }

private:
    struct Node {
        BackFn back; // null for leaves
        Shape out_shape;
    };
    std::vector<Node> nodes_;
};

template <typename T>
Var<T> detach(const Var<T>& v) {
    return Var<T>::constant(v.value.detached());
}

} // namespace sgdrop
