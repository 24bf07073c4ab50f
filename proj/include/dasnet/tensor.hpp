#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dasnet/common.hpp"

namespace dasnet {

// When off, operators run pure forward passes and record no graph.
class GradMode {
  public:
    static bool enabled() { return flag(); }
    static void set(bool on) { flag() = on; }

  private:
    static bool& flag() {
        thread_local bool on = false;
        return on;
    }
};

struct GradModeGuard {
    bool prev;
    explicit GradModeGuard(bool on) : prev(GradMode::enabled()) { GradMode::set(on); }
    ~GradModeGuard() { GradMode::set(prev); }
};

namespace detail {

// One value in the (acyclic) compute graph. Leaves have no backward_fn;
// interior nodes hold the closure that scatters their gradient to parents.
template <class S>
struct TensorNode {
    Shape4 shape;
    std::vector<S> values;
    std::vector<S> grad;  // empty until first accumulation; then values.size()
    bool requires_grad = false;  // leaf marked as a trainable parameter/input
    bool needs_grad = false;     // true if any requires_grad leaf is reachable
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::vector<S>& ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), S(0));
        return grad;
    }

    void accumulate(const S* g, std::size_t count) {
        ensure_grad();
        for (std::size_t i = 0; i < count; ++i) grad[i] += g[i];
    }
};

}  // namespace detail

// Shared-storage handle over a graph node: copying a Tensor aliases it.
// Layout is row-major over (n, c, h, w), 32/64-bit IEEE scalars.
template <class S>
class Tensor {
  public:
    using Node = detail::TensorNode<S>;

    Tensor() = default;

    static Tensor zeros(Shape4 shape) { return filled(shape, S(0)); }

    static Tensor filled(Shape4 shape, S v) {
        check_shape(shape);
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = shape;
        t.node_->values.assign(static_cast<std::size_t>(shape.numel()), v);
        return t;
    }

    static Tensor from_vector(Shape4 shape, std::vector<S> values) {
        check_shape(shape);
        if (static_cast<std::int64_t>(values.size()) != shape.numel())
            throw ConfigError("tensor: value count " + std::to_string(values.size()) +
                              " does not match shape " + shape.str());
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = shape;
        t.node_->values = std::move(values);
        return t;
    }

    static Tensor scalar(S v) { return filled({1, 1, 1, 1}, v); }

    bool defined() const { return node_ != nullptr; }
    const Shape4& shape() const { return node_->shape; }
    std::int64_t numel() const { return node_ ? node_->shape.numel() : 0; }

    S* data() { return node_->values.data(); }
    const S* data() const { return node_->values.data(); }
    std::vector<S>& values() { return node_->values; }
    const std::vector<S>& values() const { return node_->values; }

    std::int64_t index(int n, int c, int y, int x) const {
        const Shape4& s = node_->shape;
        return ((static_cast<std::int64_t>(n) * s.c + c) * s.h + y) * s.w + x;
    }
    S& at(int n, int c, int y, int x) { return node_->values[index(n, c, y, x)]; }
    S at(int n, int c, int y, int x) const { return node_->values[index(n, c, y, x)]; }
    S item() const {
        if (numel() != 1) throw ConfigError("item(): tensor is not scalar");
        return node_->values[0];
    }

    void set_requires_grad(bool on) {
        node_->requires_grad = on;
        node_->needs_grad = on || node_->needs_grad;
    }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool needs_grad() const { return node_ && node_->needs_grad; }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    // Zero-filled on first touch so unreached parameters read back as zero.
    std::vector<S>& grad() { return node_->ensure_grad(); }
    const S* grad_data() const { return node_->grad.data(); }
    void zero_grad() {
        if (node_ && !node_->grad.empty()) node_->grad.assign(node_->grad.size(), S(0));
    }

    // Same values, no graph history.
    Tensor detached_copy() const {
        Tensor t = from_vector(shape(), node_->values);
        return t;
    }

    template <class T>
    Tensor<T> cast() const {
        std::vector<T> v(node_->values.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(node_->values[i]);
        return Tensor<T>::from_vector(shape(), std::move(v));
    }

    std::shared_ptr<Node> node() const { return node_; }

  private:
    static void check_shape(const Shape4& s) {
        if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
            throw ConfigError("tensor: non-positive shape " + s.str());
    }

    std::shared_ptr<Node> node_;
};

namespace detail {

// Wires a freshly computed result into the graph when recording is active.
// `backward` reads out.grad and accumulates into the parents' grads.
template <class S>
Tensor<S> make_result(Shape4 shape, std::vector<S> values,
                      std::vector<Tensor<S>> inputs,
                      std::function<void(TensorNode<S>&)> backward) {
    Tensor<S> out = Tensor<S>::from_vector(shape, std::move(values));
    if (!GradMode::enabled()) return out;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || (in.defined() && in.needs_grad());
    if (!needs) return out;
    auto node = out.node();
    node->needs_grad = true;
    for (const auto& in : inputs)
        if (in.defined()) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward);
    return out;
}

}  // namespace detail

// Reverse-mode accumulation from a scalar loss. Parents are visited in a
// deterministic reverse topological order (DFS with fixed input order), so
// repeated runs produce bitwise-identical gradients.
template <class S>
void backward(const Tensor<S>& loss) {
    using Node = detail::TensorNode<S>;
    if (!loss.defined() || loss.numel() != 1)
        throw ConfigError("backward: loss must be a defined scalar tensor");
    Node* root = loss.node().get();
    if (!root->needs_grad) return;

    // Iterative postorder DFS; grey-set detects cycles.
    std::vector<Node*> order;
    std::unordered_set<Node*> done;
    std::unordered_set<Node*> open;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    open.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (!p->needs_grad || done.count(p)) continue;
            if (open.count(p)) throw InternalError("backward: cycle in compute graph");
            open.insert(p);
            stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            done.insert(node);
            open.erase(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace dasnet
