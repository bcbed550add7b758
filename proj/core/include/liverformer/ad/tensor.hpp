// tensor.hpp — reverse-mode autodiff graph core.
//
// Tensors are shared handles to graph nodes holding a shape, a contiguous
// value buffer, and (when reachable from a parameter) a same-shape gradient
// buffer. Ops record their inputs and a backward closure. backward(loss)
// runs one reverse topological sweep.
//
// Gradient semantics: leaf nodes (parameters, inputs) accumulate across
// backward calls — two sweeps without zero_grad double their gradients;
// interior node gradients are reset at the start of every sweep. backward
// never mutates forward values.
//
// The scalar type is a template parameter: double for finite-difference
// verification, float for training.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace liverformer::ad {

struct AdError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeMismatch : AdError {
    using AdError::AdError;
};
struct NonIntegralOutput : AdError {
    using AdError::AdError;
};
struct IndivisibleHeads : AdError {
    using AdError::AdError;
};
struct NotDivisibleByPatch : AdError {
    using AdError::AdError;
};
struct NonScalarLoss : AdError {
    using AdError::AdError;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized on demand; empty means "not yet touched"
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::function<void()> backward_fn;  // set by the op that produced this node
    std::string name;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T{});
    }
};

template <typename T>
class Tensor {
  public:
    std::shared_ptr<Node<T>> node;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> n) : node(std::move(n)) {}

    static Tensor constant(Shape shape, std::vector<T> data, std::string name = {}) {
        if (data.size() != ad::numel(shape)) {
            throw ShapeMismatch("tensor data length " + std::to_string(data.size()) +
                                " != numel of " + shape_str(shape));
        }
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->name = std::move(name);
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, std::string name = {}) {
        std::vector<T> data(ad::numel(shape), T{});
        return constant(std::move(shape), std::move(data), std::move(name));
    }

    static Tensor full(Shape shape, T fill, std::string name = {}) {
        std::vector<T> data(ad::numel(shape), fill);
        return constant(std::move(shape), std::move(data), std::move(name));
    }

    /// Trainable leaf; gradients accumulate across backward sweeps.
    static Tensor parameter(Shape shape, std::vector<T> data, std::string name) {
        Tensor t = constant(std::move(shape), std::move(data), std::move(name));
        t.node->requires_grad = true;
        return t;
    }

    bool defined() const { return node != nullptr; }
    const Shape& shape() const { return node->shape; }
    std::size_t numel() const { return node->value.size(); }
    bool requires_grad() const { return node->requires_grad; }
    const std::string& name() const { return node->name; }

    std::vector<T>& value() { return node->value; }
    const std::vector<T>& value() const { return node->value; }

    std::vector<T>& grad() {
        node->ensure_grad();
        return node->grad;
    }

    void zero_grad() { node->grad.assign(node->value.size(), T{}); }
};

namespace detail {

// Post-order over the requires_grad subgraph, iterative to keep deep graphs
// off the call stack.
template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    if (!root->requires_grad) return order;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        Node<T>* n = stack.back().first;
        if (stack.back().second < n->inputs.size()) {
            Node<T>* child = n->inputs[stack.back().second++].get();
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(n);
        stack.pop_back();
    }
    return order;
}

}  // namespace detail

/// Reverse sweep from a scalar loss. Interior gradients are recomputed from
/// scratch; leaf gradients accumulate.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw NonScalarLoss("backward needs a scalar loss, got shape " +
                            shape_str(loss.shape()));
    }
    Node<T>* root = loss.node.get();
    if (!root->requires_grad) return;  // nothing trainable feeds the loss

    std::vector<Node<T>*> order = detail::topo_order(root);
    for (Node<T>* n : order) {
        if (n->inputs.empty()) {
            n->ensure_grad();  // leaves keep accumulated values
        } else {
            n->grad.assign(n->value.size(), T{});
        }
    }
    if (root->inputs.empty()) {
        root->grad[0] += T(1);
    } else {
        root->grad[0] = T(1);
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
}

namespace detail {

/// Allocates the output node of an op and wires input edges.
template <typename T>
Tensor<T> make_result(Shape shape, std::initializer_list<Tensor<T>> inputs,
                      const char* op_name) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value.assign(numel(n->shape), T{});
    n->name = op_name;
    for (const Tensor<T>& t : inputs) {
        n->inputs.push_back(t.node);
        n->requires_grad = n->requires_grad || t.node->requires_grad;
    }
    return Tensor<T>(std::move(n));
}

}  // namespace detail

}  // namespace liverformer::ad
