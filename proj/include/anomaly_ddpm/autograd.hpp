#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "anomaly_ddpm/tensor.hpp"

namespace anomaly_ddpm::nn {

// Persistent trainable tensor with its gradient and Adam state.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m;
    Tensor adam_v;

    explicit Parameter(std::string n, Tensor init)
        : name(std::move(n)),
          value(std::move(init)),
          grad(value.shape()),
          adam_m(value.shape()),
          adam_v(value.shape()) {}
};

// One vertex of the dynamic compute graph. `backward_op` scatters this
// node's grad into the grads of its inputs.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_op;
    Parameter* param = nullptr;

    Tensor& ensure_grad() {
        if (!grad.same_shape(value)) grad = Tensor(value.shape());
        return grad;
    }
};

using NodePtr = std::shared_ptr<Node>;

class Var {
  public:
    Var() = default;
    explicit Var(NodePtr n) : node_(std::move(n)) {}

    const Tensor& val() const { return node_->value; }
    Tensor& val() { return node_->value; }
    const std::vector<int>& shape() const { return node_->value.shape(); }
    int dim(int i) const { return node_->value.dim(i); }
    const NodePtr& node() const { return node_; }
    bool defined() const { return node_ != nullptr; }
    bool requires_grad() const { return node_ && node_->requires_grad; }

  private:
    NodePtr node_;
};

// Thread-local autograd switch; eval paths run under NoGradGuard and build
// no graph at all.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return Var(n);
}

inline Var leaf(Tensor t, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = requires_grad && grad_mode();
    return Var(n);
}

// Builds an op node; the backward closure is recorded only when some input
// participates in gradient computation.
inline Var make_op(Tensor value, std::initializer_list<Var> ins, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (grad_mode()) {
        bool any = false;
        for (const auto& v : ins) any = any || v.requires_grad();
        if (any) {
            n->requires_grad = true;
            for (const auto& v : ins)
                if (v.defined()) n->inputs.push_back(v.node());
            n->backward_op = std::move(bw);
        }
    }
    return Var(n);
}

inline void accumulate(Node& dst, const Tensor& g) {
    Tensor& d = dst.ensure_grad();
    const float* src = g.data();
    float* out = d.data();
    int64_t n = g.numel();
    for (int64_t i = 0; i < n; ++i) out[i] += src[i];
}

// Leaf bound to a persistent parameter. The value is snapshotted into the
// graph; after backward() the node grad lands in Parameter::grad.
inline Var param_var(Parameter& p) {
    auto n = std::make_shared<Node>();
    n->value = p.value;
    if (grad_mode()) {
        n->requires_grad = true;
        n->param = &p;
    }
    return Var(n);
}

// Reverse-mode sweep from a scalar root.
inline void backward(const Var& root) {
    if (!root.defined() || root.val().numel() != 1)
        throw ShapeError("backward expects a defined scalar root");
    if (!root.requires_grad()) return;

    // iterative post-order DFS over the grad-requiring subgraph
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->inputs.size()) {
            Node* child = node->inputs[idx++].get();
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->ensure_grad().fill(1.0f);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_op) {
            n->ensure_grad();
            n->backward_op(*n);
        }
        if (n->param) n->param->grad += n->ensure_grad();
    }
}

}  // namespace anomaly_ddpm::nn
