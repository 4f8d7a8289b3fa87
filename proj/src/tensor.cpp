#include "attnseq/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace attnseq {

std::int64_t shape_size(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void Node::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
}

void Node::accum_grad(const std::vector<double>& g) {
    if (g.size() != data.size()) throw ShapeError("gradient size mismatch");
    ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

void Node::accum_grad_at(std::size_t i, double g) {
    ensure_grad();
    grad[i] += g;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    for (std::int64_t d : shape) {
        if (d <= 0) throw ShapeError("dimension sizes must be positive, got " + shape_str(shape));
    }
    if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    node_->op = "leaf";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = static_cast<std::size_t>(shape_size(shape));
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = static_cast<std::size_t>(shape_size(shape));
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
    const auto n = static_cast<std::size_t>(shape_size(shape));
    std::vector<double> d(n);
    for (auto& v : d) v = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::normal(Shape shape, Rng& rng, double mean, double stddev, bool requires_grad) {
    const auto n = static_cast<std::size_t>(shape_size(shape));
    std::vector<double> d(n);
    for (auto& v : d) v = rng.normal(mean, stddev);
    return Tensor(std::move(shape), std::move(d), requires_grad);
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.empty()) throw Error("gradient not available; run backward() first");
    return node_->grad;
}

void Tensor::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
    return node_->data[0];
}

Tensor Tensor::detach(bool requires_grad) const {
    auto n = std::make_shared<Node>();
    n->shape = node_->shape;
    n->data = node_->data;
    n->requires_grad = requires_grad;
    n->op = "leaf";
    return Tensor(std::move(n));
}

Tensor Tensor::clone(bool requires_grad) const {
    return detach(requires_grad);
}

Tape Tape::record(const Tensor& root) {
    Tape tape;
    std::unordered_set<Node*> visited;
    // Iterative post-order so deep graphs cannot overflow the stack.
    struct Frame {
        Node* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root.node(), 0});
    visited.insert(root.node());
    tape.keepalive.push_back(root.node_ptr());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            Node* p = f.node->parents[f.next_parent].get();
            NodePtr ps = f.node->parents[f.next_parent];
            ++f.next_parent;
            if (visited.insert(p).second) {
                tape.keepalive.push_back(std::move(ps));
                stack.push_back({p, 0});
            }
        } else {
            tape.order.push_back(f.node);
            stack.pop_back();
        }
    }
    return tape;
}

void Tape::replay_backward() {
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

void Tensor::backward() const {
    if (size() != 1) {
        throw Error("backward() requires a scalar loss, got shape " + shape_str(shape()));
    }
    Tape tape = Tape::record(*this);
    node_->ensure_grad();
    node_->grad[0] += 1.0;
    tape.replay_backward();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool enabled) { g_grad_enabled = enabled; }

}  // namespace attnseq
