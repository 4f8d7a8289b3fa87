#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "attnseq/error.hpp"
#include "attnseq/rng.hpp"

namespace attnseq {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the recorded computation. Gradients accumulate additively, so
// a tensor used several times collects contributions from every use.
struct Node {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // sized on first accumulation, else empty
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "";

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

    void accum_grad(const std::vector<double>& g);
    void accum_grad_at(std::size_t i, double g);
    void ensure_grad();
};

// Dense n-d array of f64 with optional participation in the gradient tape.
// Value-semantics handle over a shared node; copying shares storage.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false) { return full(std::move(shape), 1.0, requires_grad); }
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false);
    static Tensor normal(Shape shape, Rng& rng, double mean, double stddev, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
    std::int64_t dim(std::int64_t i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return node_->size(); }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& data_mut() { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad();

    double item() const;

    // Reverse pass from a scalar; fills grad on every reachable requires_grad
    // tensor.
    void backward() const;

    // Same storage, fresh leaf node outside the tape.
    Tensor detach(bool requires_grad = false) const;
    // Fresh storage copy, leaf.
    Tensor clone(bool requires_grad = false) const;

    Node* node() const { return node_.get(); }
    const NodePtr& node_ptr() const { return node_; }

private:
    NodePtr node_;
};

// Topologically ordered record of the computation reaching a root: every
// node's parents precede it. Backward replays it once, in reverse.
struct Tape {
    std::vector<Node*> order;
    std::vector<NodePtr> keepalive;

    static Tape record(const Tensor& root);
    void replay_backward();
};

// Thread-local switch; with grads disabled ops do not record parents or
// backward rules.
bool grad_enabled();
void set_grad_enabled(bool enabled);

struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

}  // namespace attnseq
