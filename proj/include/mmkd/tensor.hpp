#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mmkd/errors.hpp"
#include "mmkd/rng.hpp"

namespace mmkd::ad {

using Shape = std::vector<int>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One node of the reverse-mode computation graph. Leaves own values (and,
// for trainable leaves, accumulated gradients); interior nodes additionally
// record their parents and a backprop closure. Graphs are acyclic, built
// per forward pass and released by backward().
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool backward_done = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    void ensure_grad() {
        if (grad.empty()) {
            grad.assign(value.size(), 0.0);
        }
    }
};

} // namespace detail

// Thread-local switch: while disabled, ops produce constant results with no
// graph attached (used for teacher forward passes and greedy decoding).
class GradMode {
public:
    static bool enabled();
    static void set(bool on);
};

class NoGradGuard {
public:
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense double-precision tensor, a shared handle onto a graph node.
// Scalars use shape {1}. Rank is at most 2 in practice: row-wise operations
// treat the last axis as the feature/vocabulary axis.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, double v);
    static Tensor scalar(double v);
    static Tensor from_data(const Shape& shape, std::vector<double> data);
    static Tensor randn(const Shape& shape, Rng& rng, double stddev);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(size_t i) const { return node_->shape[i]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t size() const { return static_cast<int64_t>(node_->value.size()); }
    int rows() const;
    int cols() const;

    const std::vector<double>& value() const { return node_->value; }
    // Direct mutation is reserved for leaves between graphs (optimizer steps,
    // checkpoint loads); mutating an interior node invalidates its graph.
    std::vector<double>& mutable_value() { return node_->value; }
    double item() const;

    Tensor& set_requires_grad(bool on);
    bool requires_grad() const { return node_->requires_grad; }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    const std::vector<double>& grad() const;
    void clear_grad() { node_->grad.clear(); }
    void accumulate_grad(const std::vector<double>& g);

    // Constant leaf sharing a copy of this tensor's values.
    Tensor detach() const;

    detail::Node* node() const { return node_.get(); }

    static Tensor wrap(std::shared_ptr<detail::Node> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

// Runs reverse-mode accumulation from a scalar loss. Gradients accumulate
// into every reachable leaf with requires_grad set; the interior of the
// graph is released afterwards and a second call on the same loss throws.
void backward(const Tensor& loss);

} // namespace mmkd::ad
