#include "mmkd/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace mmkd::ad {

int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;

void check_dims(const Shape& shape) {
    for (int d : shape) {
        if (d <= 0) {
            throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        }
    }
}

std::shared_ptr<detail::Node> make_leaf(const Shape& shape, std::vector<double> data) {
    check_dims(shape);
    if (numel(shape) != static_cast<int64_t>(data.size())) {
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = shape;
    n->value = std::move(data);
    return n;
}
} // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool on) { g_grad_enabled = on; }

Tensor Tensor::zeros(const Shape& shape) {
    check_dims(shape);
    return wrap(make_leaf(shape, std::vector<double>(static_cast<size_t>(numel(shape)), 0.0)));
}

Tensor Tensor::full(const Shape& shape, double v) {
    check_dims(shape);
    return wrap(make_leaf(shape, std::vector<double>(static_cast<size_t>(numel(shape)), v)));
}

Tensor Tensor::scalar(double v) {
    return wrap(make_leaf({1}, {v}));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data) {
    return wrap(make_leaf(shape, std::move(data)));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev) {
    check_dims(shape);
    std::vector<double> data(static_cast<size_t>(numel(shape)));
    for (double& x : data) {
        x = rng.normal() * stddev;
    }
    return wrap(make_leaf(shape, std::move(data)));
}

int Tensor::rows() const {
    const Shape& s = node_->shape;
    if (s.empty()) {
        return 1;
    }
    int64_t r = 1;
    for (size_t i = 0; i + 1 < s.size(); ++i) {
        r *= s[i];
    }
    return static_cast<int>(r);
}

int Tensor::cols() const {
    const Shape& s = node_->shape;
    return s.empty() ? 1 : s.back();
}

double Tensor::item() const {
    if (size() != 1) {
        throw ContractError("item() requires a scalar tensor, got shape " + shape_str(shape()));
    }
    return node_->value[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
    if (on && !node_->parents.empty()) {
        throw ContractError("requires_grad can only be toggled on leaf tensors");
    }
    node_->requires_grad = on;
    return *this;
}

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) {
        throw ContractError("tensor has no gradient; run backward() first");
    }
    return node_->grad;
}

void Tensor::accumulate_grad(const std::vector<double>& g) {
    if (g.size() != node_->value.size()) {
        throw DimensionError("gradient size mismatch");
    }
    node_->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) {
        node_->grad[i] += g[i];
    }
}

Tensor Tensor::detach() const {
    return wrap(make_leaf(node_->shape, node_->value));
}

void backward(const Tensor& loss) {
    if (!loss.defined()) {
        throw ContractError("backward() on an undefined tensor");
    }
    detail::Node* root = loss.node();
    if (loss.size() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (root->backward_done) {
        throw ContractError("backward() was already called on this graph; rebuild the forward pass first");
    }
    if (!root->requires_grad) {
        throw ContractError("loss does not require grad; nothing to differentiate");
    }

    // Iterative post-order DFS. Parent order is fixed at node creation, so
    // the resulting topological order (and therefore every floating-point
    // accumulation order) is deterministic.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            detail::Node* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backprop) {
            node->backprop(*node);
        }
    }

    // Release the interior of the graph; leaves keep their accumulated grads.
    for (detail::Node* node : order) {
        if (!node->parents.empty()) {
            node->parents.clear();
            node->backprop = nullptr;
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
    root->backward_done = true;
}

} // namespace mmkd::ad
