#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fixnoise/errors.hpp"

namespace fixnoise {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

class Tensor;
struct GradNode;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a backward pass reaches this leaf
    bool requires_grad = false;
    std::shared_ptr<GradNode> node;  // null for leaves
};

/// Dense row-major float64 array with optional gradient tracking.
///
/// Tensor is a shared handle: copies alias the same storage. Use `clone()`
/// for an independent copy. Every op that takes a tensor requiring grad
/// records a GradNode, and `backward()` replays the recorded nodes in reverse
/// creation order.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        const auto n = shape_numel(shape);
        return from_data(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor full(Shape shape, double value) {
        const auto n = shape_numel(shape);
        return from_data(std::move(shape), std::vector<double>(n, value));
    }

    static Tensor scalar(double value) { return from_data({}, {value}); }

    static Tensor from_data(Shape shape, std::vector<double> data) {
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(data);
        return t;
    }

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }

    /// Write access to storage. Only meaningful for leaves (parameters and
    /// inputs); mutating a recorded intermediate corrupts its backward rule.
    std::span<double> mutable_data() { return impl_->data; }
    std::vector<double>& storage() { return impl_->data; }

    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    double operator[](std::size_t i) const { return impl_->data[i]; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }

    Tensor& set_requires_grad(bool on) {
        if (impl_->node) throw ContractError("requires_grad can only be set on leaf tensors");
        impl_->requires_grad = on;
        return *this;
    }

    bool is_leaf() const { return !impl_->node; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    std::vector<double>& grad_storage() { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    /// Same values, no history, independent storage.
    Tensor detach() const { return from_data(shape(), impl_->data); }
    Tensor clone() const {
        Tensor t = from_data(shape(), impl_->data);
        t.impl_->requires_grad = is_leaf() && impl_->requires_grad;
        return t;
    }

    const std::shared_ptr<GradNode>& node() const { return impl_->node; }
    const TensorImpl* id() const { return impl_.get(); }

    /// Populates `grad()` of every requires_grad leaf reachable from this
    /// scalar. Repeated calls accumulate.
    void backward() const;

private:
    friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                              std::function<std::vector<Tensor>(const Tensor&)>, const char*);
    std::shared_ptr<TensorImpl> impl_;
};

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_output)>;

/// One recorded operation: its inputs and the rule mapping the output
/// gradient to per-input gradients (undefined tensor = no contribution).
struct GradNode {
    std::uint64_t seq = 0;
    const char* op = "";
    std::vector<Tensor> inputs;
    BackwardFn backward;
};

namespace detail {
inline thread_local bool grad_mode = true;
inline std::atomic<std::uint64_t> next_seq{1};
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

/// Disables recording for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
    ~NoGradGuard() { detail::grad_mode = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class GradModeGuard {
public:
    explicit GradModeGuard(bool enabled) : previous_(detail::grad_mode) { detail::grad_mode = enabled; }
    ~GradModeGuard() { detail::grad_mode = previous_; }
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;

private:
    bool previous_;
};

inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                          BackwardFn backward, const char* op) {
    Tensor out = Tensor::from_data(std::move(shape), std::move(data));
    if (!grad_enabled()) return out;
    const bool tracked = std::any_of(inputs.begin(), inputs.end(),
                                     [](const Tensor& t) { return t.requires_grad(); });
    if (!tracked) return out;
    auto node = std::make_shared<GradNode>();
    node->seq = detail::next_seq.fetch_add(1, std::memory_order_relaxed);
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    out.impl_->requires_grad = true;
    out.impl_->node = std::move(node);
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b);

/// The recorded nodes reachable from a root, in replay (reverse creation)
/// order. Inputs of a node always have a smaller sequence number, so this
/// is a valid reverse topological order.
struct ComputationTape {
    std::vector<GradNode*> nodes;

    static ComputationTape collect(const Tensor& root) {
        ComputationTape tape;
        if (!root.node()) return tape;
        std::unordered_set<GradNode*> seen;
        std::vector<GradNode*> stack{root.node().get()};
        seen.insert(stack.back());
        while (!stack.empty()) {
            GradNode* n = stack.back();
            stack.pop_back();
            tape.nodes.push_back(n);
            for (const auto& in : n->inputs) {
                if (in.node() && seen.insert(in.node().get()).second) stack.push_back(in.node().get());
            }
        }
        std::sort(tape.nodes.begin(), tape.nodes.end(),
                  [](const GradNode* a, const GradNode* b) { return a->seq > b->seq; });
        return tape;
    }
};

namespace detail {

inline void accumulate(std::unordered_map<const void*, Tensor>& table, const void* key, const Tensor& g) {
    auto it = table.find(key);
    if (it == table.end()) {
        table.emplace(key, g);
    } else {
        it->second = add(it->second, g);
    }
}

/// Reverse sweep. Leaf gradients land in `leaf_grads` keyed by TensorImpl;
/// with `create_graph` the sweep itself is recorded so the result can be
/// differentiated again.
inline void run_backward(const Tensor& root, const Tensor& seed, bool create_graph,
                         std::unordered_map<const void*, Tensor>& leaf_grads,
                         std::unordered_map<const void*, Tensor>* node_grads_out = nullptr) {
    if (!root.requires_grad()) return;
    if (!root.node()) {
        accumulate(leaf_grads, root.id(), seed);
        return;
    }
    GradModeGuard mode(create_graph);
    const auto tape = ComputationTape::collect(root);
    std::unordered_map<const void*, Tensor> node_grads;
    node_grads.emplace(root.node().get(), seed);
    for (GradNode* n : tape.nodes) {
        auto it = node_grads.find(n);
        if (it == node_grads.end()) continue;
        Tensor g = it->second;
        if (node_grads_out == nullptr) node_grads.erase(it);
        auto input_grads = n->backward(g);
        for (std::size_t i = 0; i < n->inputs.size(); ++i) {
            const Tensor& in = n->inputs[i];
            if (i >= input_grads.size() || !input_grads[i].defined() || !in.requires_grad()) continue;
            if (input_grads[i].shape() != in.shape()) {
                throw DimensionError(std::string("backward of ") + n->op + " produced gradient " +
                                     shape_str(input_grads[i].shape()) + " for input " + shape_str(in.shape()));
            }
            if (in.node()) {
                accumulate(node_grads, in.node().get(), input_grads[i]);
            } else {
                accumulate(leaf_grads, in.id(), input_grads[i]);
            }
        }
    }
    if (node_grads_out != nullptr) *node_grads_out = std::move(node_grads);
}

}  // namespace detail

inline void Tensor::backward() const {
    if (numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    }
    if (!requires_grad()) {
        throw ContractError("backward() on a tensor that is not connected to any parameter");
    }
    std::unordered_map<const void*, Tensor> leaf_grads;
    std::vector<Tensor> leaves;
    detail::run_backward(*this, Tensor::full(shape(), 1.0), false, leaf_grads);
    // Leaves are only reachable through node inputs; walk the tape again to
    // recover the handles.
    if (is_leaf()) {
        leaves.push_back(*this);
    } else {
        std::unordered_set<const void*> seen;
        for (GradNode* n : ComputationTape::collect(*this).nodes) {
            for (const auto& in : n->inputs) {
                if (in.is_leaf() && in.requires_grad() && seen.insert(in.id()).second) leaves.push_back(in);
            }
        }
    }
    for (auto& leaf : leaves) {
        auto it = leaf_grads.find(leaf.id());
        if (it == leaf_grads.end()) continue;
        auto& dst = leaf.impl_->grad;
        const auto src = it->second.data();
        if (dst.empty()) {
            dst.assign(src.begin(), src.end());
        } else {
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
    }
}

/// Gradients of a scalar `output` with respect to `inputs` (leaves or
/// intermediates), returned instead of accumulated. With `create_graph` the
/// returned tensors carry history and can be differentiated again, which is
/// how the R1 penalty obtains parameter gradients of an input-gradient norm.
inline std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs, bool create_graph = false) {
    if (output.numel() != 1) {
        throw ContractError("grad() requires a scalar output, got shape " + shape_str(output.shape()));
    }
    std::unordered_map<const void*, Tensor> leaf_grads;
    std::unordered_map<const void*, Tensor> node_grads;
    detail::run_backward(output, Tensor::full(output.shape(), 1.0), create_graph, leaf_grads, &node_grads);
    std::vector<Tensor> out;
    out.reserve(inputs.size());
    for (const auto& in : inputs) {
        const auto& table = in.is_leaf() ? leaf_grads : node_grads;
        const void* key = in.is_leaf() ? static_cast<const void*>(in.id()) : static_cast<const void*>(in.node().get());
        auto it = table.find(key);
        out.push_back(it == table.end() ? Tensor::zeros(in.shape()) : it->second);
    }
    return out;
}

}  // namespace fixnoise

#include "fixnoise/ops.hpp"
