#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace acdm {

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

/// One value in the reverse-mode autodiff graph. Row-major data; a node
/// without an op record (no backward_fn) is a leaf. grad is allocated lazily
/// on first accumulation.
template <class Real>
struct TensorNode {
    std::vector<int> shape;
    std::vector<Real> data;
    std::vector<Real> grad;
    bool requires_grad = false;
    std::string name;

    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    int64_t numel() const { return shape_numel(shape); }
    bool is_leaf() const { return !backward_fn; }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), Real(0));
    }

    Real item() const {
        if (data.size() != 1) throw std::invalid_argument("item(): tensor is not scalar, shape " + shape_str(shape));
        return data[0];
    }
};

template <class Real>
using TensorPtr = std::shared_ptr<TensorNode<Real>>;

template <class Real>
TensorPtr<Real> tensor(std::vector<int> shape, Real fill = Real(0)) {
    auto t = std::make_shared<TensorNode<Real>>();
    t->shape = std::move(shape);
    t->data.assign(static_cast<size_t>(shape_numel(t->shape)), fill);
    return t;
}

template <class Real>
TensorPtr<Real> tensor_from(std::vector<int> shape, std::vector<Real> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw std::invalid_argument("tensor_from: shape " + shape_str(shape) + " does not match data length");
    auto t = std::make_shared<TensorNode<Real>>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    return t;
}

template <class Real>
TensorPtr<Real> leaf(std::vector<int> shape, std::string name, Real fill = Real(0)) {
    auto t = tensor<Real>(std::move(shape), fill);
    t->requires_grad = true;
    t->name = std::move(name);
    return t;
}

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// RAII guard disabling graph recording on the current thread (inference).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class Real>
bool track_grad(std::initializer_list<const TensorPtr<Real>*> inputs) {
    if (!grad_enabled()) return false;
    for (const auto* in : inputs)
        if (*in && (*in)->requires_grad) return true;
    return false;
}

/// Result node wired to its inputs; backward_fn left for the op to fill.
template <class Real>
TensorPtr<Real> op_result(std::vector<int> shape, std::initializer_list<TensorPtr<Real>> parents) {
    auto out = tensor<Real>(std::move(shape));
    bool track = grad_enabled();
    bool any = false;
    for (const auto& p : parents) any = any || (p && p->requires_grad);
    if (track && any) {
        out->requires_grad = true;
        out->parents.assign(parents.begin(), parents.end());
    }
    return out;
}

/// Reverse sweep from a scalar root. Builds the topological order once and
/// invokes each node's backward rule exactly once; fan-out accumulates by
/// summation into parent grads.
template <class Real>
void backward(const TensorPtr<Real>& root) {
    if (root->numel() != 1)
        throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(root->shape));
    if (!root->requires_grad) return;

    std::vector<TensorNode<Real>*> order;
    std::unordered_set<TensorNode<Real>*> seen;
    // Iterative post-order DFS; graphs from long unrolled rollouts can be deep.
    std::vector<std::pair<TensorNode<Real>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode<Real>* p = node->parents[idx++].get();
            if (p && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<Real>* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
    }
}

template <class Real>
void zero_grad(const std::vector<TensorPtr<Real>>& params) {
    for (const auto& p : params) {
        if (!p->grad.empty()) std::fill(p->grad.begin(), p->grad.end(), Real(0));
    }
}

}  // namespace acdm
