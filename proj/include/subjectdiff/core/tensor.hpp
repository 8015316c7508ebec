#pragma once

#include <cassert>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace sdg {

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); i++) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
}

// Reverse-mode autograd tensor. Values and grads are dense row-major
// buffers; the graph is a DAG of shared_ptr nodes, torn down after
// backward() to release activation memory.
template <typename T>
class Tensor {
public:
    struct Impl {
        std::vector<int> shape;
        std::vector<T> v;
        std::vector<T> g;  // allocated lazily on first accumulation
        bool needs_grad = false;
        std::vector<Tensor> parents;
        std::function<void(Impl&)> backprop;

        int64_t numel() const { return shape_numel(shape); }
        void ensure_grad() {
            if (g.empty()) g.assign(v.size(), T(0));
        }
    };

    Tensor() = default;

    static Tensor leaf(std::vector<int> shape, bool needs_grad = false) {
        Tensor t;
        t.p_ = std::make_shared<Impl>();
        t.p_->shape = std::move(shape);
        t.p_->v.assign(static_cast<size_t>(t.p_->numel()), T(0));
        t.p_->needs_grad = needs_grad;
        return t;
    }

    static Tensor from_vector(std::vector<int> shape, std::vector<T> values, bool needs_grad = false) {
        Tensor t = leaf(std::move(shape), needs_grad);
        if (static_cast<int64_t>(values.size()) != t.numel())
            throw std::invalid_argument("from_vector: size mismatch");
        t.p_->v = std::move(values);
        return t;
    }

    // Result node of an op. Caller fills v and sets backprop if needed.
    static Tensor result(std::vector<int> shape, std::vector<Tensor> parents) {
        Tensor t = leaf(std::move(shape), false);
        for (const auto& p : parents)
            if (p.defined() && p.needs_grad()) t.p_->needs_grad = true;
        if (t.p_->needs_grad) t.p_->parents = std::move(parents);
        return t;
    }

    bool defined() const { return p_ != nullptr; }
    const std::vector<int>& shape() const { return p_->shape; }
    int size(int d) const { return p_->shape[static_cast<size_t>(d)]; }
    int ndim() const { return static_cast<int>(p_->shape.size()); }
    int64_t numel() const { return p_->numel(); }
    bool needs_grad() const { return p_ && p_->needs_grad; }

    T* data() { return p_->v.data(); }
    const T* data() const { return p_->v.data(); }
    std::vector<T>& values() { return p_->v; }
    const std::vector<T>& values() const { return p_->v; }
    T* grad() {
        p_->ensure_grad();
        return p_->g.data();
    }
    const std::vector<T>& grad_vec() const { return p_->g; }
    bool has_grad() const { return !p_->g.empty(); }
    void zero_grad() {
        if (!p_->g.empty()) std::fill(p_->g.begin(), p_->g.end(), T(0));
    }

    Impl* impl() const { return p_.get(); }
    void set_backprop(std::function<void(Impl&)> fn) { p_->backprop = std::move(fn); }

    // Accumulate into this node's grad (used inside backprop closures).
    void accum_grad(const T* src, int64_t n) {
        if (!p_->needs_grad) return;
        p_->ensure_grad();
        T* g = p_->g.data();
        for (int64_t i = 0; i < n; i++) g[i] += src[i];
    }

    // Runs reverse-mode accumulation from this scalar node, then frees the
    // graph. Leaf grads survive.
    void backward() {
        if (numel() != 1) throw std::logic_error("backward() requires a scalar");
        std::vector<Impl*> order;
        topo(order);
        p_->ensure_grad();
        p_->g[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Impl* n = *it;
            if (n->backprop && !n->g.empty()) n->backprop(*n);
        }
        for (Impl* n : order) {
            n->backprop = nullptr;
            n->parents.clear();
        }
    }

    Tensor detached() const {
        Tensor t;
        t.p_ = std::make_shared<Impl>();
        t.p_->shape = p_->shape;
        t.p_->v = p_->v;
        return t;
    }

private:
    void topo(std::vector<Impl*>& order) {
        std::unordered_set<Impl*> seen;
        // Iterative post-order DFS; graphs can be deep at large step counts.
        std::vector<std::pair<Impl*, size_t>> stack;
        stack.emplace_back(p_.get(), 0);
        seen.insert(p_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Impl* child = node->parents[next].p_.get();
                next++;
                if (child && child->needs_grad && !seen.count(child)) {
                    seen.insert(child);
                    stack.emplace_back(child, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Impl> p_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace sdg
