// Dense n-dimensional tensor with reverse-mode automatic differentiation.
//
// A Tensor<T> is a cheap value handle onto a shared buffer. Ops record a
// graph node holding their inputs and a backward rule; backward() replays
// the recorded nodes in exact reverse execution order and accumulates
// gradients into every requires_grad leaf. T is float for training and
// double for finite-difference verification.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "segrefine/errors.hpp"
#include "segrefine/rng.hpp"

namespace segrefine {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) {
        if (d < 0) throw ShapeError("negative dimension in shape");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Grad mode

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline bool& finite_check_flag() {
    // Process-wide: every op output is scanned for NaN/Inf unless disabled.
    static bool enabled = true;
    return enabled;
}
}  // namespace detail

struct GradMode {
    static bool enabled() { return detail::grad_mode_flag(); }
    static void set_enabled(bool v) { detail::grad_mode_flag() = v; }
};

/// RAII scope that disables graph recording (evaluation passes).
class NoGradGuard {
public:
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool finite_checks_enabled() { return detail::finite_check_flag(); }
inline void set_finite_checks(bool v) { detail::finite_check_flag() = v; }

// ---------------------------------------------------------------------------
// Storage and graph nodes

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
    const char* op_name;
    std::uint64_t seq;
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    // Reads out.grad, accumulates into the inputs' grads.
    std::function<void(const TensorImpl<T>& out)> backward;
    bool consumed = false;
};

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until populated
    bool requires_grad = false;
    std::shared_ptr<Node<T>> grad_fn;
};

namespace detail {
inline std::uint64_t next_node_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}

template <typename T>
void check_finite(const char* op, const std::vector<T>& v) {
    if (!finite_checks_enabled()) return;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            throw NumericalError(std::string("non-finite value produced by op '") + op +
                                 "' at flat index " + std::to_string(i));
        }
    }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor handle

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from_data(std::move(shape), {});
    }

    static Tensor full(Shape shape, T value) {
        auto n = shape_numel(shape);
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(static_cast<std::size_t>(n), value);
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

    static Tensor scalar(T value) { return full(Shape{}, value); }

    static Tensor from_data(Shape shape, std::vector<T> data) {
        auto n = shape_numel(shape);
        if (data.empty()) data.assign(static_cast<std::size_t>(n), T(0));
        if (static_cast<std::int64_t>(data.size()) != n) {
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(data);
        return t;
    }

    /// He-style fan-in normal init: N(0, stddev^2) from the given generator.
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        auto t = zeros(std::move(shape));
        for (auto& x : t.impl_->data) x = static_cast<T>(rng.normal() * stddev);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const { return checked().shape; }
    std::int64_t dim(std::size_t i) const { return checked().shape.at(i); }
    std::size_t rank() const { return checked().shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(checked().data.size()); }

    const std::vector<T>& data() const { return checked().data; }

    /// Mutable access to the buffer. Reserved for leaves (parameter updates,
    /// test setup); ops never mutate their inputs.
    std::vector<T>& mutable_data() { return checked().data; }

    T item() const {
        if (numel() != 1) {
            throw ShapeError("item() requires a one-element tensor, got shape " +
                             shape_str(shape()));
        }
        return checked().data[0];
    }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }

    Tensor& set_requires_grad(bool v) {
        if (v && checked().grad_fn) {
            throw AutogradError("requires_grad can only be toggled on leaf tensors");
        }
        checked().requires_grad = v;
        return *this;
    }

    bool is_leaf() const { return !checked().grad_fn; }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }

    const std::vector<T>& grad() const {
        if (!has_grad()) throw AutogradError("tensor has no populated gradient");
        return impl_->grad;
    }

    void zero_grad() {
        if (impl_) {
            impl_->grad.clear();
            impl_->grad.shrink_to_fit();
        }
    }

    std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

private:
    TensorImpl<T>& checked() {
        if (!impl_) throw ShapeError("use of undefined tensor");
        return *impl_;
    }
    const TensorImpl<T>& checked() const {
        if (!impl_) throw ShapeError("use of undefined tensor");
        return *impl_;
    }

    std::shared_ptr<TensorImpl<T>> impl_;
};

// ---------------------------------------------------------------------------
// Op plumbing

namespace detail {

template <typename T>
std::vector<T>& ensure_grad(TensorImpl<T>& impl) {
    if (impl.grad.empty()) impl.grad.assign(impl.data.size(), T(0));
    return impl.grad;
}

/// Attaches a graph node to `out` when recording is on and any input needs a
/// gradient. The backward rule must accumulate (+=) into input grads.
template <typename T>
void attach_node(const char* op_name, Tensor<T>& out,
                 std::vector<Tensor<T>> inputs,
                 std::function<void(const TensorImpl<T>&)> backward) {
    check_finite(op_name, out.impl()->data);
    if (!GradMode::enabled()) return;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return;
    auto node = std::make_shared<Node<T>>();
    node->op_name = op_name;
    node->seq = next_node_seq();
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    out.impl()->grad_fn = std::move(node);
    out.impl()->requires_grad = true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward engine

/// Populates grads of every requires_grad leaf reachable from `loss`.
/// Traverses recorded nodes in exact reverse execution order. The graph is
/// released afterwards; calling backward on the same graph again is an error.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw AutogradError("backward requires a scalar loss, got shape " +
                            shape_str(loss.shape()));
    }
    auto root = loss.impl();
    if (!root->grad_fn) {
        if (!root->requires_grad) {
            throw AutogradError("loss does not require grad and has no graph");
        }
        // A lone leaf: d loss / d loss = 1.
        detail::ensure_grad(*root).assign(1, T(1));
        return;
    }
    if (root->grad_fn->consumed) {
        throw AutogradError("backward called twice on the same graph; rebuild the "
                            "graph with a fresh forward pass first");
    }

    // Collect (node, producing impl) pairs reachable from the loss.
    struct Entry {
        Node<T>* node;
        std::shared_ptr<TensorImpl<T>> out;
    };
    std::vector<Entry> entries;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::shared_ptr<TensorImpl<T>>> stack{root};
    while (!stack.empty()) {
        auto impl = stack.back();
        stack.pop_back();
        auto& fn = impl->grad_fn;
        if (!fn || seen.count(fn.get())) continue;
        if (fn->consumed) {
            throw AutogradError(std::string("graph segment produced by op '") + fn->op_name +
                                "' was already freed by a previous backward");
        }
        seen.insert(fn.get());
        entries.push_back({fn.get(), impl});
        for (auto& in : fn->inputs) stack.push_back(in);
    }
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return a.node->seq > b.node->seq; });

    detail::ensure_grad(*root).assign(1, T(1));
    for (auto& e : entries) {
        if (e.out->grad.empty()) {
            // Reachable from the loss only through grad-free paths; nothing
            // flows through this node.
            continue;
        }
        e.node->backward(*e.out);
    }

    // Release activations and closures; keep nodes so reuse is detectable.
    for (auto& e : entries) {
        e.node->consumed = true;
        e.node->backward = nullptr;
        e.node->inputs.clear();
        if (e.out->grad_fn) e.out->grad.clear();  // intermediate grads are discarded
    }
    root->grad_fn->consumed = true;
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {
template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}
}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("add", a, b);
    auto out = Tensor<T>::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.mutable_data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];

    auto ai = a.impl();
    auto bi = b.impl();
    detail::attach_node<T>("add", out, {a, b}, [ai, bi](const TensorImpl<T>& o) {
        if (ai->requires_grad || ai->grad_fn) {
            auto& g = detail::ensure_grad(*ai);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (bi->requires_grad || bi->grad_fn) {
            auto& g = detail::ensure_grad(*bi);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
    });
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("mul", a, b);
    auto out = Tensor<T>::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.mutable_data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];

    auto ai = a.impl();
    auto bi = b.impl();
    detail::attach_node<T>("mul", out, {a, b}, [ai, bi](const TensorImpl<T>& o) {
        if (ai->requires_grad || ai->grad_fn) {
            auto& g = detail::ensure_grad(*ai);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bi->data[i];
        }
        if (bi->requires_grad || bi->grad_fn) {
            auto& g = detail::ensure_grad(*bi);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ai->data[i];
        }
    });
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    auto out = Tensor<T>::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.mutable_data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * factor;

    auto ai = a.impl();
    detail::attach_node<T>("scale", out, {a}, [ai, factor](const TensorImpl<T>& o) {
        auto& g = detail::ensure_grad(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
    });
    return out;
}

/// Sum of all elements; returns a scalar tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = 0;
    for (T x : a.data()) acc += x;
    auto out = Tensor<T>::scalar(acc);

    auto ai = a.impl();
    detail::attach_node<T>("sum", out, {a}, [ai](const TensorImpl<T>& o) {
        auto& g = detail::ensure_grad(*ai);
        const T go = o.grad[0];
        for (auto& x : g) x += go;
    });
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    auto out = Tensor<T>::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.mutable_data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);

    auto ai = a.impl();
    detail::attach_node<T>("relu", out, {a}, [ai](const TensorImpl<T>& o) {
        auto& g = detail::ensure_grad(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (ai->data[i] > T(0)) g[i] += o.grad[i];
        }
    });
    return out;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace segrefine
