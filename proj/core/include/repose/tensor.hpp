#pragma once

// Reverse-mode autodiff engine.
//
// Graph model: every op produces a refcounted Node holding the value, an
// optional gradient buffer, the parent links, and a backward closure. A
// thread-local TapeScope records nodes in creation order while it is alive;
// since an op can only consume already-existing nodes, reverse creation
// order is a valid reverse topological order, and backward() simply walks
// the tape backwards. Nodes that are not ancestors of the loss are marked
// and skipped, so umbrella graphs (e.g. branches whose outputs feed nothing)
// cost no backward compute.
//
// Gradient mode: ops attach backward closures only when (a) a tape is
// active, (b) grad mode is on (no NoGradGuard in scope), and (c) at least
// one parent requires grad. Otherwise the result is a plain value and the
// inputs are released immediately. Leaf tensors created as parameters keep
// requires_grad across tapes; frozen parameters (requires_grad=false) are
// treated as constants and their weight-gradient work is skipped entirely.
//
// Numeric safety: every op output is scanned for NaN/Inf and throws
// NumericError instead of propagating garbage.

#include "repose/common.hpp"

#include <cstring>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace repose {

template <class T> struct Node;
template <class T> using NodePtr = std::shared_ptr<Node<T>>;
template <class T> class TapeScope;

namespace detail {
template <class T>
struct GradState {
    static inline thread_local TapeScope<T>* active_tape = nullptr;
    static inline thread_local int no_grad_depth = 0;
    static inline thread_local uint64_t tape_counter = 0;
};
}  // namespace detail

template <class T>
bool grad_enabled() {
    return detail::GradState<T>::no_grad_depth == 0;
}

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated lazily by grad_buf()
    bool requires_grad = false;
    bool needed = false;  // scratch mark owned by TapeScope::backward
    const char* op = "leaf";
    std::vector<NodePtr<T>> parents;
    std::function<void(Node<T>&)> backward_fn;
    uint64_t tape_id = 0;  // 0 = not recorded

    std::vector<T>& grad_buf() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <class T>
inline void finite_guard(const std::vector<T>& v, const char* op) {
    constexpr T lim = std::numeric_limits<T>::max();
    bool ok = true;
    const T* p = v.data();
    const int64_t n = int64_t(v.size());
    for (int64_t i = 0; i < n; ++i) {
        const T a = p[i] < T(0) ? -p[i] : p[i];
        ok &= (a <= lim);
    }
    if (!ok) throw NumericError(std::string("non-finite values produced by op '") + op + "'");
}

template <class T>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(NodePtr<T> n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape) {
        auto n = std::make_shared<Node<T>>();
        n->value.assign(size_t(repose::numel(shape)), T(0));
        n->shape = std::move(shape);
        return Tensor(std::move(n));
    }

    static Tensor full(Shape shape, T v) {
        auto t = zeros(std::move(shape));
        for (auto& x : t.n_->value) x = v;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> data) {
        require_t<ShapeError>(int64_t(data.size()) == repose::numel(shape),
                              "from_data: " + shape_str(shape) + " does not match data size " +
                                  std::to_string(data.size()));
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        return Tensor(std::move(n));
    }

    // Trainable leaf.
    static Tensor param(Shape shape, std::vector<T> data) {
        Tensor t = from_data(std::move(shape), std::move(data));
        t.n_->requires_grad = true;
        return t;
    }

    bool defined() const { return bool(n_); }
    const NodePtr<T>& node() const { return n_; }
    const Shape& shape() const { return n_->shape; }
    int64_t dim(size_t i) const { return n_->shape.at(i); }
    int64_t numel() const { return repose::numel(n_->shape); }

    const std::vector<T>& value() const { return n_->value; }
    // In-place mutation is for leaves only (parameter init, optimizer steps,
    // data staging); mutating an op output would desynchronize the tape.
    std::vector<T>& value_mut() {
        require_t<StateError>(!n_->backward_fn, "value_mut on a non-leaf tensor");
        return n_->value;
    }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool v) {
        require_t<StateError>(!n_->backward_fn, "set_requires_grad on a non-leaf tensor");
        n_->requires_grad = v;
    }

    bool has_grad() const { return !n_->grad.empty(); }
    const std::vector<T>& grad() const {
        require_t<StateError>(!n_->grad.empty(), "tensor has no gradient (backward not run "
                                                 "or node not an ancestor of the loss)");
        return n_->grad;
    }
    void zero_grad() { n_->grad.clear(); }

    T item() const {
        require_t<ShapeError>(numel() == 1, "item() needs a scalar, got " + shape_str(shape()));
        return n_->value[0];
    }

  private:
    NodePtr<T> n_;
};

template <class T>
class TapeScope {
  public:
    TapeScope() {
        require_t<StateError>(detail::GradState<T>::active_tape == nullptr,
                              "tape scopes do not nest");
        detail::GradState<T>::active_tape = this;
        id_ = ++detail::GradState<T>::tape_counter;  // ids never reused
    }
    ~TapeScope() { detail::GradState<T>::active_tape = nullptr; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

    static TapeScope* active() { return detail::GradState<T>::active_tape; }

    void record(NodePtr<T> n) { nodes_.push_back(std::move(n)); }
    size_t recorded() const { return nodes_.size(); }

    // Accumulates d(loss)/d(leaf) into the grad buffers of every reachable
    // tensor that requires grad. A second call on the same scope is an
    // error: the tape is consumed (start a new scope to differentiate again).
    void backward(const Tensor<T>& loss) {
        require_t<StateError>(!consumed_, "backward already ran on this tape");
        consumed_ = true;
        const NodePtr<T>& ln = loss.node();
        require_t<StateError>(ln != nullptr, "backward on an undefined tensor");
        require_t<StateError>(ln->tape_id == id_, "loss is not recorded on this tape");
        require_t<ShapeError>(numel(ln->shape) == 1, "backward needs a scalar loss");

        // Mark ancestors of the loss; everything else on the tape is skipped.
        std::vector<Node<T>*> stack{ln.get()};
        ln->needed = true;
        while (!stack.empty()) {
            Node<T>* n = stack.back();
            stack.pop_back();
            for (const auto& p : n->parents)
                if (p->requires_grad && !p->needed) {
                    p->needed = true;
                    stack.push_back(p.get());
                }
        }
        ln->grad_buf()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node<T>& n = **it;
            if (n.needed && n.backward_fn) n.backward_fn(n);
        }
    }

    uint64_t id() const { return id_; }

  private:
    std::vector<NodePtr<T>> nodes_;
    uint64_t id_ = 0;
    bool consumed_ = false;
};

// RAII inference mode: ops built under this guard do not record, do not
// retain parents, and produce requires_grad=false results.
template <class T>
struct NoGradGuard {
    NoGradGuard() { ++detail::GradState<T>::no_grad_depth; }
    ~NoGradGuard() { --detail::GradState<T>::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

// Op construction helper. `value` must already be fully computed; `make_bwd`
// is only invoked when the node actually records (so closures and their
// captures are never built in inference mode).
template <class T, class BwdFactory>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> value,
                  std::vector<NodePtr<T>> parents, BwdFactory&& make_bwd) {
    finite_guard(value, op);
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    TapeScope<T>* tape = TapeScope<T>::active();
    bool track = grad_enabled<T>() && tape != nullptr;
    if (track) {
        bool any = false;
        for (const auto& p : parents) any = any || p->requires_grad;
        track = any;
    }
    if (track) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = make_bwd();
        n->tape_id = tape->id();
        tape->record(n);
    }
    return Tensor<T>(std::move(n));
}

}  // namespace detail

}  // namespace repose
