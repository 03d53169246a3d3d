#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace hsib {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) throw Error("tensor dimension must be positive");
        n *= d;
    }
    return n;
}

namespace detail {
inline thread_local int nograd_depth = 0;
}

inline bool grad_enabled() { return detail::nograd_depth == 0; }

// Disables graph recording in the current thread while alive.
struct NoGradGuard {
    NoGradGuard() { ++detail::nograd_depth; }
    ~NoGradGuard() { --detail::nograd_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
struct Tens;

template <class T>
using TensPtr = std::shared_ptr<Tens<T>>;

// Dense tensor node. Ops link nodes into a DAG via `parents` and attach a
// `backfn` that pulls this node's grad into its parents' grads.
template <class T>
struct Tens : std::enable_shared_from_this<Tens<T>> {
    std::vector<int64_t> shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // sized lazily; same length as data once touched

    std::vector<TensPtr<T>> parents;
    std::function<void()> backfn;
    const char* op = "leaf";
    bool consumed = false;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }

    T item() const {
        if (data.size() != 1) throw Error("item(): tensor is not a scalar");
        return data[0];
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
    bool has_grad() const { return grad.size() == data.size(); }
};

template <class T>
TensPtr<T> tensor(std::vector<int64_t> shape, T fill = T(0), bool requires_grad = false) {
    auto t = std::make_shared<Tens<T>>();
    int64_t n = shape_numel(shape);
    t->shape = std::move(shape);
    t->data.assign(static_cast<size_t>(n), fill);
    t->requires_grad = requires_grad;
    return t;
}

template <class T>
TensPtr<T> tensor(std::vector<int64_t> shape, std::vector<T> data, bool requires_grad = false) {
    int64_t n = shape_numel(shape);
    if (n != static_cast<int64_t>(data.size()))
        throw Error("tensor: data length " + std::to_string(data.size()) +
                    " does not match shape product " + std::to_string(n));
    auto t = std::make_shared<Tens<T>>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    return t;
}

template <class T>
void check_finite(const Tens<T>& t, const char* where) {
    for (const T& v : t.data) {
        if (!std::isfinite(static_cast<double>(v)))
            throw Error(std::string("non-finite value produced by ") + where);
    }
}

template <class T>
inline bool same_shape(const Tens<T>& a, const Tens<T>& b) {
    return a.shape == b.shape;
}

// Topological ordering of the graph reachable from a root (parents first).
template <class T>
struct Tape {
    std::vector<Tens<T>*> order;

    static Tape trace(const TensPtr<T>& root) {
        Tape tape;
        std::unordered_set<Tens<T>*> seen;
        // iterative post-order DFS
        std::vector<std::pair<Tens<T>*, size_t>> stack;
        stack.emplace_back(root.get(), 0);
        seen.insert(root.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Tens<T>* p = node->parents[idx++].get();
                if (p && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                tape.order.push_back(node);
                stack.pop_back();
            }
        }
        return tape;
    }
};

// Reverse-mode sweep from a scalar root. Gradients accumulate: repeated
// backward calls (over fresh graphs) add into existing grad buffers.
// The traversed graph is released afterwards; a second call on the same
// root is an error.
template <class T>
void backward(const TensPtr<T>& loss) {
    if (!loss) throw Error("backward: null root");
    if (loss->numel() != 1) throw Error("backward: root must be a scalar");
    if (loss->consumed) throw Error("backward: tape already consumed for this root");
    auto tape = Tape<T>::trace(loss);
    loss->ensure_grad();
    loss->grad[0] += T(1);
    for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
        if ((*it)->backfn) (*it)->backfn();
    }
    for (Tens<T>* n : tape.order) {
        if (n->backfn) {
            n->backfn = nullptr;
            n->parents.clear();
            n->consumed = true;
        }
    }
    loss->consumed = true;
}

// Leaf copy that blocks gradient flow.
template <class T>
TensPtr<T> detach(const TensPtr<T>& x) {
    auto out = std::make_shared<Tens<T>>();
    out->shape = x->shape;
    out->data = x->data;
    out->op = "detach";
    return out;
}

}  // namespace hsib
