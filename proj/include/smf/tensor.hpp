#pragma once

// Dense reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a node holding values, a same-shaped
// gradient buffer and, when it depends on a parameter, the link to its
// parents plus the closure that propagates gradients to them. The graph
// recorded by one forward pass is consumed by the first backward pass over
// it; re-running the forward pass re-records it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace smf {

struct dimension_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct contract_error : std::logic_error {
    using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

template <class T>
class Tensor;

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

/// While alive, operations on this thread record nothing for backward.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

namespace detail {

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool leaf = true;
    bool consumed = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> propagate;
};

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

template <class T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() : Tensor(Shape{}, std::vector<T>{T(0)}) {}

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        if (shape_size(shape) != values.size())
            throw dimension_error("tensor: " + std::to_string(values.size()) + " values for shape " +
                                  shape_str(shape));
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->grad.assign(node_->value.size(), T(0));
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape) {
        auto n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)));
    }
    static Tensor full(Shape shape, T v) {
        auto n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v));
    }
    static Tensor scalar(T v) { return Tensor(Shape{}, {v}); }
    static Tensor parameter(Shape shape, std::vector<T> values) {
        return Tensor(std::move(shape), std::move(values), true);
    }
    /// Rows x cols matrix from values of any arithmetic type.
    template <class U>
    static Tensor matrix(std::size_t rows, std::size_t cols, std::span<const U> values) {
        std::vector<T> v(values.begin(), values.end());
        return Tensor(Shape{rows, cols}, std::move(v));
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

    std::span<T> values() { return node_->value; }
    std::span<const T> values() const { return node_->value; }
    std::span<T> grad() { return node_->grad; }
    std::span<const T> grad() const { return node_->grad; }

    T item() const {
        if (size() != 1) throw contract_error("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }
    T operator()(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->leaf; }
    bool on_tape() const { return static_cast<bool>(node_->propagate); }

    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

    /// Freezes or unfreezes a leaf (parameters of frozen models never record).
    void set_requires_grad(bool on) {
        if (!node_->leaf) throw contract_error("set_requires_grad on a non-leaf tensor");
        node_->requires_grad = on;
    }

    /// Deep copy into a new leaf of scalar type U, keeping requires_grad.
    template <class U>
    Tensor<U> cast() const {
        std::vector<U> v(node_->value.begin(), node_->value.end());
        return Tensor<U>(shape(), std::move(v), requires_grad() && is_leaf());
    }

    /// Same-type deep copy with independent storage.
    Tensor clone() const { return cast<T>(); }

    const NodePtr& node() const { return node_; }

    /// Output of an operation. Parents are linked only when one of them
    /// carries gradient, so constant subgraphs never reach the tape.
    static Tensor make_result(Shape shape, std::vector<T> values, std::vector<NodePtr> parents,
                              std::function<void(detail::Node<T>&)> propagate) {
        Tensor out(std::move(shape), std::move(values));
        bool needs = detail::grad_mode() && std::any_of(parents.begin(), parents.end(),
                                                        [](const NodePtr& p) { return p->requires_grad; });
        if (needs) {
            out.node_->requires_grad = true;
            out.node_->leaf = false;
            out.node_->parents = std::move(parents);
            out.node_->propagate = std::move(propagate);
        }
        return out;
    }

private:
    NodePtr node_;
};

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw dimension_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
}

// Elementwise unary op with derivative expressed through input x and output y.
template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& x, F f, D dfdx) {
    std::vector<T> out(x.size());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
    auto xn = x.node();
    return Tensor<T>::make_result(x.shape(), std::move(out), {xn}, [xn, dfdx](Node<T>& self) {
        if (!xn->requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] += self.grad[i] * dfdx(xn->value[i], self.value[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    auto an = a.node(), bn = b.node();
    return Tensor<T>::make_result(a.shape(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& self) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
    });
}

template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    auto an = a.node(), bn = b.node();
    return Tensor<T>::make_result(a.shape(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& self) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    });
}

template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    auto an = a.node(), bn = b.node();
    return Tensor<T>::make_result(a.shape(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& self) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
    });
}

template <class T>
Tensor<T> operator*(const Tensor<T>& x, double c) {
    const T k = static_cast<T>(c);
    return detail::unary(x, [k](T v) { return k * v; }, [k](T, T) { return k; });
}

template <class T>
Tensor<T> operator*(double c, const Tensor<T>& x) {
    return x * c;
}

template <class T>
Tensor<T> operator-(const Tensor<T>& x) {
    return x * -1.0;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, double c) {
    const T k = static_cast<T>(c);
    return detail::unary(x, [k](T v) { return v + k; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

/// x * sigmoid(x)
template <class T>
Tensor<T> silu(const Tensor<T>& x) {
    return detail::unary(
        x, [](T v) { return v / (T(1) + std::exp(-v)); },
        [](T v, T) {
            const T s = T(1) / (T(1) + std::exp(-v));
            return s * (T(1) + v * (T(1) - s));
        });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

/// Multiplies row i by factors[i]. The factors are constants.
template <class T>
Tensor<T> scale_rows(const Tensor<T>& x, std::span<const T> factors) {
    if (factors.size() != x.rows())
        throw dimension_error("scale_rows: " + std::to_string(factors.size()) + " factors for " +
                              std::to_string(x.rows()) + " rows");
    const std::size_t n = x.rows(), m = x.cols();
    std::vector<T> f(factors.begin(), factors.end());
    std::vector<T> out(x.size());
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) out[r * m + c] = x.values()[r * m + c] * f[r];
    auto xn = x.node();
    return Tensor<T>::make_result(x.shape(), std::move(out), {xn}, [xn, f = std::move(f), m](detail::Node<T>& self) {
        if (!xn->requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * f[i / m];
    });
}

/// Multiplies row i of x by the single entry gain(i, 0); both operands are differentiable.
template <class T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& gain) {
    if (gain.rows() != x.rows() || gain.cols() != 1)
        throw dimension_error("scale_rows: gain shape " + shape_str(gain.shape()) + " for " + shape_str(x.shape()));
    const std::size_t m = x.cols();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * gain.values()[i / m];
    auto xn = x.node();
    auto gn = gain.node();
    return Tensor<T>::make_result(x.shape(), std::move(out), {xn, gn}, [xn, gn, m](detail::Node<T>& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (xn->requires_grad) xn->grad[i] += self.grad[i] * gn->value[i / m];
            if (gn->requires_grad) gn->grad[i / m] += self.grad[i] * xn->value[i];
        }
    });
}

/// Forward identity; blocks all gradient flow.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
    auto v = std::vector<T>(x.values().begin(), x.values().end());
    return Tensor<T>(x.shape(), std::move(v));
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = T(0);
    for (T v : x.values()) s += v;
    auto xn = x.node();
    return Tensor<T>::make_result(Shape{}, {s}, {xn}, [xn](detail::Node<T>& self) {
        if (!xn->requires_grad) return;
        for (auto& g : xn->grad) g += self.grad[0];
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    return sum(x) * (1.0 / static_cast<double>(x.size()));
}

/// Sum over each row: [n, m] -> [n, 1].
template <class T>
Tensor<T> row_sum(const Tensor<T>& x) {
    const std::size_t n = x.rows(), m = x.cols();
    std::vector<T> out(n, T(0));
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) out[r] += x.values()[r * m + c];
    auto xn = x.node();
    return Tensor<T>::make_result(Shape{n, 1}, std::move(out), {xn}, [xn, m](detail::Node<T>& self) {
        if (!xn->requires_grad) return;
        for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self.grad[i / m];
    });
}

/// Mean over the batch of the per-row squared Euclidean norm of (a - b).
template <class T>
Tensor<T> mean_sq_norm(const Tensor<T>& a, const Tensor<T>& b) {
    return sum(square(a - b)) * (1.0 / static_cast<double>(a.rows()));
}

/// Mean over all elements of (a - b)^2.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    return mean(square(a - b));
}

// ---------------------------------------------------------------- linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    if (b.rows() != k)
        throw dimension_error("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<T> out(n * m);
    detail::MatMap<T>(out.data(), n, m).noalias() =
        detail::ConstMatMap<T>(a.values().data(), n, k) * detail::ConstMatMap<T>(b.values().data(), k, m);
    auto an = a.node(), bn = b.node();
    return Tensor<T>::make_result(Shape{n, m}, std::move(out), {an, bn}, [an, bn, n, k, m](detail::Node<T>& self) {
        detail::ConstMatMap<T> dy(self.grad.data(), n, m);
        if (an->requires_grad)
            detail::MatMap<T>(an->grad.data(), n, k).noalias() +=
                dy * detail::ConstMatMap<T>(bn->value.data(), k, m).transpose();
        if (bn->requires_grad)
            detail::MatMap<T>(bn->grad.data(), k, m).noalias() +=
                detail::ConstMatMap<T>(an->value.data(), n, k).transpose() * dy;
    });
}

/// x [n, in] * w [in, out] + b [out]
template <class T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    const std::size_t n = x.rows(), k = x.cols(), m = w.cols();
    if (w.rows() != k || b.size() != m)
        throw dimension_error("affine: input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()) +
                              ", bias " + shape_str(b.shape()));
    std::vector<T> out(n * m);
    detail::MatMap<T> y(out.data(), n, m);
    y.noalias() = detail::ConstMatMap<T>(x.values().data(), n, k) * detail::ConstMatMap<T>(w.values().data(), k, m);
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.values().data(), m);
    auto xn = x.node(), wn = w.node(), bn = b.node();
    return Tensor<T>::make_result(Shape{n, m}, std::move(out), {xn, wn, bn},
                                  [xn, wn, bn, n, k, m](detail::Node<T>& self) {
                                      detail::ConstMatMap<T> dy(self.grad.data(), n, m);
                                      if (xn->requires_grad)
                                          detail::MatMap<T>(xn->grad.data(), n, k).noalias() +=
                                              dy * detail::ConstMatMap<T>(wn->value.data(), k, m).transpose();
                                      if (wn->requires_grad)
                                          detail::MatMap<T>(wn->grad.data(), k, m).noalias() +=
                                              detail::ConstMatMap<T>(xn->value.data(), n, k).transpose() * dy;
                                      if (bn->requires_grad)
                                          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bn->grad.data(), m) +=
                                              dy.colwise().sum();
                                  });
}

// ---------------------------------------------------------------- layout

/// Column-wise concatenation of matrices with equal row counts.
template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw dimension_error("concat_cols: no inputs");
    const std::size_t n = parts.front().rows();
    std::vector<std::size_t> offsets;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rows() != n)
            throw dimension_error("concat_cols: row mismatch " + std::to_string(p.rows()) + " vs " +
                                  std::to_string(n));
        offsets.push_back(total);
        total += p.cols();
    }
    std::vector<T> out(n * total);
    std::vector<std::shared_ptr<detail::Node<T>>> nodes;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const std::size_t m = parts[i].cols();
        for (std::size_t r = 0; r < n; ++r)
            std::copy_n(parts[i].values().data() + r * m, m, out.data() + r * total + offsets[i]);
        nodes.push_back(parts[i].node());
    }
    auto parents = nodes;
    return Tensor<T>::make_result(
        Shape{n, total}, std::move(out), std::move(parents),
        [nodes = std::move(nodes), offsets = std::move(offsets), n, total](detail::Node<T>& self) {
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                auto& p = *nodes[i];
                if (!p.requires_grad) continue;
                const std::size_t m = p.value.size() / n;
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < m; ++c) p.grad[r * m + c] += self.grad[r * total + offsets[i] + c];
            }
        });
}

/// Columns [begin, end) of a matrix.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    const std::size_t n = x.rows(), m = x.cols();
    if (begin > end || end > m)
        throw dimension_error("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                              std::to_string(m) + " columns");
    const std::size_t w = end - begin;
    std::vector<T> out(n * w);
    for (std::size_t r = 0; r < n; ++r)
        std::copy_n(x.values().data() + r * m + begin, w, out.data() + r * w);
    auto xn = x.node();
    return Tensor<T>::make_result(Shape{n, w}, std::move(out), {xn}, [xn, n, m, w, begin](detail::Node<T>& self) {
        if (!xn->requires_grad) return;
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < w; ++c) xn->grad[r * m + begin + c] += self.grad[r * w + c];
    });
}

// ---------------------------------------------------------------- backward

/// One seed of a reverse sweep: the tensor and d(objective)/d(tensor).
template <class T>
struct GradSeed {
    Tensor<T> tensor;
    std::vector<T> grad;
};

/// Reverse sweep from several roots at once. Each root's seed gradient is
/// added to its accumulator, then gradients flow to every reachable leaf.
/// Interior nodes are released afterwards; their graph cannot be swept again.
template <class T>
void backward(const std::vector<GradSeed<T>>& seeds) {
    using NodePtr = std::shared_ptr<detail::Node<T>>;
    std::vector<NodePtr> order;
    std::unordered_set<const detail::Node<T>*> seen;
    std::vector<std::pair<NodePtr, bool>> stack;
    for (const auto& s : seeds) {
        const auto& node = s.tensor.node();
        if (node->consumed)
            throw contract_error("backward: graph already consumed; re-run the forward pass");
        if (s.grad.size() != node->value.size())
            throw dimension_error("backward: seed gradient size " + std::to_string(s.grad.size()) +
                                  " for tensor " + shape_str(node->shape));
        stack.emplace_back(node, false);
    }
    // Iterative post-order DFS gives a topological order.
    while (!stack.empty()) {
        auto [node, expanded] = stack.back();
        stack.pop_back();
        if (expanded) {
            order.push_back(node);
            continue;
        }
        if (!node->requires_grad || seen.count(node.get())) continue;
        seen.insert(node.get());
        stack.emplace_back(node, true);
        for (const auto& p : node->parents)
            if (p->requires_grad && !seen.count(p.get())) stack.emplace_back(p, false);
    }
    for (const auto& s : seeds) {
        auto& node = *s.tensor.node();
        if (!node.requires_grad) continue;
        for (std::size_t i = 0; i < s.grad.size(); ++i) node.grad[i] += s.grad[i];
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto& node = **it;
        if (node.propagate) node.propagate(node);
    }
    for (auto& node : order) {
        if (node->leaf) continue;
        node->propagate = nullptr;
        node->parents.clear();
        node->consumed = true;
    }
}

/// Fills d(loss)/d(leaf) for every parameter the scalar loss depends on.
template <class T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1)
        throw contract_error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    backward<T>({GradSeed<T>{loss, {T(1)}}});
}

}  // namespace smf
