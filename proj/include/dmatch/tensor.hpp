#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dmatch/rng.hpp"

namespace dmatch {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated on demand
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;  // null on leaves
    std::uint64_t seq = 0;
    const char* op = "leaf";

    std::size_t numel() const { return data.size(); }
    bool is_leaf() const { return !backprop; }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

inline std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

inline std::shared_ptr<TensorNode> make_node(Shape shape, bool requires_grad) {
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data.assign(numel_of(n->shape), 0.0);
    n->requires_grad = requires_grad;
    n->seq = next_seq();
    return n;
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(detail::make_node(std::move(shape), requires_grad));
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.node_->data.begin(), t.node_->data.end(), value);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false) {
        Tensor t(detail::make_node(std::move(shape), requires_grad));
        if (values.size() != t.numel()) {
            throw ShapeError("from_data: " + std::to_string(values.size()) + " values for shape " +
                             shape_str(t.shape()));
        }
        t.node_->data = std::move(values);
        return t;
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from_data({}, {value}, requires_grad);
    }

    static Tensor randn(Shape shape, RandomEngine& rng, double stddev = 1.0,
                        bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& v : t.node_->data) v = rng.normal(0.0, stddev);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    const char* op_name() const { return node_->op; }

    std::span<const double> data() const { return {node_->data.data(), node_->data.size()}; }

    // Leaf-only mutation hook (parameter updates between steps). Interior
    // nodes are immutable once created.
    std::span<double> mutable_data() {
        if (!node_->is_leaf()) throw NumericError("mutable_data: only leaves may be mutated");
        return {node_->data.data(), node_->data.size()};
    }

    std::span<const double> grad() const { return {node_->grad.data(), node_->grad.size()}; }

    void zero_grad() {
        if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
    }

    double item() const {
        if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
        return node_->data[0];
    }

    // Copy of the values with no graph attached.
    Tensor detached(bool requires_grad = false) const {
        return from_data(shape(), node_->data, requires_grad);
    }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

inline Tensor result_node(const char* op, Shape shape, std::vector<const Tensor*> inputs) {
    bool rg = false;
    for (const Tensor* t : inputs) rg = rg || (*t).requires_grad();
    Tensor out = Tensor::zeros(std::move(shape), rg);
    out.node()->op = op;
    if (rg) {
        for (const Tensor* t : inputs) out.node()->parents.push_back(t->node());
    }
    return out;
}

inline void accumulate(TensorNode& dst, std::size_t i, double v) {
    dst.grad[i] += v;
}

// Binary elementwise with the one permitted broadcast: either operand may be
// a single-element tensor. fwd(a,b)->y; da/db give dy/da and dy/db from
// (a, b, y).
template <typename F, typename DA, typename DB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, F fwd, DA da, DB db) {
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const Tensor& big = a_scalar ? b : a;
    Tensor out = result_node(op, big.shape(), {&a, &b});
    auto& y = out.node()->data;
    const auto& ad = a.node()->data;
    const auto& bd = b.node()->data;
    const std::size_t n = y.size();
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = fwd(ad[a_scalar ? 0 : i], bd[b_scalar ? 0 : i]);
    }
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        out.node()->backprop = [an, bn, a_scalar, b_scalar, da, db](TensorNode& self) {
            const std::size_t m = self.numel();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    const std::size_t ia = a_scalar ? 0 : i;
                    accumulate(*an, ia,
                               self.grad[i] * da(an->data[ia], bn->data[b_scalar ? 0 : i], self.data[i]));
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    const std::size_t ib = b_scalar ? 0 : i;
                    accumulate(*bn, ib,
                               self.grad[i] * db(an->data[a_scalar ? 0 : i], bn->data[ib], self.data[i]));
                }
            }
        };
    }
    return out;
}

template <typename F, typename D>
Tensor unary_op(const char* op, const Tensor& a, F fwd, D dydx) {
    Tensor out = result_node(op, a.shape(), {&a});
    const auto& ad = a.node()->data;
    auto& y = out.node()->data;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(ad[i]);
    if (out.requires_grad()) {
        auto an = a.node();
        out.node()->backprop = [an, dydx](TensorNode& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.numel(); ++i) {
                accumulate(*an, i, self.grad[i] * dydx(an->data[i], self.data[i]));
            }
        };
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}
inline Tensor add(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}
inline Tensor sub(const Tensor& a, double c) { return sub(a, Tensor::scalar(c)); }
inline Tensor sub(double c, const Tensor& b) { return sub(Tensor::scalar(c), b); }

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}
inline Tensor mul(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }

inline Tensor vdiv(const Tensor& a, const Tensor& b) {
    for (double v : b.data()) {
        if (v == 0.0) throw NumericError("div: zero divisor");
    }
    return detail::binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double z) { return -z / y; });
}
inline Tensor vdiv(const Tensor& a, double c) { return vdiv(a, Tensor::scalar(c)); }
inline Tensor vdiv(double c, const Tensor& b) { return vdiv(Tensor::scalar(c), b); }

inline Tensor vexp(const Tensor& a) {
    return detail::unary_op(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor vlog(const Tensor& a) {
    for (double v : a.data()) {
        if (v <= 0.0) throw NumericError("log: non-positive operand " + std::to_string(v));
    }
    return detail::unary_op(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        "sigmoid", a,
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor negate(const Tensor& a) {
    return detail::unary_op(
        "negate", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor square(const Tensor& a) {
    return detail::unary_op(
        "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// reductions

namespace detail {

struct ReducePlan {
    Shape in_shape;
    Shape out_shape;
    std::vector<std::size_t> out_stride;  // per input dim, 0 on reduced dims
    std::size_t group = 1;                // reduced elements per output element
};

inline ReducePlan make_reduce_plan(const Shape& in, std::vector<int> axes) {
    const std::size_t rank = in.size();
    if (axes.empty()) {
        for (std::size_t d = 0; d < rank; ++d) axes.push_back(static_cast<int>(d));
    }
    std::vector<bool> reduced(rank, false);
    for (int ax : axes) {
        if (ax < 0 || static_cast<std::size_t>(ax) >= rank) {
            throw ShapeError("reduce: axis " + std::to_string(ax) + " out of range for " + shape_str(in));
        }
        if (reduced[static_cast<std::size_t>(ax)]) {
            throw ShapeError("reduce: duplicate axis " + std::to_string(ax));
        }
        reduced[static_cast<std::size_t>(ax)] = true;
    }
    ReducePlan p;
    p.in_shape = in;
    for (std::size_t d = 0; d < rank; ++d) {
        if (reduced[d]) {
            p.group *= in[d];
        } else {
            p.out_shape.push_back(in[d]);
        }
    }
    p.out_stride.assign(rank, 0);
    std::size_t stride = 1;
    for (std::size_t d = rank; d-- > 0;) {
        if (!reduced[d]) {
            p.out_stride[d] = stride;
            stride *= in[d];
        }
    }
    return p;
}

// Calls f(in_linear, out_linear) over all input elements in linear order.
template <typename F>
inline void for_each_mapped(const ReducePlan& p, F&& f) {
    const std::size_t rank = p.in_shape.size();
    const std::size_t n = numel_of(p.in_shape);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t out = 0;
    for (std::size_t lin = 0; lin < n; ++lin) {
        f(lin, out);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            out += p.out_stride[d];
            if (idx[d] < p.in_shape[d]) break;
            out -= p.out_stride[d] * p.in_shape[d];
            idx[d] = 0;
        }
    }
}

}  // namespace detail

inline Tensor sum(const Tensor& a, std::vector<int> axes = {}) {
    auto plan = detail::make_reduce_plan(a.shape(), std::move(axes));
    Tensor out = detail::result_node("sum", plan.out_shape, {&a});
    auto& y = out.node()->data;
    const auto& x = a.node()->data;
    detail::for_each_mapped(plan, [&](std::size_t i, std::size_t o) { y[o] += x[i]; });
    if (out.requires_grad()) {
        auto an = a.node();
        out.node()->backprop = [an, plan](detail::TensorNode& self) {
            an->ensure_grad();
            detail::for_each_mapped(plan,
                                    [&](std::size_t i, std::size_t o) { an->grad[i] += self.grad[o]; });
        };
    }
    return out;
}

inline Tensor mean(const Tensor& a, std::vector<int> axes = {}) {
    auto plan = detail::make_reduce_plan(a.shape(), std::move(axes));
    const double inv = 1.0 / static_cast<double>(plan.group);
    Tensor out = detail::result_node("mean", plan.out_shape, {&a});
    auto& y = out.node()->data;
    const auto& x = a.node()->data;
    detail::for_each_mapped(plan, [&](std::size_t i, std::size_t o) { y[o] += x[i] * inv; });
    if (out.requires_grad()) {
        auto an = a.node();
        out.node()->backprop = [an, plan, inv](detail::TensorNode& self) {
            an->ensure_grad();
            detail::for_each_mapped(
                plan, [&](std::size_t i, std::size_t o) { an->grad[i] += self.grad[o] * inv; });
        };
    }
    return out;
}

inline Tensor reduce_max(const Tensor& a, std::vector<int> axes = {}) {
    auto plan = detail::make_reduce_plan(a.shape(), std::move(axes));
    Tensor out = detail::result_node("max", plan.out_shape, {&a});
    auto& y = out.node()->data;
    const auto& x = a.node()->data;
    auto argmax = std::make_shared<std::vector<std::size_t>>(y.size(), std::size_t(-1));
    detail::for_each_mapped(plan, [&](std::size_t i, std::size_t o) {
        if ((*argmax)[o] == std::size_t(-1) || x[i] > y[o]) {
            y[o] = x[i];
            (*argmax)[o] = i;
        }
    });
    if (out.requires_grad()) {
        auto an = a.node();
        out.node()->backprop = [an, argmax](detail::TensorNode& self) {
            an->ensure_grad();
            for (std::size_t o = 0; o < self.numel(); ++o) an->grad[(*argmax)[o]] += self.grad[o];
        };
    }
    return out;
}

// Overflow-safe: per output group, max is subtracted before exponentiation.
inline Tensor logsumexp(const Tensor& a, std::vector<int> axes = {}) {
    auto plan = detail::make_reduce_plan(a.shape(), std::move(axes));
    Tensor out = detail::result_node("logsumexp", plan.out_shape, {&a});
    auto& y = out.node()->data;
    const auto& x = a.node()->data;
    std::vector<double> mx(y.size(), -std::numeric_limits<double>::infinity());
    detail::for_each_mapped(plan, [&](std::size_t i, std::size_t o) { mx[o] = std::max(mx[o], x[i]); });
    detail::for_each_mapped(plan, [&](std::size_t i, std::size_t o) { y[o] += std::exp(x[i] - mx[o]); });
    for (std::size_t o = 0; o < y.size(); ++o) y[o] = mx[o] + std::log(y[o]);
    if (out.requires_grad()) {
        auto an = a.node();
        out.node()->backprop = [an, plan](detail::TensorNode& self) {
            an->ensure_grad();
            detail::for_each_mapped(plan, [&](std::size_t i, std::size_t o) {
                an->grad[i] += self.grad[o] * std::exp(an->data[i] - self.data[o]);
            });
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out = detail::result_node("matmul", {m, n}, {&a, &b});
    {
        const double* ad = a.node()->data.data();
        const double* bd = b.node()->data.data();
        double* yd = out.node()->data.data();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                const double av = ad[i * k + p];
                const double* brow = bd + p * n;
                double* yrow = yd + i * n;
                for (std::size_t j = 0; j < n; ++j) yrow[j] += av * brow[j];
            }
        }
    }
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        out.node()->backprop = [an, bn, m, k, n](detail::TensorNode& self) {
            const double* g = self.grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        const double* grow = g + i * n;
                        const double* brow = bn->data.data() + p * n;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        an->grad[i * k + p] += acc;
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g + i * n;
                    const double* arow = an->data.data() + i * k;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = arow[p];
                        double* brow = bn->grad.data() + p * n;
                        for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
                }
            }
        };
    }
    return out;
}

// Squared Euclidean distances between row sets: q [M,d], x [N,d] -> [M,N].
inline Tensor pairwise_sqdist(const Tensor& q, const Tensor& x) {
    if (q.rank() != 2 || x.rank() != 2 || q.shape()[1] != x.shape()[1]) {
        throw ShapeError("pairwise_sqdist: need [M,d] and [N,d], got " + shape_str(q.shape()) + " and " +
                         shape_str(x.shape()));
    }
    const std::size_t mrows = q.shape()[0], nrows = x.shape()[0], d = q.shape()[1];
    Tensor out = detail::result_node("pairwise_sqdist", {mrows, nrows}, {&q, &x});
    {
        const double* qd = q.node()->data.data();
        const double* xd = x.node()->data.data();
        double* yd = out.node()->data.data();
        for (std::size_t i = 0; i < mrows; ++i) {
            const double* qr = qd + i * d;
            for (std::size_t j = 0; j < nrows; ++j) {
                const double* xr = xd + j * d;
                double acc = 0.0;
                for (std::size_t t = 0; t < d; ++t) {
                    const double diff = qr[t] - xr[t];
                    acc += diff * diff;
                }
                yd[i * nrows + j] = acc;
            }
        }
    }
    if (out.requires_grad()) {
        auto qn = q.node();
        auto xn = x.node();
        out.node()->backprop = [qn, xn, mrows, nrows, d](detail::TensorNode& self) {
            if (qn->requires_grad) qn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (std::size_t i = 0; i < mrows; ++i) {
                const double* qr = qn->data.data() + i * d;
                for (std::size_t j = 0; j < nrows; ++j) {
                    const double c = 2.0 * self.grad[i * nrows + j];
                    if (c == 0.0) continue;
                    const double* xr = xn->data.data() + j * d;
                    for (std::size_t t = 0; t < d; ++t) {
                        const double diff = c * (qr[t] - xr[t]);
                        if (qn->requires_grad) qn->grad[i * d + t] += diff;
                        if (xn->requires_grad) xn->grad[j * d + t] -= diff;
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (numel_of(new_shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    }
    Tensor out = detail::result_node("reshape", std::move(new_shape), {&a});
    out.node()->data = a.node()->data;
    if (out.requires_grad()) {
        auto an = a.node();
        out.node()->backprop = [an](detail::TensorNode& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.numel(); ++i) an->grad[i] += self.grad[i];
        };
    }
    return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts.front().shape();
    const std::size_t rank = first.size();
    if (axis < 0 || static_cast<std::size_t>(axis) >= rank) {
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range");
    }
    const auto ax = static_cast<std::size_t>(axis);
    Shape out_shape = first;
    out_shape[ax] = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != rank) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < rank; ++d) {
            if (d != ax && t.shape()[d] != first[d]) {
                throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                                 shape_str(first));
            }
        }
        out_shape[ax] += t.shape()[ax];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < ax; ++d) outer *= first[d];
    for (std::size_t d = ax + 1; d < rank; ++d) inner *= first[d];

    std::vector<const Tensor*> in_ptrs;
    for (const Tensor& t : parts) in_ptrs.push_back(&t);
    Tensor out = detail::result_node("concat", out_shape, in_ptrs);
    const std::size_t out_block = out_shape[ax] * inner;
    {
        double* yd = out.node()->data.data();
        std::size_t off = 0;
        for (const Tensor& t : parts) {
            const std::size_t block = t.shape()[ax] * inner;
            const double* xd = t.node()->data.data();
            for (std::size_t o = 0; o < outer; ++o) {
                std::copy(xd + o * block, xd + (o + 1) * block, yd + o * out_block + off);
            }
            off += block;
        }
    }
    if (out.requires_grad()) {
        std::vector<std::shared_ptr<detail::TensorNode>> nodes;
        std::vector<std::size_t> blocks;
        for (const Tensor& t : parts) {
            nodes.push_back(t.node());
            blocks.push_back(t.shape()[ax] * inner);
        }
        out.node()->backprop = [nodes, blocks, outer, out_block](detail::TensorNode& self) {
            std::size_t off = 0;
            for (std::size_t p = 0; p < nodes.size(); ++p) {
                auto& n = *nodes[p];
                if (n.requires_grad) {
                    n.ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const double* g = self.grad.data() + o * out_block + off;
                        double* dst = n.grad.data() + o * blocks[p];
                        for (std::size_t i = 0; i < blocks[p]; ++i) dst[i] += g[i];
                    }
                }
                off += blocks[p];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// spatial ops (NCHW)

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d: need 4-d input and kernel");
    const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::size_t F = w.shape()[0], K = w.shape()[2];
    if (w.shape()[1] != C) {
        throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(C) + ", kernel expects " +
                         std::to_string(w.shape()[1]));
    }
    if (w.shape()[3] != K || K % 2 == 0) throw ShapeError("conv2d: kernel must be square with odd size");
    if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
    const std::size_t P = padding;
    if (H + 2 * P < K || W + 2 * P < K) throw ShapeError("conv2d: kernel larger than padded input");
    const std::size_t OH = (H + 2 * P - K) / stride + 1;
    const std::size_t OW = (W + 2 * P - K) / stride + 1;
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.shape()[0] != F)) {
        throw ShapeError("conv2d: bias must be [F]");
    }

    std::vector<const Tensor*> ins{&x, &w};
    if (has_bias) ins.push_back(&bias);
    Tensor out = detail::result_node("conv2d", {B, F, OH, OW}, ins);

    const double* xd = x.node()->data.data();
    const double* wd = w.node()->data.data();
    double* yd = out.node()->data.data();
    const std::int64_t sp = static_cast<std::int64_t>(P);
    const std::int64_t s = static_cast<std::int64_t>(stride);

    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t f = 0; f < F; ++f) {
            double* ybase = yd + ((b * F + f) * OH) * OW;
            if (has_bias) {
                const double bv = bias.node()->data[f];
                for (std::size_t i = 0; i < OH * OW; ++i) ybase[i] = bv;
            }
            for (std::size_t c = 0; c < C; ++c) {
                const double* xbase = xd + ((b * C + c) * H) * W;
                const double* wbase = wd + ((f * C + c) * K) * K;
                for (std::size_t kh = 0; kh < K; ++kh) {
                    for (std::size_t kw = 0; kw < K; ++kw) {
                        const double wv = wbase[kh * K + kw];
                        for (std::size_t oh = 0; oh < OH; ++oh) {
                            const std::int64_t ih = static_cast<std::int64_t>(oh) * s - sp +
                                                    static_cast<std::int64_t>(kh);
                            if (ih < 0 || ih >= static_cast<std::int64_t>(H)) continue;
                            const double* xrow = xbase + ih * static_cast<std::int64_t>(W);
                            double* yrow = ybase + oh * OW;
                            if (s == 1) {
                                const std::int64_t shift = static_cast<std::int64_t>(kw) - sp;
                                const std::size_t ow0 =
                                    shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                                const std::int64_t hi = static_cast<std::int64_t>(W) - shift;
                                const std::size_t ow1 =
                                    hi < 0 ? 0 : std::min<std::size_t>(OW, static_cast<std::size_t>(hi));
                                for (std::size_t ow = ow0; ow < ow1; ++ow) {
                                    yrow[ow] += wv * xrow[static_cast<std::int64_t>(ow) + shift];
                                }
                            } else {
                                for (std::size_t ow = 0; ow < OW; ++ow) {
                                    const std::int64_t iw = static_cast<std::int64_t>(ow) * s - sp +
                                                            static_cast<std::int64_t>(kw);
                                    if (iw < 0 || iw >= static_cast<std::int64_t>(W)) continue;
                                    yrow[ow] += wv * xrow[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    if (out.requires_grad()) {
        auto xn = x.node();
        auto wn = w.node();
        auto bn = has_bias ? bias.node() : nullptr;
        out.node()->backprop = [xn, wn, bn, B, C, H, W, F, K, OH, OW, s, sp](detail::TensorNode& self) {
            const double* g = self.grad.data();
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t f = 0; f < F; ++f) {
                        const double* grow = g + ((b * F + f) * OH) * OW;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < OH * OW; ++i) acc += grow[i];
                        bn->grad[f] += acc;
                    }
                }
            }
            const bool need_x = xn->requires_grad;
            const bool need_w = wn->requires_grad;
            if (need_x) xn->ensure_grad();
            if (need_w) wn->ensure_grad();
            if (!need_x && !need_w) return;
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t f = 0; f < F; ++f) {
                    const double* gbase = g + ((b * F + f) * OH) * OW;
                    for (std::size_t c = 0; c < C; ++c) {
                        const double* xbase = xn->data.data() + ((b * C + c) * H) * W;
                        double* gxbase = need_x ? xn->grad.data() + ((b * C + c) * H) * W : nullptr;
                        const double* wbase = wn->data.data() + ((f * C + c) * K) * K;
                        double* gwbase = need_w ? wn->grad.data() + ((f * C + c) * K) * K : nullptr;
                        for (std::size_t kh = 0; kh < K; ++kh) {
                            for (std::size_t kw = 0; kw < K; ++kw) {
                                const double wv = wbase[kh * K + kw];
                                double wacc = 0.0;
                                for (std::size_t oh = 0; oh < OH; ++oh) {
                                    const std::int64_t ih = static_cast<std::int64_t>(oh) * s - sp +
                                                            static_cast<std::int64_t>(kh);
                                    if (ih < 0 || ih >= static_cast<std::int64_t>(H)) continue;
                                    const double* grow = gbase + oh * OW;
                                    const std::size_t xoff = static_cast<std::size_t>(ih) * W;
                                    if (s == 1) {
                                        const std::int64_t shift = static_cast<std::int64_t>(kw) - sp;
                                        const std::size_t ow0 =
                                            shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                                        const std::int64_t hi = static_cast<std::int64_t>(W) - shift;
                                        const std::size_t ow1 =
                                            hi < 0 ? 0
                                                   : std::min<std::size_t>(OW,
                                                                           static_cast<std::size_t>(hi));
                                        if (need_x) {
                                            double* gxrow = gxbase + xoff;
                                            for (std::size_t ow = ow0; ow < ow1; ++ow) {
                                                gxrow[static_cast<std::int64_t>(ow) + shift] +=
                                                    wv * grow[ow];
                                            }
                                        }
                                        if (need_w) {
                                            const double* xrow = xbase + xoff;
                                            for (std::size_t ow = ow0; ow < ow1; ++ow) {
                                                wacc += grow[ow] * xrow[static_cast<std::int64_t>(ow) + shift];
                                            }
                                        }
                                    } else {
                                        for (std::size_t ow = 0; ow < OW; ++ow) {
                                            const std::int64_t iw = static_cast<std::int64_t>(ow) * s -
                                                                    sp + static_cast<std::int64_t>(kw);
                                            if (iw < 0 || iw >= static_cast<std::int64_t>(W)) continue;
                                            if (need_x) {
                                                xn->grad[((b * C + c) * H + ih) * W + iw] +=
                                                    wv * grow[ow];
                                            }
                                            if (need_w) wacc += grow[ow] * xbase[ih * W + iw];
                                        }
                                    }
                                }
                                if (need_w) gwbase[kh * K + kw] += wacc;
                            }
                        }
                    }
                }
            }
        };
    }
    return out;
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding) {
    return conv2d(x, w, Tensor(), stride, padding);
}

// 2x2 max pool, stride 2. Argmax positions drive the backward pass.
inline Tensor maxpool2(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("maxpool2: need 4-d input");
    const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (H % 2 != 0 || W % 2 != 0) {
        throw ShapeError("maxpool2: spatial dims must be even, got " + shape_str(x.shape()));
    }
    const std::size_t OH = H / 2, OW = W / 2;
    Tensor out = detail::result_node("maxpool2", {B, C, OH, OW}, {&x});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
    const double* xd = x.node()->data.data();
    double* yd = out.node()->data.data();
    std::size_t o = 0;
    for (std::size_t bc = 0; bc < B * C; ++bc) {
        const double* plane = xd + bc * H * W;
        for (std::size_t oh = 0; oh < OH; ++oh) {
            for (std::size_t ow = 0; ow < OW; ++ow, ++o) {
                std::size_t best = (2 * oh) * W + 2 * ow;
                const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
                for (std::size_t k = 0; k < 3; ++k) {
                    if (plane[cand[k]] > plane[best]) best = cand[k];
                }
                yd[o] = plane[best];
                (*argmax)[o] = bc * H * W + best;
            }
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        out.node()->backprop = [xn, argmax](detail::TensorNode& self) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < self.numel(); ++i) xn->grad[(*argmax)[i]] += self.grad[i];
        };
    }
    return out;
}

// Nearest-neighbor 2x upsampling; backward sums the four replicas.
inline Tensor upsample2(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("upsample2: need 4-d input");
    const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::size_t OH = 2 * H, OW = 2 * W;
    Tensor out = detail::result_node("upsample2", {B, C, OH, OW}, {&x});
    const double* xd = x.node()->data.data();
    double* yd = out.node()->data.data();
    for (std::size_t bc = 0; bc < B * C; ++bc) {
        const double* plane = xd + bc * H * W;
        double* oplane = yd + bc * OH * OW;
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t w = 0; w < W; ++w) {
                const double v = plane[h * W + w];
                double* cell = oplane + (2 * h) * OW + 2 * w;
                cell[0] = v;
                cell[1] = v;
                cell[OW] = v;
                cell[OW + 1] = v;
            }
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        out.node()->backprop = [xn, B, C, H, W, OH, OW](detail::TensorNode& self) {
            xn->ensure_grad();
            for (std::size_t bc = 0; bc < B * C; ++bc) {
                const double* gplane = self.grad.data() + bc * OH * OW;
                double* dst = xn->grad.data() + bc * H * W;
                for (std::size_t h = 0; h < H; ++h) {
                    for (std::size_t w = 0; w < W; ++w) {
                        const double* cell = gplane + (2 * h) * OW + 2 * w;
                        dst[h * W + w] += cell[0] + cell[1] + cell[OW] + cell[OW + 1];
                    }
                }
            }
        };
    }
    return out;
}

// Softmax along the channel axis of [B,C,H,W].
inline Tensor softmax_channels(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("softmax_channels: need 4-d input");
    const std::size_t B = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
    Tensor out = detail::result_node("softmax_channels", x.shape(), {&x});
    const double* xd = x.node()->data.data();
    double* yd = out.node()->data.data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t p = 0; p < HW; ++p) {
            const std::size_t base = b * C * HW + p;
            double mx = xd[base];
            for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, xd[base + c * HW]);
            double z = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                const double e = std::exp(xd[base + c * HW] - mx);
                yd[base + c * HW] = e;
                z += e;
            }
            for (std::size_t c = 0; c < C; ++c) yd[base + c * HW] /= z;
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        out.node()->backprop = [xn, B, C, HW](detail::TensorNode& self) {
            xn->ensure_grad();
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t p = 0; p < HW; ++p) {
                    const std::size_t base = b * C * HW + p;
                    double dot = 0.0;
                    for (std::size_t c = 0; c < C; ++c) {
                        dot += self.grad[base + c * HW] * self.data[base + c * HW];
                    }
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t i = base + c * HW;
                        xn->grad[i] += self.data[i] * (self.grad[i] - dot);
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// reverse pass

// Reverse-mode sweep from a scalar loss. Interior gradients are scratch and
// reset per call; leaf gradients accumulate across calls until zero_grad().
inline void backward(const Tensor& loss) {
    if (!loss.defined()) throw ShapeError("backward: undefined tensor");
    if (loss.numel() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    auto root = loss.node();
    if (!root->requires_grad) return;  // constant graph

    std::vector<detail::TensorNode*> order;
    std::unordered_set<detail::TensorNode*> seen;
    std::vector<detail::TensorNode*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        detail::TensorNode* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const detail::TensorNode* a, const detail::TensorNode* b) { return a->seq > b->seq; });

    for (detail::TensorNode* n : order) {
        if (!n->is_leaf()) {
            n->grad.assign(n->data.size(), 0.0);
        } else {
            n->ensure_grad();
        }
    }
    root->grad[0] += 1.0;
    for (detail::TensorNode* n : order) {
        if (!n->is_leaf()) n->backprop(*n);
    }
}

}  // namespace dmatch
