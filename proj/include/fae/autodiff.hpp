#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fae/array.hpp"

// Scalar-expression kernel with symbolic differentiation.
//
// Expressions are immutable DAGs over named variable arrays and constants.
// Differentiation is a graph-to-graph transformation: the reverse pass builds
// new nodes, so an expression may itself contain gradient results and be
// differentiated again. Two levels of nesting are supported, which is what a
// loss containing first-order score terms needs; a third application throws.

namespace fae::ad {

enum class OpKind : std::uint8_t {
    kConst,
    kVar,
    kAdd,
    kSub,
    kMul,
    kDiv,
    kNeg,
    kMatVec,     // (W:{r,c}, x:{c}) -> {r}
    kMatTVec,    // (W:{r,c}, y:{r}) -> {c}
    kOuter,      // (u:{r}, v:{c}) -> {r,c}
    kRelu,
    kStep,       // relu'(x); derivative defined as zero everywhere
    kExp,
    kLog,
    kSqNorm,     // sum of squares -> scalar
    kSum,        // -> scalar
    kDot,        // ({n},{n}) -> scalar
    kLogSumExp,  // {n} -> scalar
    kStack,      // (scalar...) -> {k}
    kIndex,      // ({n}, static slot) -> scalar
    kRow,        // ({r,c}, static slot) -> {c}
    kBroadcast,  // scalar -> shape
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::kConst: return "const";
        case OpKind::kVar: return "var";
        case OpKind::kAdd: return "add";
        case OpKind::kSub: return "sub";
        case OpKind::kMul: return "mul";
        case OpKind::kDiv: return "div";
        case OpKind::kNeg: return "neg";
        case OpKind::kMatVec: return "matvec";
        case OpKind::kMatTVec: return "mat_t_vec";
        case OpKind::kOuter: return "outer";
        case OpKind::kRelu: return "relu";
        case OpKind::kStep: return "step";
        case OpKind::kExp: return "exp";
        case OpKind::kLog: return "log";
        case OpKind::kSqNorm: return "sqnorm";
        case OpKind::kSum: return "sum";
        case OpKind::kDot: return "dot";
        case OpKind::kLogSumExp: return "logsumexp";
        case OpKind::kStack: return "stack";
        case OpKind::kIndex: return "index";
        case OpKind::kRow: return "row";
        case OpKind::kBroadcast: return "broadcast";
    }
    return "?";
}

struct Node;
using NodeRef = std::shared_ptr<const Node>;

struct Node {
    OpKind op;
    Shape shape;
    std::vector<NodeRef> inputs;
    Array value;       // kConst payload
    std::string name;  // kVar payload
    std::size_t slot = 0;  // kIndex / kRow static position
    int level = 0;     // how many gradient transformations produced this node
    std::uint64_t id = 0;
};

namespace detail {

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

inline int& build_level() {
    thread_local int level = 0;
    return level;
}

}  // namespace detail

class Expr {
public:
    Expr() = default;
    explicit Expr(NodeRef node) : node_(std::move(node)) {}

    const Node& node() const { return *node_; }
    const NodeRef& ref() const { return node_; }
    const Shape& shape() const { return node_->shape; }
    bool is_scalar() const { return node_->shape.empty(); }
    explicit operator bool() const { return static_cast<bool>(node_); }

    bool same_node(const Expr& other) const { return node_.get() == other.node_.get(); }

private:
    NodeRef node_;
};

namespace detail {

inline Expr make_node(OpKind op, Shape shape, std::vector<NodeRef> inputs,
                      Array value = Array::scalar(0.0), std::string name = {},
                      std::size_t slot = 0) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->shape = std::move(shape);
    n->inputs = std::move(inputs);
    n->value = std::move(value);
    n->name = std::move(name);
    n->slot = slot;
    n->level = build_level();
    for (const auto& in : n->inputs) n->level = std::max(n->level, in->level);
    n->id = next_node_id();
    return Expr(NodeRef(std::move(n)));
}

inline bool is_const(const Expr& e) { return e.node().op == OpKind::kConst; }

inline bool is_const_value(const Expr& e, double v) {
    if (!is_const(e)) return false;
    for (double x : e.node().value) {
        if (x != v) return false;
    }
    return true;
}

inline bool is_zero(const Expr& e) { return is_const_value(e, 0.0); }
inline bool is_one(const Expr& e) { return is_const_value(e, 1.0); }

[[noreturn]] inline void shape_error(const char* op, const Expr& a, const Expr& b) {
    throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()) + " do not conform");
}

}  // namespace detail

inline Expr constant(Array v) {
    Shape s = v.shape();
    return detail::make_node(OpKind::kConst, std::move(s), {}, std::move(v));
}

inline Expr constant(double v) { return constant(Array::scalar(v)); }

inline Expr variable(std::string name, Shape shape) {
    if (name.empty()) throw std::invalid_argument("variable: empty name");
    return detail::make_node(OpKind::kVar, std::move(shape), {}, Array::scalar(0.0),
                             std::move(name));
}

// --- builders -------------------------------------------------------------

namespace detail {

// Elementwise binary shape rule: identical shapes, or one side scalar.
inline Shape binary_shape(const char* op, const Expr& a, const Expr& b) {
    if (a.shape() == b.shape()) return a.shape();
    if (a.is_scalar()) return b.shape();
    if (b.is_scalar()) return a.shape();
    shape_error(op, a, b);
}

}  // namespace detail

inline Expr add(const Expr& a, const Expr& b) {
    Shape s = detail::binary_shape("add", a, b);
    if (detail::is_zero(a) && s == b.shape()) return b;
    if (detail::is_zero(b) && s == a.shape()) return a;
    return detail::make_node(OpKind::kAdd, std::move(s), {a.ref(), b.ref()});
}

inline Expr neg(const Expr& a) {
    if (a.node().op == OpKind::kNeg) return Expr(a.node().inputs[0]);
    return detail::make_node(OpKind::kNeg, a.shape(), {a.ref()});
}

inline Expr sub(const Expr& a, const Expr& b) {
    Shape s = detail::binary_shape("sub", a, b);
    if (detail::is_zero(b) && s == a.shape()) return a;
    if (detail::is_zero(a) && s == b.shape()) return neg(b);
    return detail::make_node(OpKind::kSub, std::move(s), {a.ref(), b.ref()});
}

inline Expr mul(const Expr& a, const Expr& b) {
    Shape s = detail::binary_shape("mul", a, b);
    if (detail::is_zero(a) || detail::is_zero(b)) return constant(Array::zeros(s));
    if (detail::is_one(a) && s == b.shape()) return b;
    if (detail::is_one(b) && s == a.shape()) return a;
    return detail::make_node(OpKind::kMul, std::move(s), {a.ref(), b.ref()});
}

inline Expr div(const Expr& a, const Expr& b) {
    Shape s = detail::binary_shape("div", a, b);
    if (detail::is_one(b) && s == a.shape()) return a;
    return detail::make_node(OpKind::kDiv, std::move(s), {a.ref(), b.ref()});
}

inline Expr matvec(const Expr& w, const Expr& x) {
    if (w.shape().size() != 2 || x.shape().size() != 1 || w.shape()[1] != x.shape()[0]) {
        detail::shape_error("matvec", w, x);
    }
    return detail::make_node(OpKind::kMatVec, Shape{w.shape()[0]}, {w.ref(), x.ref()});
}

inline Expr mat_t_vec(const Expr& w, const Expr& y) {
    if (w.shape().size() != 2 || y.shape().size() != 1 || w.shape()[0] != y.shape()[0]) {
        detail::shape_error("mat_t_vec", w, y);
    }
    return detail::make_node(OpKind::kMatTVec, Shape{w.shape()[1]}, {w.ref(), y.ref()});
}

inline Expr outer(const Expr& u, const Expr& v) {
    if (u.shape().size() != 1 || v.shape().size() != 1) detail::shape_error("outer", u, v);
    return detail::make_node(OpKind::kOuter, Shape{u.shape()[0], v.shape()[0]},
                             {u.ref(), v.ref()});
}

inline Expr relu(const Expr& a) {
    return detail::make_node(OpKind::kRelu, a.shape(), {a.ref()});
}

inline Expr step(const Expr& a) {
    return detail::make_node(OpKind::kStep, a.shape(), {a.ref()});
}

inline Expr exp(const Expr& a) {
    return detail::make_node(OpKind::kExp, a.shape(), {a.ref()});
}

inline Expr log(const Expr& a) {
    return detail::make_node(OpKind::kLog, a.shape(), {a.ref()});
}

inline Expr sqnorm(const Expr& a) {
    return detail::make_node(OpKind::kSqNorm, Shape{}, {a.ref()});
}

inline Expr sum(const Expr& a) {
    if (a.is_scalar()) return a;
    return detail::make_node(OpKind::kSum, Shape{}, {a.ref()});
}

inline Expr dot(const Expr& u, const Expr& v) {
    if (u.shape().size() != 1 || u.shape() != v.shape()) detail::shape_error("dot", u, v);
    return detail::make_node(OpKind::kDot, Shape{}, {u.ref(), v.ref()});
}

inline Expr logsumexp(const Expr& a) {
    if (a.shape().size() != 1) {
        throw std::invalid_argument("logsumexp: expected a vector, got " + shape_str(a.shape()));
    }
    return detail::make_node(OpKind::kLogSumExp, Shape{}, {a.ref()});
}

inline Expr stack(std::span<const Expr> parts) {
    if (parts.empty()) throw std::invalid_argument("stack: no parts");
    std::vector<NodeRef> refs;
    refs.reserve(parts.size());
    for (const Expr& p : parts) {
        if (!p.is_scalar()) {
            throw std::invalid_argument("stack: parts must be scalars, got " +
                                        shape_str(p.shape()));
        }
        refs.push_back(p.ref());
    }
    return detail::make_node(OpKind::kStack, Shape{parts.size()}, std::move(refs));
}

inline Expr index(const Expr& v, std::size_t i) {
    if (v.shape().size() != 1 || i >= v.shape()[0]) {
        throw std::invalid_argument("index: position " + std::to_string(i) +
                                    " out of range for " + shape_str(v.shape()));
    }
    return detail::make_node(OpKind::kIndex, Shape{}, {v.ref()}, Array::scalar(0.0), {}, i);
}

inline Expr row(const Expr& m, std::size_t r) {
    if (m.shape().size() != 2 || r >= m.shape()[0]) {
        throw std::invalid_argument("row: position " + std::to_string(r) +
                                    " out of range for " + shape_str(m.shape()));
    }
    return detail::make_node(OpKind::kRow, Shape{m.shape()[1]}, {m.ref()},
                             Array::scalar(0.0), {}, r);
}

inline Expr broadcast(const Expr& s, Shape shape) {
    if (!s.is_scalar()) {
        throw std::invalid_argument("broadcast: source must be scalar, got " +
                                    shape_str(s.shape()));
    }
    if (shape.empty()) return s;
    return detail::make_node(OpKind::kBroadcast, std::move(shape), {s.ref()});
}

inline Expr operator+(const Expr& a, const Expr& b) { return add(a, b); }
inline Expr operator-(const Expr& a, const Expr& b) { return sub(a, b); }
inline Expr operator*(const Expr& a, const Expr& b) { return mul(a, b); }
inline Expr operator/(const Expr& a, const Expr& b) { return div(a, b); }
inline Expr operator-(const Expr& a) { return neg(a); }
inline Expr operator*(double a, const Expr& b) { return mul(constant(a), b); }
inline Expr operator*(const Expr& a, double b) { return mul(a, constant(b)); }
inline Expr operator+(const Expr& a, double b) { return add(a, constant(b)); }
inline Expr operator+(double a, const Expr& b) { return add(constant(a), b); }
inline Expr operator-(const Expr& a, double b) { return sub(a, constant(b)); }
inline Expr operator-(double a, const Expr& b) { return sub(constant(a), b); }

// clamp(v, lo, hi) composed from relu so its derivative follows the
// relu'(0) = 0 convention at both edges.
inline Expr clamp(const Expr& v, double lo, double hi) {
    if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be < hi");
    return constant(lo) + relu(v - lo) - relu(v - hi);
}

// --- differentiation --------------------------------------------------------

namespace detail {

inline Expr onehot(std::size_t i, std::size_t n) {
    Array a(Shape{n});
    a[i] = 1.0;
    return constant(std::move(a));
}

// Reduce an adjoint contribution back to the shape of a (possibly
// scalar-broadcast) operand.
inline Expr reduce_to(const Expr& e, const Shape& target) {
    if (e.shape() == target) return e;
    if (target.empty()) return sum(e);
    throw std::logic_error("reduce_to: cannot reduce " + shape_str(e.shape()) + " to " +
                           shape_str(target));
}

// Post-order over the sub-DAG rooted at `root`; children of nodes in `stops`
// are not descended into through those nodes.
inline std::vector<NodeRef> topo_order(const NodeRef& root,
                                       const std::set<const Node*>& stops) {
    std::vector<NodeRef> order;
    std::vector<std::pair<NodeRef, std::size_t>> work;
    std::set<const Node*> seen;
    work.emplace_back(root, 0);
    seen.insert(root.get());
    while (!work.empty()) {
        auto& [node, next_child] = work.back();
        const bool blocked = stops.count(node.get()) != 0;
        if (blocked || next_child >= node->inputs.size()) {
            order.push_back(node);
            work.pop_back();
            continue;
        }
        NodeRef child = node->inputs[next_child++];
        if (seen.insert(child.get()).second) {
            work.emplace_back(std::move(child), 0);
        }
    }
    return order;
}

struct LevelGuard {
    explicit LevelGuard(int level) : saved(build_level()) { build_level() = level; }
    ~LevelGuard() { build_level() = saved; }
    int saved;
};

}  // namespace detail

// Reverse-mode gradients of a scalar expression with respect to specific
// graph nodes. Each node in `wrt` is treated as an independent leaf: the
// result is the adjoint arriving at it. Nodes in `stop` do not propagate
// adjoints into their own inputs, which makes partial derivatives with a
// frozen intermediate (e.g. a sampled latent) expressible.
inline std::vector<Expr> gradients(const Expr& f, std::span<const Expr> wrt,
                                   std::span<const Expr> stop = {}) {
    if (!f.is_scalar()) {
        throw std::invalid_argument("gradients: expression is not scalar-valued, shape " +
                                    shape_str(f.shape()));
    }
    std::set<const Node*> stops;
    for (const Expr& s : stop) stops.insert(&s.node());

    const auto order = detail::topo_order(f.ref(), stops);
    int reach = 0;
    for (const auto& n : order) reach = std::max(reach, n->level);
    if (reach >= 2) {
        throw std::runtime_error("gradients: nesting deeper than 2 is not supported");
    }
    detail::LevelGuard guard(reach + 1);

    std::map<const Node*, Expr> adjoint;
    adjoint.emplace(&f.node(), constant(1.0));

    auto accumulate = [&adjoint](const NodeRef& target, const Expr& contribution) {
        auto it = adjoint.find(target.get());
        if (it == adjoint.end()) {
            adjoint.emplace(target.get(), contribution);
        } else {
            it->second = add(it->second, contribution);
        }
    };

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const NodeRef& n = *it;
        auto found = adjoint.find(n.get());
        if (found == adjoint.end()) continue;
        if (stops.count(n.get())) continue;
        const Expr a = found->second;
        const auto& in = n->inputs;
        const Expr self(n);
        switch (n->op) {
            case OpKind::kConst:
            case OpKind::kVar:
            case OpKind::kStep:
                break;
            case OpKind::kAdd:
                accumulate(in[0], detail::reduce_to(a, in[0]->shape));
                accumulate(in[1], detail::reduce_to(a, in[1]->shape));
                break;
            case OpKind::kSub:
                accumulate(in[0], detail::reduce_to(a, in[0]->shape));
                accumulate(in[1], detail::reduce_to(neg(a), in[1]->shape));
                break;
            case OpKind::kMul:
                accumulate(in[0], detail::reduce_to(mul(a, Expr(in[1])), in[0]->shape));
                accumulate(in[1], detail::reduce_to(mul(a, Expr(in[0])), in[1]->shape));
                break;
            case OpKind::kDiv:
                accumulate(in[0], detail::reduce_to(div(a, Expr(in[1])), in[0]->shape));
                accumulate(in[1], detail::reduce_to(neg(div(mul(a, self), Expr(in[1]))),
                                                    in[1]->shape));
                break;
            case OpKind::kNeg:
                accumulate(in[0], neg(a));
                break;
            case OpKind::kMatVec:
                accumulate(in[0], outer(a, Expr(in[1])));
                accumulate(in[1], mat_t_vec(Expr(in[0]), a));
                break;
            case OpKind::kMatTVec:
                accumulate(in[0], outer(Expr(in[1]), a));
                accumulate(in[1], matvec(Expr(in[0]), a));
                break;
            case OpKind::kOuter:
                accumulate(in[0], matvec(a, Expr(in[1])));
                accumulate(in[1], mat_t_vec(a, Expr(in[0])));
                break;
            case OpKind::kRelu:
                accumulate(in[0], mul(a, step(Expr(in[0]))));
                break;
            case OpKind::kExp:
                accumulate(in[0], mul(a, self));
                break;
            case OpKind::kLog:
                accumulate(in[0], div(a, Expr(in[0])));
                break;
            case OpKind::kSqNorm:
                accumulate(in[0], mul(mul(constant(2.0), a), Expr(in[0])));
                break;
            case OpKind::kSum:
                accumulate(in[0], broadcast(a, in[0]->shape));
                break;
            case OpKind::kDot:
                accumulate(in[0], mul(a, Expr(in[1])));
                accumulate(in[1], mul(a, Expr(in[0])));
                break;
            case OpKind::kLogSumExp:
                accumulate(in[0], mul(a, exp(sub(Expr(in[0]), self))));
                break;
            case OpKind::kStack:
                for (std::size_t i = 0; i < in.size(); ++i) {
                    accumulate(in[i], index(a, i));
                }
                break;
            case OpKind::kIndex:
                accumulate(in[0], mul(a, detail::onehot(n->slot, in[0]->shape[0])));
                break;
            case OpKind::kRow:
                accumulate(in[0], outer(detail::onehot(n->slot, in[0]->shape[0]), a));
                break;
            case OpKind::kBroadcast:
                accumulate(in[0], sum(a));
                break;
        }
    }

    std::vector<Expr> results;
    results.reserve(wrt.size());
    for (const Expr& w : wrt) {
        auto found = adjoint.find(&w.node());
        if (found == adjoint.end()) {
            results.push_back(constant(Array::zeros(w.shape())));
        } else {
            results.push_back(found->second);
        }
    }
    return results;
}

inline Expr gradient_of(const Expr& f, const Expr& wrt, std::span<const Expr> stop = {}) {
    const Expr w[] = {wrt};
    return gradients(f, w, stop)[0];
}

// Symbolic gradients with respect to named variables, one expression per
// name, adjoints summed over every occurrence of the name in the graph.
inline std::vector<Expr> named_gradient_exprs(const Expr& f,
                                              std::span<const std::string> names) {
    const auto order = detail::topo_order(f.ref(), {});
    std::map<std::string, std::vector<Expr>, std::less<>> var_nodes;
    for (const auto& n : order) {
        if (n->op == OpKind::kVar) var_nodes[n->name].push_back(Expr(n));
    }
    std::vector<Expr> targets;
    std::vector<std::size_t> starts;
    for (const std::string& name : names) {
        auto it = var_nodes.find(name);
        if (it == var_nodes.end()) {
            throw std::invalid_argument("named_gradient_exprs: variable '" + name +
                                        "' does not appear in the expression");
        }
        starts.push_back(targets.size());
        for (const Expr& v : it->second) targets.push_back(v);
    }
    starts.push_back(targets.size());

    const auto grads = gradients(f, targets);
    std::vector<Expr> result;
    result.reserve(names.size());
    for (std::size_t i = 0; i + 1 < starts.size(); ++i) {
        Expr acc = grads[starts[i]];
        for (std::size_t j = starts[i] + 1; j < starts[i + 1]; ++j) acc = add(acc, grads[j]);
        result.push_back(acc);
    }
    return result;
}

// --- evaluation -------------------------------------------------------------

using Bindings = std::map<std::string, Array, std::less<>>;

namespace detail {

inline void exec_node(const Node& n, std::span<const Array* const> in, Array& out) {
    switch (n.op) {
        case OpKind::kConst:
        case OpKind::kVar:
            throw std::logic_error("exec_node on a leaf");
        case OpKind::kAdd:
        case OpKind::kSub:
        case OpKind::kMul:
        case OpKind::kDiv: {
            const Array& a = *in[0];
            const Array& b = *in[1];
            const std::size_t an = a.size() == 1 ? 0 : 1;
            const std::size_t bn = b.size() == 1 ? 0 : 1;
            const std::size_t count = out.size();
            const double* pa = a.data();
            const double* pb = b.data();
            double* po = out.data();
            switch (n.op) {
                case OpKind::kAdd:
                    for (std::size_t i = 0; i < count; ++i) po[i] = pa[i * an] + pb[i * bn];
                    break;
                case OpKind::kSub:
                    for (std::size_t i = 0; i < count; ++i) po[i] = pa[i * an] - pb[i * bn];
                    break;
                case OpKind::kMul:
                    for (std::size_t i = 0; i < count; ++i) po[i] = pa[i * an] * pb[i * bn];
                    break;
                default:
                    for (std::size_t i = 0; i < count; ++i) po[i] = pa[i * an] / pb[i * bn];
                    break;
            }
            break;
        }
        case OpKind::kNeg: {
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = -(*in[0])[i];
            break;
        }
        case OpKind::kMatVec: {
            const Array& w = *in[0];
            const Array& x = *in[1];
            const std::size_t r = w.shape()[0], c = w.shape()[1];
            const double* pw = w.data();
            for (std::size_t i = 0; i < r; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < c; ++j) acc += pw[i * c + j] * x[j];
                out[i] = acc;
            }
            break;
        }
        case OpKind::kMatTVec: {
            const Array& w = *in[0];
            const Array& y = *in[1];
            const std::size_t r = w.shape()[0], c = w.shape()[1];
            const double* pw = w.data();
            out.fill(0.0);
            for (std::size_t i = 0; i < r; ++i) {
                const double yi = y[i];
                for (std::size_t j = 0; j < c; ++j) out[j] += pw[i * c + j] * yi;
            }
            break;
        }
        case OpKind::kOuter: {
            const Array& u = *in[0];
            const Array& v = *in[1];
            const std::size_t r = u.size(), c = v.size();
            double* po = out.data();
            for (std::size_t i = 0; i < r; ++i) {
                const double ui = u[i];
                for (std::size_t j = 0; j < c; ++j) po[i * c + j] = ui * v[j];
            }
            break;
        }
        case OpKind::kRelu:
            for (std::size_t i = 0; i < out.size(); ++i) {
                const double x = (*in[0])[i];
                out[i] = x > 0.0 ? x : 0.0;
            }
            break;
        case OpKind::kStep:
            for (std::size_t i = 0; i < out.size(); ++i) {
                out[i] = (*in[0])[i] > 0.0 ? 1.0 : 0.0;
            }
            break;
        case OpKind::kExp:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp((*in[0])[i]);
            break;
        case OpKind::kLog:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log((*in[0])[i]);
            break;
        case OpKind::kSqNorm: {
            double acc = 0.0;
            for (double x : *in[0]) acc += x * x;
            out[0] = acc;
            break;
        }
        case OpKind::kSum: {
            double acc = 0.0;
            for (double x : *in[0]) acc += x;
            out[0] = acc;
            break;
        }
        case OpKind::kDot: {
            double acc = 0.0;
            const Array& u = *in[0];
            const Array& v = *in[1];
            for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
            out[0] = acc;
            break;
        }
        case OpKind::kLogSumExp: {
            const Array& v = *in[0];
            double m = v[0];
            for (double x : v) m = std::max(m, x);
            double acc = 0.0;
            for (double x : v) acc += std::exp(x - m);
            out[0] = m + std::log(acc);
            break;
        }
        case OpKind::kStack:
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = (*in[i])[0];
            break;
        case OpKind::kIndex:
            out[0] = (*in[0])[n.slot];
            break;
        case OpKind::kRow: {
            const Array& m = *in[0];
            const std::size_t c = m.shape()[1];
            for (std::size_t j = 0; j < c; ++j) out[j] = m[n.slot * c + j];
            break;
        }
        case OpKind::kBroadcast:
            out.fill((*in[0])[0]);
            break;
    }
}

}  // namespace detail

// One-shot memoized evaluation of several expressions over shared bindings.
inline std::vector<Array> eval_many(std::span<const Expr> outputs, const Bindings& bindings) {
    std::map<const Node*, Array> memo;
    std::vector<std::pair<NodeRef, std::size_t>> work;
    std::set<const Node*> expanded;

    auto value_of = [&memo](const NodeRef& n) -> const Array& { return memo.at(n.get()); };

    for (const Expr& out : outputs) {
        if (memo.count(&out.node())) continue;
        work.emplace_back(out.ref(), 0);
        while (!work.empty()) {
            auto& [node, next_child] = work.back();
            if (memo.count(node.get())) {
                work.pop_back();
                continue;
            }
            if (next_child < node->inputs.size()) {
                NodeRef child = node->inputs[next_child++];
                if (!memo.count(child.get())) work.emplace_back(std::move(child), 0);
                continue;
            }
            Array result(node->shape);
            if (node->op == OpKind::kConst) {
                result = node->value;
            } else if (node->op == OpKind::kVar) {
                auto found = bindings.find(node->name);
                if (found == bindings.end()) {
                    throw std::invalid_argument("eval: unbound variable '" + node->name + "'");
                }
                if (found->second.shape() != node->shape) {
                    throw std::invalid_argument("eval: variable '" + node->name + "' bound with shape " +
                                                shape_str(found->second.shape()) + ", declared " +
                                                shape_str(node->shape));
                }
                result = found->second;
            } else {
                std::vector<const Array*> ins;
                ins.reserve(node->inputs.size());
                for (const auto& c : node->inputs) ins.push_back(&value_of(c));
                detail::exec_node(*node, ins, result);
            }
            if (!result.all_finite()) {
                throw std::runtime_error(std::string("eval: non-finite result in ") +
                                         op_name(node->op));
            }
            memo.emplace(node.get(), std::move(result));
            work.pop_back();
        }
        (void)expanded;
    }

    std::vector<Array> results;
    results.reserve(outputs.size());
    for (const Expr& out : outputs) results.push_back(memo.at(&out.node()));
    return results;
}

inline Array eval(const Expr& e, const Bindings& bindings) {
    const Expr outs[] = {e};
    return eval_many(outs, bindings)[0];
}

inline double eval_scalar(const Expr& e, const Bindings& bindings) {
    if (!e.is_scalar()) {
        throw std::invalid_argument("eval_scalar: expression has shape " + shape_str(e.shape()));
    }
    return eval(e, bindings).item();
}

// Gradient of a scalar expression with respect to named variables. Adjoints
// of all nodes carrying the same name are summed; names absent from the graph
// yield zeros shaped like their binding.
inline std::map<std::string, Array> gradient(const Expr& f,
                                             std::span<const std::string> wrt,
                                             const Bindings& bindings) {
    const auto order = detail::topo_order(f.ref(), {});
    std::map<std::string, std::vector<Expr>, std::less<>> var_nodes;
    for (const auto& n : order) {
        if (n->op == OpKind::kVar) var_nodes[n->name].push_back(Expr(n));
    }

    std::vector<Expr> targets;
    std::vector<std::pair<std::string, std::size_t>> spans;  // name -> (start, count)
    std::vector<std::size_t> starts;
    for (const std::string& name : wrt) {
        auto it = var_nodes.find(name);
        starts.push_back(targets.size());
        if (it != var_nodes.end()) {
            for (const Expr& v : it->second) targets.push_back(v);
        }
        spans.emplace_back(name, targets.size() - starts.back());
    }

    const auto grads = gradients(f, targets);
    std::vector<Expr> to_eval(grads.begin(), grads.end());
    const auto values = eval_many(to_eval, bindings);

    std::map<std::string, Array> result;
    for (std::size_t i = 0; i < spans.size(); ++i) {
        const auto& [name, count] = spans[i];
        if (count == 0) {
            auto found = bindings.find(name);
            if (found == bindings.end()) {
                throw std::invalid_argument("gradient: variable '" + name +
                                            "' neither in graph nor bound");
            }
            result.emplace(name, Array::zeros(found->second.shape()));
            continue;
        }
        Array acc = values[starts[i]];
        for (std::size_t j = 1; j < count; ++j) {
            const Array& extra = values[starts[i] + j];
            for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += extra[k];
        }
        result.emplace(name, std::move(acc));
    }
    return result;
}

// Central-difference approximation of `gradient`, the oracle used by the
// gradient checks. No step-size correction is attempted.
inline std::map<std::string, Array> finite_difference(const Expr& f,
                                                      std::span<const std::string> wrt,
                                                      const Bindings& bindings,
                                                      double step) {
    if (!(step > 0.0)) throw std::invalid_argument("finite_difference: step must be > 0");
    std::map<std::string, Array> result;
    Bindings local = bindings;
    for (const std::string& name : wrt) {
        auto found = local.find(name);
        if (found == local.end()) {
            throw std::invalid_argument("finite_difference: variable '" + name + "' not bound");
        }
        Array grad(found->second.shape());
        for (std::size_t i = 0; i < grad.size(); ++i) {
            const double saved = found->second[i];
            found->second[i] = saved + step;
            const double hi = eval_scalar(f, local);
            found->second[i] = saved - step;
            const double lo = eval_scalar(f, local);
            found->second[i] = saved;
            grad[i] = (hi - lo) / (2.0 * step);
        }
        result.emplace(name, std::move(grad));
    }
    return result;
}

// --- compiled plan ----------------------------------------------------------

// Preallocated execution schedule for repeated evaluation of a fixed set of
// outputs. Variables are bound by name (bindings persist across runs), so a
// training loop can bind parameters once per step and stream samples through.
class Plan {
public:
    explicit Plan(std::vector<Expr> outputs, bool check_finite = true)
        : check_finite_(check_finite) {
        std::set<const Node*> indexed;
        for (const Expr& out : outputs) {
            if (!out) throw std::invalid_argument("Plan: empty output expression");
            for (const auto& n : detail::topo_order(out.ref(), {})) {
                if (!indexed.insert(n.get()).second) continue;
                const std::size_t slot = buffers_.size();
                slot_of_[n.get()] = slot;
                nodes_.push_back(n);
                if (n->op == OpKind::kConst) {
                    buffers_.push_back(n->value);
                } else {
                    buffers_.emplace_back(n->shape);
                }
                if (n->op == OpKind::kVar) {
                    var_slots_[n->name].push_back(slot);
                    unbound_.insert(n->name);
                } else if (n->op != OpKind::kConst) {
                    Step s;
                    s.node = n.get();
                    s.out = slot;
                    for (const auto& c : n->inputs) s.args.push_back(slot_of_.at(c.get()));
                    steps_.push_back(std::move(s));
                }
            }
            outputs_.push_back(slot_of_.at(&out.node()));
        }
    }

    bool has_variable(std::string_view name) const {
        return var_slots_.find(name) != var_slots_.end();
    }

    std::vector<std::string> variable_names() const {
        std::vector<std::string> names;
        names.reserve(var_slots_.size());
        for (const auto& [name, slots] : var_slots_) names.push_back(name);
        return names;
    }

    const Shape& variable_shape(std::string_view name) const {
        return buffers_[slots_for(name).front()].shape();
    }

    void bind(std::string_view name, std::span<const double> values) {
        for (std::size_t slot : slots_for(name)) {
            Array& buf = buffers_[slot];
            if (values.size() != buf.size()) {
                throw std::invalid_argument("Plan::bind: '" + std::string(name) + "' expects " +
                                            std::to_string(buf.size()) + " values, got " +
                                            std::to_string(values.size()));
            }
            std::copy(values.begin(), values.end(), buf.data());
        }
        unbound_.erase(std::string(name));
    }

    void bind(std::string_view name, const Array& value) { bind(name, value.view()); }

    void run() {
        if (!unbound_.empty()) {
            throw std::invalid_argument("Plan::run: variable '" + *unbound_.begin() +
                                        "' is not bound");
        }
        args_.clear();
        for (const Step& s : steps_) {
            args_.clear();
            for (std::size_t a : s.args) args_.push_back(&buffers_[a]);
            detail::exec_node(*s.node, args_, buffers_[s.out]);
            if (check_finite_ && !buffers_[s.out].all_finite()) {
                throw std::runtime_error(std::string("Plan::run: non-finite result in ") +
                                         op_name(s.node->op));
            }
        }
    }

    std::size_t output_count() const { return outputs_.size(); }
    const Array& output(std::size_t i) const { return buffers_[outputs_.at(i)]; }
    double output_scalar(std::size_t i) const { return output(i).item(); }

private:
    struct Step {
        const Node* node;
        std::vector<std::size_t> args;
        std::size_t out;
    };

    const std::vector<std::size_t>& slots_for(std::string_view name) const {
        auto it = var_slots_.find(name);
        if (it == var_slots_.end()) {
            throw std::invalid_argument("Plan: no variable named '" + std::string(name) + "'");
        }
        return it->second;
    }

    std::vector<NodeRef> nodes_;  // keeps the graph alive
    std::vector<Array> buffers_;
    std::vector<Step> steps_;
    std::map<const Node*, std::size_t> slot_of_;
    std::map<std::string, std::vector<std::size_t>, std::less<>> var_slots_;
    std::set<std::string> unbound_;
    std::vector<std::size_t> outputs_;
    std::vector<const Array*> args_;
    bool check_finite_;
};

}  // namespace fae::ad
