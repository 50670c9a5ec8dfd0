#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace oaflow {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

[[noreturn]] inline void dim_error(const std::string& where, const Shape& expected,
                                   const Shape& actual) {
    throw std::invalid_argument(where + ": expected shape " + shape_str(expected) +
                                ", got " + shape_str(actual));
}

// One node of the recorded computation. Gradients of non-leaf nodes are
// scratch space valid only during a backward pass; leaf gradients accumulate
// across passes until cleared.
template <class Real>
struct TensorNode {
    Shape shape;
    std::vector<Real> val;
    std::vector<Real> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;  // empty for leaves

    bool is_leaf() const { return !backprop; }
};

template <class Real>
class Tensor {
public:
    using Node = TensorNode<Real>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->val.assign(shape_numel(n->shape), Real(0));
        return Tensor(n);
    }

    static Tensor constant(Shape shape, std::vector<Real> data) {
        if (shape_numel(shape) != data.size())
            throw std::invalid_argument("Tensor::constant: shape/data size mismatch");
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->val = std::move(data);
        return Tensor(n);
    }

    static Tensor scalar(Real v) { return constant({1}, {v}); }

    static Tensor leaf(Shape shape, std::vector<Real> data, bool requires_grad) {
        Tensor t = constant(std::move(shape), std::move(data));
        t.n_->requires_grad = requires_grad;
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    std::size_t numel() const { return n_->val.size(); }
    std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
    bool requires_grad() const { return n_->requires_grad; }

    const std::vector<Real>& value() const { return n_->val; }
    // In-place mutation is only meaningful for leaves (optimizer updates,
    // finite-difference probes); the graph above a mutated leaf is stale.
    std::vector<Real>& mutable_value() { return n_->val; }

    const std::vector<Real>& grad() const {
        if (n_->grad.size() != n_->val.size())
            throw std::runtime_error("Tensor::grad: no gradient recorded");
        return n_->grad;
    }
    bool has_grad() const { return n_->grad.size() == n_->val.size(); }
    void clear_grad() { n_->grad.assign(n_->val.size(), Real(0)); }

    Real item() const {
        if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor is not scalar");
        return n_->val[0];
    }

    std::shared_ptr<Node> node() const { return n_; }

private:
    std::shared_ptr<Node> n_;
};

namespace detail {

template <class Real>
std::shared_ptr<TensorNode<Real>> make_op_node(
    Shape shape, std::vector<Real> val,
    std::vector<std::shared_ptr<TensorNode<Real>>> parents,
    std::function<void(TensorNode<Real>&)> backprop) {
    auto n = std::make_shared<TensorNode<Real>>();
    n->shape = std::move(shape);
    n->val = std::move(val);
    n->parents = std::move(parents);
    for (auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backprop = std::move(backprop);
    return n;
}

template <class Real>
void accum(TensorNode<Real>& p, std::size_t i, Real v) {
    p.grad[i] += v;
}

template <class Real>
void ensure_grad(const std::shared_ptr<TensorNode<Real>>& p) {
    if (p->grad.size() != p->val.size()) p->grad.assign(p->val.size(), Real(0));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops (same shape)
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) dim_error("add", a.shape(), b.shape());
    auto an = a.node(), bn = b.node();
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->val[i] + bn->val[i];
    auto bp = [an, bn](TensorNode<Real>& self) {
        if (an->requires_grad) {
            detail::ensure_grad(an);
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            detail::ensure_grad(bn);
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
        }
    };
    return Tensor<Real>(detail::make_op_node<Real>(a.shape(), std::move(out), {an, bn}, bp));
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) dim_error("sub", a.shape(), b.shape());
    auto an = a.node(), bn = b.node();
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->val[i] - bn->val[i];
    auto bp = [an, bn](TensorNode<Real>& self) {
        if (an->requires_grad) {
            detail::ensure_grad(an);
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            detail::ensure_grad(bn);
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
        }
    };
    return Tensor<Real>(detail::make_op_node<Real>(a.shape(), std::move(out), {an, bn}, bp));
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) dim_error("mul", a.shape(), b.shape());
    auto an = a.node(), bn = b.node();
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->val[i] * bn->val[i];
    auto bp = [an, bn](TensorNode<Real>& self) {
        if (an->requires_grad) {
            detail::ensure_grad(an);
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * bn->val[i];
        }
        if (bn->requires_grad) {
            detail::ensure_grad(bn);
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] += self.grad[i] * an->val[i];
        }
    };
    return Tensor<Real>(detail::make_op_node<Real>(a.shape(), std::move(out), {an, bn}, bp));
}

template <class Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape()) dim_error("div", a.shape(), b.shape());
    auto an = a.node(), bn = b.node();
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->val[i] / bn->val[i];
    auto bp = [an, bn](TensorNode<Real>& self) {
        if (an->requires_grad) {
            detail::ensure_grad(an);
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] / bn->val[i];
        }
        if (bn->requires_grad) {
            detail::ensure_grad(bn);
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] -= self.grad[i] * an->val[i] / (bn->val[i] * bn->val[i]);
        }
    };
    return Tensor<Real>(detail::make_op_node<Real>(a.shape(), std::move(out), {an, bn}, bp));
}

// ---------------------------------------------------------------------------
// scalar (compile-time constant) variants
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> add_scalar(const Tensor<Real>& a, Real s) {
    auto an = a.node();
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->val[i] + s;
    auto bp = [an](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        detail::ensure_grad(an);
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    };
    return Tensor<Real>(detail::make_op_node<Real>(a.shape(), std::move(out), {an}, bp));
}

template <class Real>
Tensor<Real> mul_scalar(const Tensor<Real>& a, Real s) {
    auto an = a.node();
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->val[i] * s;
    auto bp = [an, s](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        detail::ensure_grad(an);
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
    };
    return Tensor<Real>(detail::make_op_node<Real>(a.shape(), std::move(out), {an}, bp));
}

template <class Real>
Tensor<Real> neg(const Tensor<Real>& a) {
    return mul_scalar(a, Real(-1));
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <class Real, class F, class DF>
Tensor<Real> unary_op(const Tensor<Real>& a, F f, DF df, const char* /*name*/) {
    auto an = a.node();
    std::vector<Real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(an->val[i]);
    auto bp = [an, df](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        detail::ensure_grad(an);
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] * df(an->val[i], self.val[i]);
    };
    return Tensor<Real>(detail::make_op_node<Real>(a.shape(), std::move(out), {an}, bp));
}

}  // namespace detail

template <class Real>
Tensor<Real> relu(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return x > Real(0) ? x : Real(0); },
        [](Real x, Real) { return x > Real(0) ? Real(1) : Real(0); }, "relu");
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
    return detail::unary_op(
        a,
        [](Real x) {
            // evaluate in the stable branch for either sign
            if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
            Real e = std::exp(x);
            return e / (Real(1) + e);
        },
        [](Real, Real y) { return y * (Real(1) - y); }, "sigmoid");
}

template <class Real>
Tensor<Real> exp_t(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; }, "exp");
}

template <class Real>
Tensor<Real> log_t(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return std::log(x); }, [](Real x, Real) { return Real(1) / x; },
        "log");
}

template <class Real>
Tensor<Real> square(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return x * x; }, [](Real x, Real) { return Real(2) * x; },
        "square");
}

// subgradient 0 at x == 0 so exact minima stay finite
template <class Real>
Tensor<Real> sqrt_t(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return std::sqrt(x); },
        [](Real, Real y) { return y > Real(0) ? Real(1) / (Real(2) * y) : Real(0); },
        "sqrt");
}

template <class Real>
Tensor<Real> abs_t(const Tensor<Real>& a) {
    return detail::unary_op(
        a, [](Real x) { return std::abs(x); },
        [](Real x, Real) { return x > Real(0) ? Real(1) : (x < Real(0) ? Real(-1) : Real(0)); },
        "abs");
}

template <class Real>
Tensor<Real> clamp(const Tensor<Real>& a, Real lo, Real hi) {
    return detail::unary_op(
        a, [lo, hi](Real x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](Real x, Real) { return (x >= lo && x <= hi) ? Real(1) : Real(0); },
        "clamp");
}

// test hook: arbitrary unary with caller-supplied derivative
template <class Real>
Tensor<Real> custom_unary(const Tensor<Real>& a, std::function<Real(Real)> f,
                          std::function<Real(Real)> df) {
    return detail::unary_op(
        a, [f](Real x) { return f(x); }, [df](Real x, Real) { return df(x); }, "custom");
}

// ---------------------------------------------------------------------------
// matmul / broadcast helpers
// ---------------------------------------------------------------------------

// a: [R, Cin], b: [Cin, Cout] -> [R, Cout]
template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    const std::size_t R = a.shape()[0], K = a.shape()[1], C = b.shape()[1];
    auto an = a.node(), bn = b.node();
    std::vector<Real> out(R * C, Real(0));
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t k = 0; k < K; ++k) {
            const Real av = an->val[r * K + k];
            if (av == Real(0)) continue;
            const Real* brow = bn->val.data() + k * C;
            Real* orow = out.data() + r * C;
            for (std::size_t c = 0; c < C; ++c) orow[c] += av * brow[c];
        }
    auto bp = [an, bn, R, K, C](TensorNode<Real>& self) {
        if (an->requires_grad) {
            detail::ensure_grad(an);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t k = 0; k < K; ++k) {
                    Real s = 0;
                    const Real* grow = self.grad.data() + r * C;
                    const Real* brow = bn->val.data() + k * C;
                    for (std::size_t c = 0; c < C; ++c) s += grow[c] * brow[c];
                    an->grad[r * K + k] += s;
                }
        }
        if (bn->requires_grad) {
            detail::ensure_grad(bn);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t k = 0; k < K; ++k) {
                    const Real av = an->val[r * K + k];
                    if (av == Real(0)) continue;
                    const Real* grow = self.grad.data() + r * C;
                    Real* brow = bn->grad.data() + k * C;
                    for (std::size_t c = 0; c < C; ++c) brow[c] += av * grow[c];
                }
        }
    };
    return Tensor<Real>(detail::make_op_node<Real>({R, C}, std::move(out), {an, bn}, bp));
}

// x: [..., C], v: [C] or [1, C]; adds v to every row
template <class Real>
Tensor<Real> add_rowvec(const Tensor<Real>& x, const Tensor<Real>& v) {
    const std::size_t C = x.shape().back();
    if (v.numel() != C)
        throw std::invalid_argument("add_rowvec: vector length " + std::to_string(v.numel()) +
                                    " != last dim " + std::to_string(C));
    auto xn = x.node(), vn = v.node();
    const std::size_t rows = x.numel() / C;
    std::vector<Real> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < C; ++c) out[r * C + c] = xn->val[r * C + c] + vn->val[c];
    auto bp = [xn, vn, rows, C](TensorNode<Real>& self) {
        if (xn->requires_grad) {
            detail::ensure_grad(xn);
            for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
        }
        if (vn->requires_grad) {
            detail::ensure_grad(vn);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < C; ++c) vn->grad[c] += self.grad[r * C + c];
        }
    };
    return Tensor<Real>(detail::make_op_node<Real>(x.shape(), std::move(out), {xn, vn}, bp));
}

// x: [..., C], m: [..., 1] (same leading dims); scales each row of x by m
template <class Real>
Tensor<Real> mul_rowwise(const Tensor<Real>& x, const Tensor<Real>& m) {
    const std::size_t C = x.shape().back();
    const std::size_t rows = x.numel() / C;
    Shape expect = x.shape();
    expect.back() = 1;
    if (m.shape() != expect) dim_error("mul_rowwise: mask", expect, m.shape());
    auto xn = x.node(), mn = m.node();
    std::vector<Real> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const Real mv = mn->val[r];
        for (std::size_t c = 0; c < C; ++c) out[r * C + c] = xn->val[r * C + c] * mv;
    }
    auto bp = [xn, mn, rows, C](TensorNode<Real>& self) {
        if (xn->requires_grad) {
            detail::ensure_grad(xn);
            for (std::size_t r = 0; r < rows; ++r) {
                const Real mv = mn->val[r];
                for (std::size_t c = 0; c < C; ++c)
                    xn->grad[r * C + c] += self.grad[r * C + c] * mv;
            }
        }
        if (mn->requires_grad) {
            detail::ensure_grad(mn);
            for (std::size_t r = 0; r < rows; ++r) {
                Real s = 0;
                for (std::size_t c = 0; c < C; ++c)
                    s += self.grad[r * C + c] * xn->val[r * C + c];
                mn->grad[r] += s;
            }
        }
    };
    return Tensor<Real>(detail::make_op_node<Real>(x.shape(), std::move(out), {xn, mn}, bp));
}

// broadcast a scalar tensor ([1]) to an arbitrary shape
template <class Real>
Tensor<Real> expand_scalar(const Tensor<Real>& s, Shape shape) {
    if (s.numel() != 1) throw std::invalid_argument("expand_scalar: source is not scalar");
    auto sn = s.node();
    std::vector<Real> out(shape_numel(shape), sn->val[0]);
    auto bp = [sn](TensorNode<Real>& self) {
        if (!sn->requires_grad) return;
        detail::ensure_grad(sn);
        Real acc = 0;
        for (Real g : self.grad) acc += g;
        sn->grad[0] += acc;
    };
    return Tensor<Real>(detail::make_op_node<Real>(std::move(shape), std::move(out), {sn}, bp));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> sum_all(const Tensor<Real>& a) {
    auto an = a.node();
    Real s = 0;
    for (Real v : an->val) s += v;
    auto bp = [an](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        detail::ensure_grad(an);
        const Real g = self.grad[0];
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    };
    return Tensor<Real>(detail::make_op_node<Real>({1}, {s}, {an}, bp));
}

template <class Real>
Tensor<Real> mean_all(const Tensor<Real>& a) {
    return mul_scalar(sum_all(a), Real(1) / Real(a.numel()));
}

namespace detail {

inline void axis_strides(const Shape& s, std::size_t axis, std::size_t& outer,
                         std::size_t& n, std::size_t& inner) {
    if (axis >= s.size()) throw std::invalid_argument("axis out of range");
    outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    n = s[axis];
    inner = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
    Shape r;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) r.push_back(s[i]);
    if (r.empty()) r.push_back(1);
    return r;
}

}  // namespace detail

template <class Real>
Tensor<Real> sum_axis(const Tensor<Real>& a, std::size_t axis) {
    std::size_t outer, n, inner;
    detail::axis_strides(a.shape(), axis, outer, n, inner);
    auto an = a.node();
    std::vector<Real> out(outer * inner, Real(0));
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t i = 0; i < inner; ++i)
                out[o * inner + i] += an->val[(o * n + k) * inner + i];
    auto bp = [an, outer, n, inner](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        detail::ensure_grad(an);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t k = 0; k < n; ++k)
                for (std::size_t i = 0; i < inner; ++i)
                    an->grad[(o * n + k) * inner + i] += self.grad[o * inner + i];
    };
    return Tensor<Real>(detail::make_op_node<Real>(detail::drop_axis(a.shape(), axis),
                                                   std::move(out), {an}, bp));
}

// max along an axis; gradient routes to the (first) argmax
template <class Real>
Tensor<Real> max_axis(const Tensor<Real>& a, std::size_t axis) {
    std::size_t outer, n, inner;
    detail::axis_strides(a.shape(), axis, outer, n, inner);
    if (n == 0) throw std::invalid_argument("max_axis: empty axis");
    auto an = a.node();
    std::vector<Real> out(outer * inner);
    auto arg = std::make_shared<std::vector<std::size_t>>(outer * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            Real best = an->val[(o * n) * inner + i];
            std::size_t bk = 0;
            for (std::size_t k = 1; k < n; ++k) {
                Real v = an->val[(o * n + k) * inner + i];
                if (v > best) {
                    best = v;
                    bk = k;
                }
            }
            out[o * inner + i] = best;
            (*arg)[o * inner + i] = bk;
        }
    auto bp = [an, arg, outer, n, inner](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        detail::ensure_grad(an);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t k = (*arg)[o * inner + i];
                an->grad[(o * n + k) * inner + i] += self.grad[o * inner + i];
            }
    };
    return Tensor<Real>(detail::make_op_node<Real>(detail::drop_axis(a.shape(), axis),
                                                   std::move(out), {an}, bp));
}

template <class Real>
Tensor<Real> softmax(const Tensor<Real>& a, std::size_t axis) {
    std::size_t outer, n, inner;
    detail::axis_strides(a.shape(), axis, outer, n, inner);
    auto an = a.node();
    std::vector<Real> out(a.numel());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            Real mx = -std::numeric_limits<Real>::infinity();
            for (std::size_t k = 0; k < n; ++k)
                mx = std::max(mx, an->val[(o * n + k) * inner + i]);
            Real z = 0;
            for (std::size_t k = 0; k < n; ++k) {
                Real e = std::exp(an->val[(o * n + k) * inner + i] - mx);
                out[(o * n + k) * inner + i] = e;
                z += e;
            }
            for (std::size_t k = 0; k < n; ++k) out[(o * n + k) * inner + i] /= z;
        }
    auto bp = [an, outer, n, inner](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        detail::ensure_grad(an);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                Real dot = 0;
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t idx = (o * n + k) * inner + i;
                    dot += self.grad[idx] * self.val[idx];
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t idx = (o * n + k) * inner + i;
                    an->grad[idx] += self.val[idx] * (self.grad[idx] - dot);
                }
            }
    };
    return Tensor<Real>(detail::make_op_node<Real>(a.shape(), std::move(out), {an}, bp));
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) dim_error("reshape", shape, a.shape());
    auto an = a.node();
    std::vector<Real> out = an->val;
    auto bp = [an](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        detail::ensure_grad(an);
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    };
    return Tensor<Real>(detail::make_op_node<Real>(std::move(shape), std::move(out), {an}, bp));
}

// concatenate along the last axis; all inputs share leading dims
template <class Real>
Tensor<Real> concat_last(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_last: no inputs");
    Shape lead = parts[0].shape();
    lead.pop_back();
    std::size_t rows = 1;
    for (auto d : lead) rows *= d;
    std::size_t Ctot = 0;
    std::vector<std::shared_ptr<TensorNode<Real>>> ps;
    std::vector<std::size_t> widths;
    for (const auto& t : parts) {
        Shape l = t.shape();
        std::size_t c = l.back();
        l.pop_back();
        if (l != lead)
            throw std::invalid_argument("concat_last: leading dims mismatch " +
                                        shape_str(t.shape()));
        Ctot += c;
        widths.push_back(c);
        ps.push_back(t.node());
    }
    std::vector<Real> out(rows * Ctot);
    std::size_t off = 0;
    for (std::size_t p = 0; p < ps.size(); ++p) {
        const std::size_t c = widths[p];
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j)
                out[r * Ctot + off + j] = ps[p]->val[r * c + j];
        off += c;
    }
    Shape oshape = lead;
    oshape.push_back(Ctot);
    auto bp = [ps, widths, rows, Ctot](TensorNode<Real>& self) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < ps.size(); ++p) {
            const std::size_t c = widths[p];
            if (ps[p]->requires_grad) {
                detail::ensure_grad(ps[p]);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < c; ++j)
                        ps[p]->grad[r * c + j] += self.grad[r * Ctot + off + j];
            }
            off += c;
        }
    };
    return Tensor<Real>(detail::make_op_node<Real>(std::move(oshape), std::move(out), ps, bp));
}

template <class Real>
Tensor<Real> slice_last(const Tensor<Real>& a, std::size_t start, std::size_t len) {
    const std::size_t C = a.shape().back();
    if (start + len > C) throw std::invalid_argument("slice_last: range out of bounds");
    auto an = a.node();
    const std::size_t rows = a.numel() / C;
    std::vector<Real> out(rows * len);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j) out[r * len + j] = an->val[r * C + start + j];
    Shape oshape = a.shape();
    oshape.back() = len;
    auto bp = [an, rows, C, start, len](TensorNode<Real>& self) {
        if (!an->requires_grad) return;
        detail::ensure_grad(an);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < len; ++j)
                an->grad[r * C + start + j] += self.grad[r * len + j];
    };
    return Tensor<Real>(detail::make_op_node<Real>(std::move(oshape), std::move(out), {an}, bp));
}

// rows of x ([M, C]) gathered into [lead..., C]; idx has prod(lead) entries
template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, const std::vector<std::size_t>& idx,
                         Shape lead) {
    if (x.shape().size() != 2)
        throw std::invalid_argument("gather_rows: source must be rank 2");
    const std::size_t M = x.shape()[0], C = x.shape()[1];
    if (shape_numel(lead) != idx.size())
        throw std::invalid_argument("gather_rows: index count does not match lead shape");
    for (auto i : idx)
        if (i >= M) throw std::invalid_argument("gather_rows: index out of range");
    auto xn = x.node();
    std::vector<Real> out(idx.size() * C);
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < C; ++c) out[r * C + c] = xn->val[idx[r] * C + c];
    Shape oshape = lead;
    oshape.push_back(C);
    auto ids = std::make_shared<std::vector<std::size_t>>(idx);
    auto bp = [xn, ids, C](TensorNode<Real>& self) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(xn);
        for (std::size_t r = 0; r < ids->size(); ++r)
            for (std::size_t c = 0; c < C; ++c)
                xn->grad[(*ids)[r] * C + c] += self.grad[r * C + c];
    };
    return Tensor<Real>(detail::make_op_node<Real>(std::move(oshape), std::move(out), {xn}, bp));
}

// fixed-weight linear combination of source rows: out[n] = sum_j w[n][j] * x[idx[n][j]]
// (the three-nearest-neighbor upsampling path; weights are precomputed constants)
template <class Real>
Tensor<Real> weighted_gather(const Tensor<Real>& x,
                             const std::vector<std::array<std::size_t, 3>>& idx,
                             const std::vector<std::array<Real, 3>>& w) {
    if (x.shape().size() != 2)
        throw std::invalid_argument("weighted_gather: source must be rank 2");
    if (idx.size() != w.size())
        throw std::invalid_argument("weighted_gather: idx/weight count mismatch");
    const std::size_t M = x.shape()[0], C = x.shape()[1], N = idx.size();
    auto xn = x.node();
    std::vector<Real> out(N * C, Real(0));
    for (std::size_t n = 0; n < N; ++n)
        for (int j = 0; j < 3; ++j) {
            if (idx[n][j] >= M) throw std::invalid_argument("weighted_gather: index range");
            const Real wv = w[n][j];
            for (std::size_t c = 0; c < C; ++c) out[n * C + c] += wv * xn->val[idx[n][j] * C + c];
        }
    auto ids = std::make_shared<std::vector<std::array<std::size_t, 3>>>(idx);
    auto ws = std::make_shared<std::vector<std::array<Real, 3>>>(w);
    auto bp = [xn, ids, ws, C, N](TensorNode<Real>& self) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(xn);
        for (std::size_t n = 0; n < N; ++n)
            for (int j = 0; j < 3; ++j) {
                const Real wv = (*ws)[n][j];
                for (std::size_t c = 0; c < C; ++c)
                    xn->grad[(*ids)[n][j] * C + c] += wv * self.grad[n * C + c];
            }
    };
    return Tensor<Real>(detail::make_op_node<Real>({N, C}, std::move(out), {xn}, bp));
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

// inverted dropout; identity when !training
template <class Real>
Tensor<Real> dropout(const Tensor<Real>& x, Real rate, std::mt19937_64& rng, bool training) {
    if (rate < Real(0) || rate >= Real(1))
        throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (!training || rate == Real(0)) return x;
    auto xn = x.node();
    auto mask = std::make_shared<std::vector<Real>>(x.numel());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Real scale = Real(1) / (Real(1) - rate);
    for (auto& m : *mask) m = (u(rng) < double(rate)) ? Real(0) : scale;
    std::vector<Real> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xn->val[i] * (*mask)[i];
    auto bp = [xn, mask](TensorNode<Real>& self) {
        if (!xn->requires_grad) return;
        detail::ensure_grad(xn);
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] += self.grad[i] * (*mask)[i];
    };
    return Tensor<Real>(detail::make_op_node<Real>(x.shape(), std::move(out), {xn}, bp));
}

// ---------------------------------------------------------------------------
// quaternion ops (w, x, y, z layout; rows of [N,4], either side may be [1,4])
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
inline void hamilton(const Real* a, const Real* b, Real* c) {
    c[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3];
    c[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2];
    c[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1];
    c[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0];
}

// dL/da += J_a^T g where c = a (x) b, and symmetrically for b
template <class Real>
inline void hamilton_backprop(const Real* a, const Real* b, const Real* g, Real* ga,
                              Real* gb) {
    if (ga) {
        ga[0] += g[0] * b[0] + g[1] * b[1] + g[2] * b[2] + g[3] * b[3];
        ga[1] += -g[0] * b[1] + g[1] * b[0] - g[2] * b[3] + g[3] * b[2];
        ga[2] += -g[0] * b[2] + g[1] * b[3] + g[2] * b[0] - g[3] * b[1];
        ga[3] += -g[0] * b[3] - g[1] * b[2] + g[2] * b[1] + g[3] * b[0];
    }
    if (gb) {
        gb[0] += g[0] * a[0] + g[1] * a[1] + g[2] * a[2] + g[3] * a[3];
        gb[1] += -g[0] * a[1] + g[1] * a[0] + g[2] * a[3] - g[3] * a[2];
        gb[2] += -g[0] * a[2] - g[1] * a[3] + g[2] * a[0] + g[3] * a[1];
        gb[3] += -g[0] * a[3] + g[1] * a[2] - g[2] * a[1] + g[3] * a[0];
    }
}

}  // namespace detail

template <class Real>
Tensor<Real> quat_mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    auto check = [](const Tensor<Real>& t, const char* n) {
        if (t.shape().size() != 2 || t.shape()[1] != 4)
            throw std::invalid_argument(std::string("quat_mul: ") + n + " must be [N,4], got " +
                                        shape_str(t.shape()));
    };
    check(a, "a");
    check(b, "b");
    const std::size_t Na = a.shape()[0], Nb = b.shape()[0];
    if (Na != Nb && Na != 1 && Nb != 1)
        throw std::invalid_argument("quat_mul: row counts incompatible");
    const std::size_t N = std::max(Na, Nb);
    auto an = a.node(), bn = b.node();
    std::vector<Real> out(N * 4);
    for (std::size_t i = 0; i < N; ++i)
        detail::hamilton(an->val.data() + (Na == 1 ? 0 : i * 4),
                         bn->val.data() + (Nb == 1 ? 0 : i * 4), out.data() + i * 4);
    auto bp = [an, bn, N, Na, Nb](TensorNode<Real>& self) {
        const bool ga = an->requires_grad, gb = bn->requires_grad;
        if (ga) detail::ensure_grad(an);
        if (gb) detail::ensure_grad(bn);
        for (std::size_t i = 0; i < N; ++i)
            detail::hamilton_backprop(
                an->val.data() + (Na == 1 ? 0 : i * 4), bn->val.data() + (Nb == 1 ? 0 : i * 4),
                self.grad.data() + i * 4, ga ? an->grad.data() + (Na == 1 ? 0 : i * 4) : nullptr,
                gb ? bn->grad.data() + (Nb == 1 ? 0 : i * 4) : nullptr);
    };
    return Tensor<Real>(detail::make_op_node<Real>({N, 4}, std::move(out), {an, bn}, bp));
}

template <class Real>
Tensor<Real> quat_conj(const Tensor<Real>& q) {
    if (q.shape().size() != 2 || q.shape()[1] != 4)
        throw std::invalid_argument("quat_conj: expected [N,4], got " + shape_str(q.shape()));
    auto qn = q.node();
    std::vector<Real> out(q.numel());
    const std::size_t N = q.shape()[0];
    for (std::size_t i = 0; i < N; ++i) {
        out[i * 4 + 0] = qn->val[i * 4 + 0];
        for (int j = 1; j < 4; ++j) out[i * 4 + j] = -qn->val[i * 4 + j];
    }
    auto bp = [qn, N](TensorNode<Real>& self) {
        if (!qn->requires_grad) return;
        detail::ensure_grad(qn);
        for (std::size_t i = 0; i < N; ++i) {
            qn->grad[i * 4 + 0] += self.grad[i * 4 + 0];
            for (int j = 1; j < 4; ++j) qn->grad[i * 4 + j] -= self.grad[i * 4 + j];
        }
    };
    return Tensor<Real>(detail::make_op_node<Real>(q.shape(), std::move(out), {qn}, bp));
}

// q / sqrt(|q|^2 + 1e-16): keeps the graph finite at tiny norms
template <class Real>
Tensor<Real> quat_normalize(const Tensor<Real>& q) {
    Tensor<Real> n2 = add_scalar(sum_all(square(q)), Real(1e-16));
    Tensor<Real> inv = div(Tensor<Real>::scalar(Real(1)), sqrt_t(n2));
    return mul(q, expand_scalar(inv, q.shape()));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <class Real>
void backward(const Tensor<Real>& root) {
    if (root.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar, got " +
                                    shape_str(root.shape()));
    if (!root.requires_grad()) return;  // nothing reachable to differentiate

    using NodeT = TensorNode<Real>;
    // iterative post-order DFS over grad-requiring subgraph
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> seen;
    struct Frame {
        NodeT* n;
        std::size_t next;
    };
    std::vector<Frame> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            NodeT* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    // scratch grads are zeroed per pass; leaf grads persist and accumulate
    for (NodeT* n : order) {
        if (n->is_leaf()) {
            if (n->grad.size() != n->val.size()) n->grad.assign(n->val.size(), Real(0));
        } else {
            n->grad.assign(n->val.size(), Real(0));
        }
    }
    root.node()->grad[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

}  // namespace oaflow
