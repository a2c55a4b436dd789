#pragma once

// Reverse-mode differentiation on a tape of tensor operations.
// Values are float in the product build; the whole stack is templated on the
// scalar so verification suites can instantiate the identical code in double.
//
// A tape is confined to one training step on one thread. Parameters live
// outside the tape and are re-leafed every step. Replaying the tape backward
// visits each node exactly once (construction order is topological).

#include <functional>
#include <memory>
#include <vector>

#include "otter/tensor.hpp"

namespace otter {

template <class Real>
class TapeT;

template <class Real>
struct VarT {
    TapeT<Real>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const TensorT<Real>& value() const { return tape->value(id); }
};

template <class Real>
class TapeT {
public:
    using Tensor = TensorT<Real>;
    using Var = VarT<Real>;
    using BackFn = std::function<void(TapeT&)>;

    // Leaf that wants gradients (a model parameter).
    Var leaf(const Tensor& t) {
        t.check_finite("leaf");
        return push(t, true);
    }

    // Leaf that never needs gradients (input data, constants).
    Var constant(const Tensor& t) {
        t.check_finite("constant");
        return push(t, false);
    }

    Var constant_scalar(Real v) {
        return constant(Tensor::scalar(v));
    }

    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }

    bool wants_grad(int id) const { return nodes_[static_cast<size_t>(id)].wants; }

    // Gradient from the last backward() w.r.t. node `id`; zeros if unreached.
    Tensor grad(int id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.size() == 0) {
            return Tensor::zeros(n.value.shape());
        }
        return n.grad;
    }

    const Tensor* grad_if_any(int id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.grad.size() == 0 ? nullptr : &n.grad;
    }

    // Accumulation buffer used by backward closures.
    Tensor& grad_buf(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.size() == 0) {
            n.grad = Tensor::zeros(n.value.shape());
        }
        return n.grad;
    }

    void backward(Var out) {
        check(out.tape == this, "backward", "variable from another tape");
        check(out.value().size() == 1, "backward", "output must be scalar");
        grad_buf(out.id).at(0) = Real(1);
        for (int i = out.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.grad.size() != 0 && n.back) {
                n.back(*this);
                n.back = nullptr;  // one replay per node
            }
        }
    }

    void clear() {
        nodes_.clear();
        relu_signature_ = 1469598103934665603ull;
    }

    size_t node_count() const { return nodes_.size(); }

    // Order-sensitive hash of every relu input sign seen on this tape. Two
    // evaluations with equal signatures lie on the same smooth piece of the
    // loss, which is what makes a finite-difference estimate a valid
    // derivative oracle.
    uint64_t relu_signature() const { return relu_signature_; }
    void fold_relu_sign(bool positive) {
        relu_signature_ = (relu_signature_ ^ (positive ? 2u : 1u)) * 1099511628211ull;
    }

    Var push(Tensor value, bool wants) {
        value.check_finite("op result");
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.value = std::move(value);
        n.wants = wants;
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    void set_back(Var v, BackFn fn) { nodes_[static_cast<size_t>(v.id)].back = std::move(fn); }

    bool any_wants(std::initializer_list<Var> vs) const {
        for (const Var& v : vs) {
            if (nodes_[static_cast<size_t>(v.id)].wants) {
                return true;
            }
        }
        return false;
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        BackFn back;
        bool wants = false;
    };

    std::vector<Node> nodes_;
    uint64_t relu_signature_ = 1469598103934665603ull;
};

using Tape = TapeT<float>;
using Var = VarT<float>;

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
void require_same_shape(const VarT<Real>& a, const VarT<Real>& b, const char* op) {
    check(a.value().same_shape(b.value()), op,
          "shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
}

// dst += g (elementwise), allocating on first touch
template <class Real>
void axpy_into(TapeT<Real>& t, int id, const TensorT<Real>& g) {
    if (!t.wants_grad(id)) {
        return;
    }
    TensorT<Real>& d = t.grad_buf(id);
    Real* pd = d.data();
    const Real* pg = g.data();
    for (size_t i = 0; i < d.size(); ++i) {
        pd[i] += pg[i];
    }
}

}  // namespace detail

template <class Real>
VarT<Real> add(VarT<Real> a, VarT<Real> b) {
    detail::require_same_shape(a, b, "add");
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out(a.value().shape(), Uninit{});
    const Real* pa = a.value().data();
    const Real* pb = b.value().data();
    Real* po = out.data();
    for (size_t i = 0; i < out.size(); ++i) {
        po[i] = pa[i] + pb[i];
    }
    VarT<Real> v = tp.push(std::move(out), tp.any_wants({a, b}));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id, ib = b.id;
        tp.set_back(v, [oid, ia, ib](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            detail::axpy_into(t, ia, g);
            detail::axpy_into(t, ib, g);
        });
    }
    return v;
}

template <class Real>
VarT<Real> sub(VarT<Real> a, VarT<Real> b) {
    detail::require_same_shape(a, b, "sub");
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out(a.value().shape(), Uninit{});
    const Real* pa = a.value().data();
    const Real* pb = b.value().data();
    Real* po = out.data();
    for (size_t i = 0; i < out.size(); ++i) {
        po[i] = pa[i] - pb[i];
    }
    VarT<Real> v = tp.push(std::move(out), tp.any_wants({a, b}));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id, ib = b.id;
        tp.set_back(v, [oid, ia, ib](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            detail::axpy_into(t, ia, g);
            if (t.wants_grad(ib)) {
                TensorT<Real>& d = t.grad_buf(ib);
                for (size_t i = 0; i < d.size(); ++i) {
                    d.at(i) -= g.at(i);
                }
            }
        });
    }
    return v;
}

template <class Real>
VarT<Real> mul(VarT<Real> a, VarT<Real> b) {
    detail::require_same_shape(a, b, "mul");
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out(a.value().shape(), Uninit{});
    const Real* pa = a.value().data();
    const Real* pb = b.value().data();
    Real* po = out.data();
    for (size_t i = 0; i < out.size(); ++i) {
        po[i] = pa[i] * pb[i];
    }
    VarT<Real> v = tp.push(std::move(out), tp.any_wants({a, b}));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id, ib = b.id;
        tp.set_back(v, [oid, ia, ib](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            if (t.wants_grad(ia)) {
                TensorT<Real>& d = t.grad_buf(ia);
                const TensorT<Real>& vb = t.value(ib);
                for (size_t i = 0; i < d.size(); ++i) {
                    d.at(i) += g.at(i) * vb.at(i);
                }
            }
            if (t.wants_grad(ib)) {
                TensorT<Real>& d = t.grad_buf(ib);
                const TensorT<Real>& va = t.value(ia);
                for (size_t i = 0; i < d.size(); ++i) {
                    d.at(i) += g.at(i) * va.at(i);
                }
            }
        });
    }
    return v;
}

template <class Real>
VarT<Real> neg(VarT<Real> a) {
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out(a.value().shape(), Uninit{});
    for (size_t i = 0; i < out.size(); ++i) {
        out.at(i) = -a.value().at(i);
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(a.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id;
        tp.set_back(v, [oid, ia](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            TensorT<Real>& d = t.grad_buf(ia);
            for (size_t i = 0; i < d.size(); ++i) {
                d.at(i) -= g.at(i);
            }
        });
    }
    return v;
}

// out = alpha * a + beta
template <class Real>
VarT<Real> affine(VarT<Real> a, Real alpha, Real beta) {
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out(a.value().shape(), Uninit{});
    for (size_t i = 0; i < out.size(); ++i) {
        out.at(i) = alpha * a.value().at(i) + beta;
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(a.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id;
        tp.set_back(v, [oid, ia, alpha](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            TensorT<Real>& d = t.grad_buf(ia);
            for (size_t i = 0; i < d.size(); ++i) {
                d.at(i) += alpha * g.at(i);
            }
        });
    }
    return v;
}

template <class Real>
VarT<Real> exp_op(VarT<Real> a) {
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out(a.value().shape(), Uninit{});
    for (size_t i = 0; i < out.size(); ++i) {
        out.at(i) = exp_r<Real>(a.value().at(i));
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(a.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id;
        tp.set_back(v, [oid, ia](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            const TensorT<Real>& y = t.value(oid);
            TensorT<Real>& d = t.grad_buf(ia);
            for (size_t i = 0; i < d.size(); ++i) {
                d.at(i) += g.at(i) * y.at(i);
            }
        });
    }
    return v;
}

template <class Real>
VarT<Real> sigmoid(VarT<Real> a) {
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out(a.value().shape(), Uninit{});
    {
        const Real* px = a.value().data();
        Real* po = out.data();
        for (size_t i = 0; i < out.size(); ++i) {
            po[i] = sigmoid_r(px[i]);
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(a.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id;
        tp.set_back(v, [oid, ia](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            const TensorT<Real>& s = t.value(oid);
            TensorT<Real>& d = t.grad_buf(ia);
            for (size_t i = 0; i < d.size(); ++i) {
                d.at(i) += g.at(i) * s.at(i) * (Real(1) - s.at(i));
            }
        });
    }
    return v;
}

template <class Real>
VarT<Real> relu(VarT<Real> a) {
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out(a.value().shape(), Uninit{});
    for (size_t i = 0; i < out.size(); ++i) {
        Real x = a.value().at(i);
        tp.fold_relu_sign(x > Real(0));
        out.at(i) = x > Real(0) ? x : Real(0);
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(a.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id;
        tp.set_back(v, [oid, ia](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            const TensorT<Real>& x = t.value(ia);
            TensorT<Real>& d = t.grad_buf(ia);
            for (size_t i = 0; i < d.size(); ++i) {
                d.at(i) += x.at(i) > Real(0) ? g.at(i) : Real(0);
            }
        });
    }
    return v;
}

template <class Real>
VarT<Real> silu(VarT<Real> a) {
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out(a.value().shape(), Uninit{});
    auto sig = std::make_shared<std::vector<Real>>(out.size());
    {
        const Real* px = a.value().data();
        Real* po = out.data();
        Real* psig = sig->data();
        for (size_t i = 0; i < out.size(); ++i) {
            const Real s = sigmoid_r(px[i]);
            psig[i] = s;
            po[i] = px[i] * s;
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(a.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id;
        tp.set_back(v, [oid, ia, sig](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            const TensorT<Real>& x = t.value(ia);
            TensorT<Real>& d = t.grad_buf(ia);
            for (size_t i = 0; i < d.size(); ++i) {
                Real s = (*sig)[i];
                d.at(i) += g.at(i) * s * (Real(1) + x.at(i) * (Real(1) - s));
            }
        });
    }
    return v;
}

template <class Real>
VarT<Real> recip(VarT<Real> a) {
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out(a.value().shape(), Uninit{});
    for (size_t i = 0; i < out.size(); ++i) {
        out.at(i) = Real(1) / a.value().at(i);
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(a.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id;
        tp.set_back(v, [oid, ia](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            const TensorT<Real>& y = t.value(oid);
            TensorT<Real>& d = t.grad_buf(ia);
            for (size_t i = 0; i < d.size(); ++i) {
                d.at(i) -= g.at(i) * y.at(i) * y.at(i);
            }
        });
    }
    return v;
}

template <class Real>
VarT<Real> sqrt_op(VarT<Real> a) {
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out(a.value().shape(), Uninit{});
    for (size_t i = 0; i < out.size(); ++i) {
        out.at(i) = std::sqrt(a.value().at(i));
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(a.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id;
        tp.set_back(v, [oid, ia](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            const TensorT<Real>& y = t.value(oid);
            TensorT<Real>& d = t.grad_buf(ia);
            for (size_t i = 0; i < d.size(); ++i) {
                d.at(i) += g.at(i) * Real(0.5) / y.at(i);
            }
        });
    }
    return v;
}

// Spec-level elementwise dispatcher.
enum class EwKind { Add, Mul, Sigmoid, Relu, Silu, Neg, Exp };

template <class Real>
VarT<Real> elementwise(EwKind kind, VarT<Real> a) {
    switch (kind) {
        case EwKind::Sigmoid: return sigmoid(a);
        case EwKind::Relu: return relu(a);
        case EwKind::Silu: return silu(a);
        case EwKind::Neg: return neg(a);
        case EwKind::Exp: return exp_op(a);
        default: fail("elementwise", "binary kind called without second operand");
    }
}

template <class Real>
VarT<Real> elementwise(EwKind kind, VarT<Real> a, VarT<Real> b) {
    switch (kind) {
        case EwKind::Add: return add(a, b);
        case EwKind::Mul: return mul(a, b);
        default: fail("elementwise", "unary kind called with second operand");
    }
}

template <class Real>
VarT<Real> apply_act(VarT<Real> a, Act act) {
    switch (act) {
        case Act::Sigmoid: return sigmoid(a);
        case Act::Relu: return relu(a);
        case Act::Silu: return silu(a);
        case Act::Identity: return a;
        case Act::One:
            return a.tape->constant(TensorT<Real>::full(a.value().shape(), Real(1)));
    }
    fail("apply_act", "unknown activation");
}

// ---------------------------------------------------------------------------
// broadcast ops over [T, C] rows
// ---------------------------------------------------------------------------

// out[t,c] = a[t,c] * v[c]
template <class Real>
VarT<Real> rowscale(VarT<Real> a, VarT<Real> rowv) {
    check(a.value().rank() == 2, "rowscale", "lhs must be rank-2");
    check(rowv.value().size() == static_cast<size_t>(a.value().dim(1)), "rowscale",
          "vector length must equal column count");
    TapeT<Real>& tp = *a.tape;
    const int T = a.value().dim(0), C = a.value().dim(1);
    TensorT<Real> out({T, C}, Uninit{});
    for (int t = 0; t < T; ++t) {
        for (int c = 0; c < C; ++c) {
            out.at2(t, c) = a.value().at2(t, c) * rowv.value().at(static_cast<size_t>(c));
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.any_wants({a, rowv}));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id, iv = rowv.id;
        tp.set_back(v, [oid, ia, iv, T, C](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            if (t.wants_grad(ia)) {
                TensorT<Real>& d = t.grad_buf(ia);
                const TensorT<Real>& vv = t.value(iv);
                for (int r = 0; r < T; ++r) {
                    for (int c = 0; c < C; ++c) {
                        d.at2(r, c) += g.at2(r, c) * vv.at(static_cast<size_t>(c));
                    }
                }
            }
            if (t.wants_grad(iv)) {
                TensorT<Real>& d = t.grad_buf(iv);
                const TensorT<Real>& va = t.value(ia);
                for (int c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int r = 0; r < T; ++r) {
                        acc += static_cast<double>(g.at2(r, c)) * va.at2(r, c);
                    }
                    d.at(static_cast<size_t>(c)) += static_cast<Real>(acc);
                }
            }
        });
    }
    return v;
}

// out[t,c] = a[t,c] + v[c]
template <class Real>
VarT<Real> add_rowvec(VarT<Real> a, VarT<Real> rowv) {
    check(a.value().rank() == 2, "add_rowvec", "lhs must be rank-2");
    check(rowv.value().size() == static_cast<size_t>(a.value().dim(1)), "add_rowvec",
          "vector length must equal column count");
    TapeT<Real>& tp = *a.tape;
    const int T = a.value().dim(0), C = a.value().dim(1);
    TensorT<Real> out({T, C}, Uninit{});
    for (int t = 0; t < T; ++t) {
        for (int c = 0; c < C; ++c) {
            out.at2(t, c) = a.value().at2(t, c) + rowv.value().at(static_cast<size_t>(c));
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.any_wants({a, rowv}));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id, iv = rowv.id;
        tp.set_back(v, [oid, ia, iv, T, C](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            detail::axpy_into(t, ia, g);
            if (t.wants_grad(iv)) {
                TensorT<Real>& d = t.grad_buf(iv);
                for (int c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int r = 0; r < T; ++r) {
                        acc += static_cast<double>(g.at2(r, c));
                    }
                    d.at(static_cast<size_t>(c)) += static_cast<Real>(acc);
                }
            }
        });
    }
    return v;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

// Projection dimensions stay small (k, n <= 192 in this project), so the
// kernels accumulate in the working precision and lean on row-streaming.

// c[m,n] (+)= a[m,k] * b[k,n]
template <class Real>
void gemm_acc(const Real* a, const Real* b, Real* c, int m, int k, int n, bool accumulate) {
    constexpr int kMaxN = 256;
    Real row[kMaxN];
    check(n <= kMaxN, "matmul", "row buffer exceeded");
    if (k == 3 && n == 3) {
        const Real b00 = b[0], b01 = b[1], b02 = b[2];
        const Real b10 = b[3], b11 = b[4], b12 = b[5];
        const Real b20 = b[6], b21 = b[7], b22 = b[8];
        for (int i = 0; i < m; ++i) {
            const size_t o = static_cast<size_t>(i) * 3;
            const Real a0 = a[o], a1 = a[o + 1], a2 = a[o + 2];
            const Real r0 = a0 * b00 + a1 * b10 + a2 * b20;
            const Real r1 = a0 * b01 + a1 * b11 + a2 * b21;
            const Real r2 = a0 * b02 + a1 * b12 + a2 * b22;
            if (accumulate) {
                c[o] += r0;
                c[o + 1] += r1;
                c[o + 2] += r2;
            } else {
                c[o] = r0;
                c[o + 1] = r1;
                c[o + 2] = r2;
            }
        }
        return;
    }
    for (int i = 0; i < m; ++i) {
        const Real* pa = a + static_cast<size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            row[j] = Real(0);
        }
        for (int l = 0; l < k; ++l) {
            const Real av = pa[l];
            const Real* pb = b + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) {
                row[j] += av * pb[j];
            }
        }
        Real* pc = c + static_cast<size_t>(i) * n;
        if (accumulate) {
            for (int j = 0; j < n; ++j) {
                pc[j] += row[j];
            }
        } else {
            for (int j = 0; j < n; ++j) {
                pc[j] = row[j];
            }
        }
    }
}

// c[m,n] (+)= a[m,k] * b[n,k]^T
template <class Real>
void gemm_nt_acc(const Real* a, const Real* b, Real* c, int m, int k, int n, bool accumulate) {
    if (k == 3 && n == 3) {
        const Real b00 = b[0], b01 = b[1], b02 = b[2];
        const Real b10 = b[3], b11 = b[4], b12 = b[5];
        const Real b20 = b[6], b21 = b[7], b22 = b[8];
        for (int i = 0; i < m; ++i) {
            const size_t o = static_cast<size_t>(i) * 3;
            const Real a0 = a[o], a1 = a[o + 1], a2 = a[o + 2];
            const Real r0 = a0 * b00 + a1 * b01 + a2 * b02;
            const Real r1 = a0 * b10 + a1 * b11 + a2 * b12;
            const Real r2 = a0 * b20 + a1 * b21 + a2 * b22;
            if (accumulate) {
                c[o] += r0;
                c[o + 1] += r1;
                c[o + 2] += r2;
            } else {
                c[o] = r0;
                c[o + 1] = r1;
                c[o + 2] = r2;
            }
        }
        return;
    }
    for (int i = 0; i < m; ++i) {
        const Real* pa = a + static_cast<size_t>(i) * k;
        Real* pc = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const Real* pb = b + static_cast<size_t>(j) * k;
            Real acc = Real(0);
            for (int l = 0; l < k; ++l) {
                acc += pa[l] * pb[l];
            }
            pc[j] = accumulate ? pc[j] + acc : acc;
        }
    }
}

// c[m,n] (+)= a[k,m]^T * b[k,n]; streamed over k so rows of a and b are
// touched contiguously
template <class Real>
void gemm_tn_acc(const Real* a, const Real* b, Real* c, int m, int k, int n, bool accumulate) {
    if (!accumulate) {
        for (size_t i = 0; i < static_cast<size_t>(m) * n; ++i) {
            c[i] = Real(0);
        }
    }
    for (int l = 0; l < k; ++l) {
        const Real* pa = a + static_cast<size_t>(l) * m;
        const Real* pb = b + static_cast<size_t>(l) * n;
        for (int i = 0; i < m; ++i) {
            const Real av = pa[i];
            Real* pr = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                pr[j] += av * pb[j];
            }
        }
    }
}

}  // namespace detail

template <class Real>
VarT<Real> matmul(VarT<Real> a, VarT<Real> b) {
    check(a.value().rank() == 2 && b.value().rank() == 2, "matmul", "operands must be rank-2");
    const int m = a.value().dim(0), k = a.value().dim(1);
    const int k2 = b.value().dim(0), n = b.value().dim(1);
    check(k == k2, "matmul",
          "inner dimensions disagree: " + a.value().shape_str() + " * " + b.value().shape_str());
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out({m, n}, Uninit{});
    detail::gemm_acc(a.value().data(), b.value().data(), out.data(), m, k, n, false);
    VarT<Real> v = tp.push(std::move(out), tp.any_wants({a, b}));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id, ib = b.id;
        tp.set_back(v, [oid, ia, ib, m, k, n](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            if (t.wants_grad(ia)) {
                detail::gemm_nt_acc(g.data(), t.value(ib).data(), t.grad_buf(ia).data(),
                                    m, n, k, true);
            }
            if (t.wants_grad(ib)) {
                detail::gemm_tn_acc(t.value(ia).data(), g.data(), t.grad_buf(ib).data(),
                                    k, m, n, true);
            }
        });
    }
    return v;
}

// ---------------------------------------------------------------------------
// layer norm (last axis), no affine; compose with rowscale/add_rowvec for one
// ---------------------------------------------------------------------------

template <class Real>
VarT<Real> layer_norm(VarT<Real> a, Real eps) {
    check(a.value().rank() >= 1, "layer_norm", "rank must be >= 1");
    const int C = a.value().dim(a.value().rank() - 1);
    check(C >= 1, "layer_norm", "axis extent must be >= 1");
    const int T = static_cast<int>(a.value().size()) / C;
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out(a.value().shape(), Uninit{});
    auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(T) * 2);
    const Real* px = a.value().data();
    Real* po = out.data();
    for (int t = 0; t < T; ++t) {
        const Real* row = px + static_cast<size_t>(t) * C;
        double mean = 0.0;
        for (int c = 0; c < C; ++c) {
            mean += row[c];
        }
        mean /= C;
        double var = 0.0;
        for (int c = 0; c < C; ++c) {
            double d = row[c] - mean;
            var += d * d;
        }
        var /= C;
        double rstd = 1.0 / std::sqrt(var + static_cast<double>(eps));
        (*stats)[static_cast<size_t>(t) * 2] = mean;
        (*stats)[static_cast<size_t>(t) * 2 + 1] = rstd;
        Real* orow = po + static_cast<size_t>(t) * C;
        for (int c = 0; c < C; ++c) {
            orow[c] = static_cast<Real>((row[c] - mean) * rstd);
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(a.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id;
        tp.set_back(v, [oid, ia, stats, T, C](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            const TensorT<Real>& y = t.value(oid);
            TensorT<Real>& d = t.grad_buf(ia);
            for (int r = 0; r < T; ++r) {
                double rstd = (*stats)[static_cast<size_t>(r) * 2 + 1];
                const Real* grow = g.data() + static_cast<size_t>(r) * C;
                const Real* yrow = y.data() + static_cast<size_t>(r) * C;
                Real* drow = d.data() + static_cast<size_t>(r) * C;
                double gm = 0.0, gym = 0.0;
                for (int c = 0; c < C; ++c) {
                    gm += grow[c];
                    gym += static_cast<double>(grow[c]) * yrow[c];
                }
                gm /= C;
                gym /= C;
                for (int c = 0; c < C; ++c) {
                    drow[c] += static_cast<Real>((grow[c] - gm - yrow[c] * gym) * rstd);
                }
            }
        });
    }
    return v;
}

// Spec form with learnable gain/bias over the normalized axis.
template <class Real>
VarT<Real> layer_norm(VarT<Real> a, VarT<Real> gain, VarT<Real> bias, Real eps) {
    return add_rowvec(rowscale(layer_norm(a, eps), gain), bias);
}

// ---------------------------------------------------------------------------
// reductions and shape ops
// ---------------------------------------------------------------------------

template <class Real>
VarT<Real> sum_all(VarT<Real> a) {
    TapeT<Real>& tp = *a.tape;
    double acc = 0.0;
    for (size_t i = 0; i < a.value().size(); ++i) {
        acc += a.value().at(i);
    }
    VarT<Real> v = tp.push(TensorT<Real>::scalar(static_cast<Real>(acc)), tp.wants_grad(a.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id;
        tp.set_back(v, [oid, ia](TapeT<Real>& t) {
            Real g = t.grad_if_any(oid)->at(0);
            TensorT<Real>& d = t.grad_buf(ia);
            for (size_t i = 0; i < d.size(); ++i) {
                d.at(i) += g;
            }
        });
    }
    return v;
}

template <class Real>
VarT<Real> mean_all(VarT<Real> a) {
    const Real inv = Real(1) / static_cast<Real>(a.value().size());
    return affine(sum_all(a), inv, Real(0));
}

// [T,C] -> [C], average over rows
template <class Real>
VarT<Real> mean_over_rows(VarT<Real> a) {
    check(a.value().rank() == 2, "mean_over_rows", "operand must be rank-2");
    const int T = a.value().dim(0), C = a.value().dim(1);
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out({C}, Uninit{});
    for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int t = 0; t < T; ++t) {
            acc += a.value().at2(t, c);
        }
        out.at(static_cast<size_t>(c)) = static_cast<Real>(acc / T);
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(a.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id;
        tp.set_back(v, [oid, ia, T, C](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            TensorT<Real>& d = t.grad_buf(ia);
            const Real inv = Real(1) / static_cast<Real>(T);
            for (int r = 0; r < T; ++r) {
                for (int c = 0; c < C; ++c) {
                    d.at2(r, c) += g.at(static_cast<size_t>(c)) * inv;
                }
            }
        });
    }
    return v;
}

template <class Real>
VarT<Real> stack_scalars(const std::vector<VarT<Real>>& xs) {
    check(!xs.empty(), "stack_scalars", "empty list");
    TapeT<Real>& tp = *xs[0].tape;
    TensorT<Real> out({static_cast<int>(xs.size())}, Uninit{});
    bool wants = false;
    for (size_t i = 0; i < xs.size(); ++i) {
        check(xs[i].value().size() == 1, "stack_scalars", "operand is not scalar");
        out.at(i) = xs[i].value().at(0);
        wants = wants || tp.wants_grad(xs[i].id);
    }
    VarT<Real> v = tp.push(std::move(out), wants);
    if (tp.wants_grad(v.id)) {
        auto ids = std::make_shared<std::vector<int>>();
        for (const auto& x : xs) {
            ids->push_back(x.id);
        }
        int oid = v.id;
        tp.set_back(v, [oid, ids](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            for (size_t i = 0; i < ids->size(); ++i) {
                int id = (*ids)[i];
                if (t.wants_grad(id)) {
                    t.grad_buf(id).at(0) += g.at(i);
                }
            }
        });
    }
    return v;
}

// same data, new extents
template <class Real>
VarT<Real> reshape(VarT<Real> a, std::vector<int> new_shape) {
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out(std::move(new_shape), Uninit{});
    check(out.size() == a.value().size(), "reshape", "element count changed");
    std::copy_n(a.value().data(), out.size(), out.data());
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(a.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id;
        tp.set_back(v, [oid, ia](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            TensorT<Real>& d = t.grad_buf(ia);
            for (size_t i = 0; i < d.size(); ++i) {
                d.at(i) += g.at(i);
            }
        });
    }
    return v;
}

// reverse row order of [T,C]
template <class Real>
VarT<Real> flip_rows(VarT<Real> a) {
    check(a.value().rank() == 2, "flip_rows", "operand must be rank-2");
    const int T = a.value().dim(0), C = a.value().dim(1);
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out({T, C}, Uninit{});
    for (int t = 0; t < T; ++t) {
        for (int c = 0; c < C; ++c) {
            out.at2(t, c) = a.value().at2(T - 1 - t, c);
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(a.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id;
        tp.set_back(v, [oid, ia, T, C](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            TensorT<Real>& d = t.grad_buf(ia);
            for (int r = 0; r < T; ++r) {
                for (int c = 0; c < C; ++c) {
                    d.at2(T - 1 - r, c) += g.at2(r, c);
                }
            }
        });
    }
    return v;
}

// ---------------------------------------------------------------------------
// gradients of a scalar output w.r.t. explicit parameter leaves
// ---------------------------------------------------------------------------

template <class Real>
std::vector<TensorT<Real>> grad(VarT<Real> output, const std::vector<VarT<Real>>& params) {
    TapeT<Real>& tp = *output.tape;
    for (const auto& p : params) {
        check(p.tape == &tp && p.id >= 0 && p.id <= output.id, "grad",
              "parameter not on tape");
    }
    tp.backward(output);
    std::vector<TensorT<Real>> gs;
    gs.reserve(params.size());
    for (const auto& p : params) {
        gs.push_back(tp.grad(p.id));
    }
    return gs;
}

// Central finite differences of a scalar function, coordinate by coordinate.
// `f` is evaluated with the mutated tensors; the caller's tensors are restored.
template <class Real, class F>
std::vector<TensorT<Real>> finite_diff(F&& f, std::vector<TensorT<Real>*> params, Real h) {
    check(h > Real(0), "finite_diff", "h must be positive");
    std::vector<TensorT<Real>> out;
    out.reserve(params.size());
    for (TensorT<Real>* p : params) {
        TensorT<Real> g(p->shape());
        for (size_t i = 0; i < p->size(); ++i) {
            const Real orig = p->at(i);
            p->at(i) = orig + h;
            const double fp = static_cast<double>(f());
            p->at(i) = orig - h;
            const double fm = static_cast<double>(f());
            p->at(i) = orig;
            g.at(i) = static_cast<Real>((fp - fm) / (2.0 * static_cast<double>(h)));
        }
        out.push_back(std::move(g));
    }
    return out;
}

}  // namespace otter
