#pragma once

// Temporal Reconstruction Module: ordered and reversed scans over frame
// features, each a T-Mix(SiLU) + C-Mix residual branch with learned sigmoid
// weights; the two branch outputs are averaged and added residually.
// Branch parameters are not shared between scan directions.

#include <vector>

#include "otter/mixing.hpp"

namespace otter {

// 1-D convolution over the frame axis, kernel 3, zero padded.
template <class Real>
VarT<Real> conv1d_3(VarT<Real> x, VarT<Real> kernel, VarT<Real> bias) {
    check(x.value().rank() == 2, "conv1d_3", "input must be [F, D]");
    const int F = x.value().dim(0), Di = x.value().dim(1);
    check(kernel.value().rank() == 3 && kernel.value().dim(1) == Di &&
              kernel.value().dim(2) == 3,
          "conv1d_3", "kernel must be [Do, Di, 3]");
    const int Do = kernel.value().dim(0);
    check(bias.value().size() == static_cast<size_t>(Do), "conv1d_3", "bias must be [Do]");
    TapeT<Real>& tp = *x.tape;
    TensorT<Real> out({F, Do}, Uninit{});
    const auto& xv = x.value();
    const auto& kv = kernel.value();
    for (int f = 0; f < F; ++f) {
        for (int o = 0; o < Do; ++o) {
            Real acc = bias.value().at(static_cast<size_t>(o));
            for (int d = -1; d <= 1; ++d) {
                const int nf = f + d;
                if (nf < 0 || nf >= F) {
                    continue;
                }
                const Real* srow = xv.data() + static_cast<size_t>(nf) * Di;
                const Real* kk = kv.data() + (static_cast<size_t>(o) * Di) * 3 + (d + 1);
                for (int i = 0; i < Di; ++i) {
                    acc += srow[i] * kk[static_cast<size_t>(i) * 3];
                }
            }
            out.at2(f, o) = acc;
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.any_wants({x, kernel, bias}));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ix = x.id, ik = kernel.id, ibb = bias.id;
        tp.set_back(v, [oid, ix, ik, ibb, F, Di, Do](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            const TensorT<Real>& xv2 = t.value(ix);
            const TensorT<Real>& kv2 = t.value(ik);
            const bool wx = t.wants_grad(ix);
            const bool wk = t.wants_grad(ik);
            const bool wb = t.wants_grad(ibb);
            TensorT<Real>* dx = wx ? &t.grad_buf(ix) : nullptr;
            TensorT<Real>* dK = wk ? &t.grad_buf(ik) : nullptr;
            TensorT<Real>* db = wb ? &t.grad_buf(ibb) : nullptr;
            for (int f = 0; f < F; ++f) {
                for (int o = 0; o < Do; ++o) {
                    const Real gv = g.at2(f, o);
                    if (gv == Real(0)) {
                        continue;
                    }
                    if (wb) {
                        db->at(static_cast<size_t>(o)) += gv;
                    }
                    for (int d = -1; d <= 1; ++d) {
                        const int nf = f + d;
                        if (nf < 0 || nf >= F) {
                            continue;
                        }
                        const size_t koff = (static_cast<size_t>(o) * Di) * 3 + (d + 1);
                        const size_t soff = static_cast<size_t>(nf) * Di;
                        for (int i = 0; i < Di; ++i) {
                            if (wx) {
                                dx->at(soff + i) += gv * kv2.at(koff + static_cast<size_t>(i) * 3);
                            }
                            if (wk) {
                                dK->at(koff + static_cast<size_t>(i) * 3) += gv * xv2.at(soff + i);
                            }
                        }
                    }
                }
            }
        });
    }
    return v;
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

template <class Real>
struct TrmBranchParamsT {
    using Tensor = TensorT<Real>;

    MixParamsT<Real> tmix;
    ChannelMixParamsT<Real> cmix;
    Tensor conv_w;  // [D, D, 3]
    Tensor conv_b;  // [D]

    void init(int D, Variant var, Rng& rng) {
        tmix.init(D, var, Act::Silu, rng);  // T-Mix with SiLU
        cmix.init(D, rng);
        conv_w = Tensor({D, D, 3});
        const double cs = 0.15 / std::sqrt(3.0 * D);
        for (size_t i = 0; i < conv_w.size(); ++i) {
            conv_w.at(i) = static_cast<Real>(rng.normal(0.0, cs));
        }
        conv_b = Tensor({D});
    }

    void register_into(ParamRegistryT<Real>& reg, const std::string& prefix) {
        tmix.register_into(reg, prefix + ".tmix");
        cmix.register_into(reg, prefix + ".cmix");
        reg.add(prefix + ".conv_w", &conv_w);
        reg.add(prefix + ".conv_b", &conv_b);
    }
};

template <class Real>
struct TrmParamsT {
    TrmBranchParamsT<Real> ordered;
    TrmBranchParamsT<Real> reversed;

    void init(int D, Variant var, Rng& rng) {
        ordered.init(D, var, rng);
        reversed.init(D, var, rng);
    }

    void register_into(ParamRegistryT<Real>& reg, const std::string& prefix) {
        ordered.register_into(reg, prefix + ".ordered");
        reversed.register_into(reg, prefix + ".reversed");
    }
};

using TrmParams = TrmParamsT<float>;

template <class Real>
struct TrmBranchVarsT {
    MixVarsT<Real> tmix;
    ChannelMixVarsT<Real> cmix;
    VarT<Real> conv_w, conv_b;
    bool lw_on = true;
};

template <class Real>
struct TrmVarsT {
    TrmBranchVarsT<Real> ordered;
    TrmBranchVarsT<Real> reversed;
};

template <class Real>
TrmBranchVarsT<Real> leaf_trm_branch(TapeT<Real>& tp, const TrmBranchParamsT<Real>& p,
                                     bool lw_on) {
    TrmBranchVarsT<Real> bv;
    bv.tmix = leaf_mix(tp, p.tmix);
    bv.cmix = leaf_mix(tp, p.cmix);
    bv.conv_w = tp.leaf(p.conv_w);
    bv.conv_b = tp.leaf(p.conv_b);
    bv.lw_on = lw_on;
    return bv;
}

template <class Real>
TrmVarsT<Real> leaf_trm(TapeT<Real>& tp, const TrmParamsT<Real>& p, bool lw_on = true) {
    return {leaf_trm_branch(tp, p.ordered, lw_on), leaf_trm_branch(tp, p.reversed, lw_on)};
}

// ---------------------------------------------------------------------------
// branches and module forward
// ---------------------------------------------------------------------------

enum class ScanDirection { Ordered, Reversed };

enum class TrmBranchMode { Both, OrderedOnly, ReversedOnly };

inline const char* branch_mode_name(TrmBranchMode m) {
    switch (m) {
        case TrmBranchMode::Both: return "both";
        case TrmBranchMode::OrderedOnly: return "ordered";
        case TrmBranchMode::ReversedOnly: return "reversed";
    }
    return "?";
}

inline TrmBranchMode branch_mode_from_name(const std::string& s) {
    if (s == "both") return TrmBranchMode::Both;
    if (s == "ordered") return TrmBranchMode::OrderedOnly;
    if (s == "reversed") return TrmBranchMode::ReversedOnly;
    fail("branch_mode_from_name", "unknown branch mode '" + s + "'");
}

// One scan branch. A reversed branch flips frame order first and flips back
// before returning, so "previous token" means previous in scan order.
template <class Real>
VarT<Real> trm_branch(VarT<Real> x, ScanDirection dir, const TrmBranchVarsT<Real>& bv) {
    VarT<Real> s = dir == ScanDirection::Reversed ? flip_rows(x) : x;
    VarT<Real> a = add(time_mix(s, bv.tmix), s);
    VarT<Real> b = add(channel_mix_temporal(a, bv.cmix), a);
    VarT<Real> out;
    if (bv.lw_on) {
        VarT<Real> lw = sigmoid(add(conv1d_3(b, bv.conv_w, bv.conv_b), s));
        out = mul(lw, b);
    } else {
        out = b;
    }
    return dir == ScanDirection::Reversed ? flip_rows(out) : out;
}

// x + Avg(ordered, reversed); with a single branch enabled the average
// degenerates to that branch.
template <class Real>
VarT<Real> trm_forward(VarT<Real> x, const TrmVarsT<Real>& tv,
                       TrmBranchMode mode = TrmBranchMode::Both) {
    switch (mode) {
        case TrmBranchMode::Both: {
            VarT<Real> o = trm_branch(x, ScanDirection::Ordered, tv.ordered);
            VarT<Real> r = trm_branch(x, ScanDirection::Reversed, tv.reversed);
            return add(x, affine(add(o, r), Real(0.5), Real(0)));
        }
        case TrmBranchMode::OrderedOnly:
            return add(x, trm_branch(x, ScanDirection::Ordered, tv.ordered));
        case TrmBranchMode::ReversedOnly:
            return add(x, trm_branch(x, ScanDirection::Reversed, tv.reversed));
    }
    fail("trm_forward", "unknown branch mode");
}

}  // namespace otter
