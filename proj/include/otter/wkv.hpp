#pragma once

// The attention-free WKV recurrences. Two directions, each in two forms:
//
//   * a direct double-summation oracle (quadratic; the reference semantics),
//   * a linear-time streaming scan carrying per-channel running numerator,
//     denominator and running-maximum exponent (log-domain rescaling).
//
// Causal:        out_t = (sum_{i<t}  e^{-(t-1-i)w + k_i} v_i + e^{u+k_t} v_t)
//                      / (sum_{i<t}  e^{-(t-1-i)w + k_i}     + e^{u+k_t})
// Bidirectional: the same with the history sum running over all i != t with
//                distance weight e^{-(|t-i|-1)w + k_i}.
//
// Inputs k, v are [T, C]; decay w and bonus u are [C]. The decay multiplier
// e^{-w} is positive for any real w. All scan state is 64-bit.
//
// A `block` parameter cuts the sequence into independent segments (the scan
// state resets at segment boundaries); the CSM uses this to run all patches
// of a frame through one kernel call.
//
// Gradients replay the scan in reverse: the backward pass streams suffix (and
// for the bidirectional kernel also prefix) accumulators over the incoming
// cotangent, so it is O(T*C) like the forward.

#include <limits>

#include "otter/tape.hpp"

namespace otter {

template <class Real>
struct WkvArgs {
    const TensorT<Real>* k;
    const TensorT<Real>* v;
    const TensorT<Real>* w;
    const TensorT<Real>* u;
};

namespace detail {

template <class Real>
void wkv_check_shapes(const WkvArgs<Real>& a, int block, const char* op) {
    check(a.k->rank() == 2 && a.v->rank() == 2, op, "k and v must be [T,C]");
    check(a.k->same_shape(*a.v), op, "k and v shapes differ");
    const int C = a.k->dim(1);
    check(a.w->size() == static_cast<size_t>(C) && a.u->size() == static_cast<size_t>(C), op,
          "w and u must have one entry per channel");
    const int T = a.k->dim(0);
    check(T >= 1, op, "T must be >= 1");
    check(block >= 1 && T % block == 0, op, "T must be a multiple of the block length");
}

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// exp(x - m) where m is known to be max(x, ...); the max side costs nothing
inline double exp_shift(double x, double m) {
    return x == m ? 1.0 : fast_exp(x - m);
}

// One causal pass over a [T, C] segment (raw pointers, row-major).
// For each t (in scan order) `snap`, when non-null, receives the pre-token
// state (aa, bb, pp): sum over already-scanned tokens of
// e^{-(dist-1)w + k_i} {v_i, 1} represented as {aa, bb} * e^{pp}.
// When `out` is non-null the causal output (and optionally the
// log-denominator `ld`) is emitted directly.
//
// dir = +1 scans t = 0..T-1; dir = -1 scans t = T-1..0.
template <class Real>
void wkv_scan(const Real* k, const Real* v, const Real* w, const Real* u, int T, int C, int dir,
              Real* out, double* ld, double* snap) {
    std::vector<double> aa(static_cast<size_t>(C), 0.0);
    std::vector<double> bb(static_cast<size_t>(C), 0.0);
    std::vector<double> pp(static_cast<size_t>(C), kNegInf);
    const int t0 = dir > 0 ? 0 : T - 1;
    for (int s = 0; s < T; ++s) {
        const int t = t0 + dir * s;
        const Real* krow = k + static_cast<size_t>(t) * C;
        const Real* vrow = v + static_cast<size_t>(t) * C;
        for (int c = 0; c < C; ++c) {
            const size_t cc = static_cast<size_t>(c);
            const double kt = krow[c];
            const double vt = vrow[c];
            if (snap != nullptr) {
                double* sp = snap + (static_cast<size_t>(t) * C + c) * 3;
                sp[0] = aa[cc];
                sp[1] = bb[cc];
                sp[2] = pp[cc];
            }
            if (out != nullptr) {
                const double ub = static_cast<double>(u[c]) + kt;
                const double qq = std::max(pp[cc], ub);
                const double e1 = exp_shift(pp[cc], qq);
                const double e2 = exp_shift(ub, qq);
                const double num = e1 * aa[cc] + e2 * vt;
                const double den = e1 * bb[cc] + e2;
                out[static_cast<size_t>(t) * C + c] = static_cast<Real>(num / den);
                if (ld != nullptr) {
                    ld[static_cast<size_t>(t) * C + c] = qq + fast_log(den);
                }
            }
            // state <- e^{-w} * state + e^{k_t} * {v_t, 1}
            const double wq = pp[cc] - static_cast<double>(w[c]);
            if (wq >= kt) {
                const double e2 = fast_exp(kt - wq);
                aa[cc] += e2 * vt;
                bb[cc] += e2;
                pp[cc] = wq;
            } else {
                const double e1 = fast_exp(wq - kt);
                aa[cc] = e1 * aa[cc] + vt;
                bb[cc] = e1 * bb[cc] + 1.0;
                pp[cc] = kt;
            }
        }
    }
}

// bidirectional segment: reverse scan records state, forward scan combines
template <class Real>
void wkv_bidir_segment(const Real* k, const Real* v, const Real* w, const Real* u, int T, int C,
                       Real* out, double* ld, double* rev_scratch) {
    wkv_scan<Real>(k, v, w, u, T, C, -1, nullptr, nullptr, rev_scratch);
    std::vector<double> aa(static_cast<size_t>(C), 0.0);
    std::vector<double> bb(static_cast<size_t>(C), 0.0);
    std::vector<double> pp(static_cast<size_t>(C), kNegInf);
    for (int t = 0; t < T; ++t) {
        const Real* krow = k + static_cast<size_t>(t) * C;
        const Real* vrow = v + static_cast<size_t>(t) * C;
        for (int c = 0; c < C; ++c) {
            const size_t cc = static_cast<size_t>(c);
            const double kt = krow[c];
            const double vt = vrow[c];
            const double* b = rev_scratch + (static_cast<size_t>(t) * C + c) * 3;
            const double ub = static_cast<double>(u[c]) + kt;
            const double m = std::max(std::max(pp[cc], b[2]), ub);
            const double ef = exp_shift(pp[cc], m);
            const double eb = exp_shift(b[2], m);
            const double eu = exp_shift(ub, m);
            const double num = ef * aa[cc] + eb * b[0] + eu * vt;
            const double den = ef * bb[cc] + eb * b[1] + eu;
            out[static_cast<size_t>(t) * C + c] = static_cast<Real>(num / den);
            if (ld != nullptr) {
                ld[static_cast<size_t>(t) * C + c] = m + fast_log(den);
            }
            const double wq = pp[cc] - static_cast<double>(w[c]);
            if (wq >= kt) {
                const double e2 = fast_exp(kt - wq);
                aa[cc] += e2 * vt;
                bb[cc] += e2;
                pp[cc] = wq;
            } else {
                const double e1 = fast_exp(wq - kt);
                aa[cc] = e1 * aa[cc] + vt;
                bb[cc] = e1 * bb[cc] + 1.0;
                pp[cc] = kt;
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// oracles: direct double summation in 64-bit
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> wkv_causal_oracle(const TensorT<Real>& k, const TensorT<Real>& v,
                                const TensorT<Real>& w, const TensorT<Real>& u) {
    WkvArgs<Real> args{&k, &v, &w, &u};
    detail::wkv_check_shapes(args, 1, "wkv_causal_oracle");
    const int T = k.dim(0), C = k.dim(1);
    TensorT<Real> out({T, C}, Uninit{});
    for (int c = 0; c < C; ++c) {
        const double wc = w.at(static_cast<size_t>(c));
        const double uc = u.at(static_cast<size_t>(c));
        for (int t = 0; t < T; ++t) {
            double num = std::exp(uc + k.at2(t, c)) * v.at2(t, c);
            double den = std::exp(uc + k.at2(t, c));
            for (int i = 0; i < t; ++i) {
                double e = std::exp(-(t - 1 - i) * wc + k.at2(i, c));
                num += e * v.at2(i, c);
                den += e;
            }
            double o = num / den;
            if (!std::isfinite(o)) {
                fail("wkv_causal_oracle", "overflow at t=" + std::to_string(t) +
                                              " channel=" + std::to_string(c));
            }
            out.at2(t, c) = static_cast<Real>(o);
        }
    }
    return out;
}

template <class Real>
TensorT<Real> wkv_bidirectional_oracle(const TensorT<Real>& k, const TensorT<Real>& v,
                                       const TensorT<Real>& w, const TensorT<Real>& u) {
    WkvArgs<Real> args{&k, &v, &w, &u};
    detail::wkv_check_shapes(args, 1, "wkv_bidirectional_oracle");
    const int T = k.dim(0), C = k.dim(1);
    TensorT<Real> out({T, C}, Uninit{});
    for (int c = 0; c < C; ++c) {
        const double wc = w.at(static_cast<size_t>(c));
        const double uc = u.at(static_cast<size_t>(c));
        for (int t = 0; t < T; ++t) {
            double num = std::exp(uc + k.at2(t, c)) * v.at2(t, c);
            double den = std::exp(uc + k.at2(t, c));
            for (int i = 0; i < T; ++i) {
                if (i == t) {
                    continue;
                }
                int dist = i > t ? i - t : t - i;
                double e = std::exp(-(dist - 1) * wc + k.at2(i, c));
                num += e * v.at2(i, c);
                den += e;
            }
            double o = num / den;
            if (!std::isfinite(o)) {
                fail("wkv_bidirectional_oracle", "overflow at t=" + std::to_string(t) +
                                                     " channel=" + std::to_string(c));
            }
            out.at2(t, c) = static_cast<Real>(o);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// streaming kernels
// ---------------------------------------------------------------------------

// Streaming causal kernel; `ld` (optional, length T*C) receives per-entry
// log-denominators for the backward pass. `block` > 0 resets the scan every
// `block` tokens.
template <class Real>
TensorT<Real> wkv_causal_run(const TensorT<Real>& k, const TensorT<Real>& v,
                             const TensorT<Real>& w, const TensorT<Real>& u,
                             double* ld = nullptr, int block = 0) {
    const int T = k.dim(0), C = k.dim(1);
    if (block <= 0) {
        block = T;
    }
    WkvArgs<Real> args{&k, &v, &w, &u};
    detail::wkv_check_shapes(args, block, "wkv_causal");
    TensorT<Real> out({T, C}, Uninit{});
    for (int b0 = 0; b0 < T; b0 += block) {
        const size_t off = static_cast<size_t>(b0) * C;
        detail::wkv_scan<Real>(k.data() + off, v.data() + off, w.data(), u.data(), block, C, +1,
                               out.data() + off, ld == nullptr ? nullptr : ld + off, nullptr);
    }
    out.check_finite("wkv_causal");
    return out;
}

// Streaming bidirectional kernel: a reverse scan records its running state,
// the forward scan combines with it on the fly; the current-token bonus is
// shared exactly once.
template <class Real>
TensorT<Real> wkv_bidirectional_run(const TensorT<Real>& k, const TensorT<Real>& v,
                                    const TensorT<Real>& w, const TensorT<Real>& u,
                                    double* ld = nullptr, int block = 0) {
    const int T = k.dim(0), C = k.dim(1);
    if (block <= 0) {
        block = T;
    }
    WkvArgs<Real> args{&k, &v, &w, &u};
    detail::wkv_check_shapes(args, block, "wkv_bidirectional");
    TensorT<Real> out({T, C}, Uninit{});
    std::vector<double> scratch(static_cast<size_t>(block) * C * 3);
    for (int b0 = 0; b0 < T; b0 += block) {
        const size_t off = static_cast<size_t>(b0) * C;
        detail::wkv_bidir_segment<Real>(k.data() + off, v.data() + off, w.data(), u.data(),
                                        block, C, out.data() + off,
                                        ld == nullptr ? nullptr : ld + off, scratch.data());
    }
    out.check_finite("wkv_bidirectional");
    return out;
}

// ---------------------------------------------------------------------------
// backward: reverse replay of the scan
// ---------------------------------------------------------------------------

namespace detail {

// Gradients for one segment. `bidir` selects whether prefix contributions
// (tokens after t feeding position t) exist. All accumulation is double.
template <class Real>
void wkv_backward_segment(const Real* k, const Real* v, const Real* w, const Real* u,
                          const Real* out, const double* ld, const Real* gout, int T, int C,
                          bool bidir, Real* gk, Real* gv, double* gw, double* gu) {
    std::vector<double> phi(static_cast<size_t>(T));   // g_t / D_t
    std::vector<double> rr(static_cast<size_t>(T));    // out_t
    std::vector<double> ek(static_cast<size_t>(T));    // e^{k_t}
    for (int c = 0; c < C; ++c) {
        const double dw = fast_exp(-static_cast<double>(w[c]));
        const double eu = fast_exp(static_cast<double>(u[c]));
        for (int t = 0; t < T; ++t) {
            const size_t idx = static_cast<size_t>(t) * C + c;
            phi[static_cast<size_t>(t)] = static_cast<double>(gout[idx]) * fast_exp(-ld[idx]);
            rr[static_cast<size_t>(t)] = out[idx];
            ek[static_cast<size_t>(t)] = fast_exp(k[idx]);
        }
        double acc_dw = 0.0;
        double acc_du = 0.0;
        // suffix accumulators: contributions of token j to outputs at t > j
        double S = 0.0, Q = 0.0, Sd = 0.0, Qd = 0.0;
        for (int j = T - 1; j >= 0; --j) {
            const size_t idx = static_cast<size_t>(j) * C + c;
            const double vj = v[idx];
            const double ekj = ek[static_cast<size_t>(j)];
            const double bonus = phi[static_cast<size_t>(j)] * eu * ekj;
            gv[idx] += static_cast<Real>(ekj * S + bonus);
            gk[idx] += static_cast<Real>(ekj * (vj * S - Q) +
                                         bonus * (vj - rr[static_cast<size_t>(j)]));
            acc_du += bonus * (vj - rr[static_cast<size_t>(j)]);
            acc_dw -= ekj * (vj * Sd - Qd);
            // extend the suffix window to include position j
            Sd = dw * (S + Sd);
            Qd = dw * (Q + Qd);
            S = phi[static_cast<size_t>(j)] + dw * S;
            Q = phi[static_cast<size_t>(j)] * rr[static_cast<size_t>(j)] + dw * Q;
        }
        if (bidir) {
            // prefix accumulators: contributions of token j to outputs at t < j
            double P = 0.0, R = 0.0, Pd = 0.0, Rd = 0.0;
            for (int j = 0; j < T; ++j) {
                const size_t idx = static_cast<size_t>(j) * C + c;
                const double vj = v[idx];
                const double ekj = ek[static_cast<size_t>(j)];
                gv[idx] += static_cast<Real>(ekj * P);
                gk[idx] += static_cast<Real>(ekj * (vj * P - R));
                acc_dw -= ekj * (vj * Pd - Rd);
                Pd = dw * (P + Pd);
                Rd = dw * (R + Rd);
                P = phi[static_cast<size_t>(j)] + dw * P;
                R = phi[static_cast<size_t>(j)] * rr[static_cast<size_t>(j)] + dw * R;
            }
        }
        gw[c] += acc_dw;
        gu[c] += acc_du;
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// tape ops
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
VarT<Real> wkv_node(VarT<Real> k, VarT<Real> v, VarT<Real> w, VarT<Real> u, bool bidir,
                    int block) {
    TapeT<Real>& tp = *k.tape;
    const bool wants = tp.any_wants({k, v, w, u});
    const int T = k.value().dim(0), C = k.value().dim(1);
    if (block <= 0) {
        block = T;
    }
    std::shared_ptr<std::vector<double>> ld;
    if (wants) {
        ld = std::make_shared<std::vector<double>>(static_cast<size_t>(T) * C);
    }
    double* ldp = ld ? ld->data() : nullptr;
    TensorT<Real> out = bidir ? wkv_bidirectional_run(k.value(), v.value(), w.value(), u.value(),
                                                      ldp, block)
                              : wkv_causal_run(k.value(), v.value(), w.value(), u.value(), ldp,
                                               block);
    VarT<Real> res = tp.push(std::move(out), wants);
    if (wants) {
        int oid = res.id, ik = k.id, iv = v.id, iw = w.id, iu = u.id;
        tp.set_back(res, [oid, ik, iv, iw, iu, ld, bidir, block, T, C](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            const TensorT<Real>& kk = t.value(ik);
            const TensorT<Real>& vv = t.value(iv);
            const TensorT<Real>& ww = t.value(iw);
            const TensorT<Real>& uu = t.value(iu);
            const TensorT<Real>& oo = t.value(oid);
            TensorT<Real> gk(kk.shape()), gv(vv.shape());
            std::vector<double> gw(static_cast<size_t>(C), 0.0);
            std::vector<double> gu(static_cast<size_t>(C), 0.0);
            for (int b0 = 0; b0 < T; b0 += block) {
                const size_t off = static_cast<size_t>(b0) * C;
                detail::wkv_backward_segment<Real>(
                    kk.data() + off, vv.data() + off, ww.data(), uu.data(), oo.data() + off,
                    ld->data() + off, g.data() + off, block, C, bidir, gk.data() + off,
                    gv.data() + off, gw.data(), gu.data());
            }
            detail::axpy_into(t, ik, gk);
            detail::axpy_into(t, iv, gv);
            if (t.wants_grad(iw)) {
                TensorT<Real>& d = t.grad_buf(iw);
                for (int c = 0; c < C; ++c) {
                    d.at(static_cast<size_t>(c)) += static_cast<Real>(gw[static_cast<size_t>(c)]);
                }
            }
            if (t.wants_grad(iu)) {
                TensorT<Real>& d = t.grad_buf(iu);
                for (int c = 0; c < C; ++c) {
                    d.at(static_cast<size_t>(c)) += static_cast<Real>(gu[static_cast<size_t>(c)]);
                }
            }
        });
    }
    return res;
}

}  // namespace detail

template <class Real>
VarT<Real> wkv_causal(VarT<Real> k, VarT<Real> v, VarT<Real> w, VarT<Real> u, int block = 0) {
    return detail::wkv_node(k, v, w, u, false, block);
}

template <class Real>
VarT<Real> wkv_bidirectional(VarT<Real> k, VarT<Real> v, VarT<Real> w, VarT<Real> u,
                             int block = 0) {
    return detail::wkv_node(k, v, w, u, true, block);
}

}  // namespace otter
