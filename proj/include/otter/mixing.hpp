#pragma once

// The three core units: Spatial Mixing (Q-Shift + bidirectional WKV),
// Time Mixing (token shift + causal WKV) and Channel Mixing. Units come in an
// RWKV-4 or RWKV-5/6 flavor; only the latter carries the gate tensor G.

#include <optional>
#include <string>
#include <vector>

#include "otter/wkv.hpp"

namespace otter {

enum class Variant { Rwkv4, Rwkv56 };

inline const char* variant_name(Variant v) {
    return v == Variant::Rwkv4 ? "rwkv4" : "rwkv56";
}

inline Variant variant_from_name(const std::string& s) {
    if (s == "rwkv4") return Variant::Rwkv4;
    if (s == "rwkv56") return Variant::Rwkv56;
    fail("variant_from_name", "unknown variant '" + s + "'");
}

// ---------------------------------------------------------------------------
// parameter registry (declaration order matters for checkpoints)
// ---------------------------------------------------------------------------

template <class Real>
struct ParamRegistryT {
    struct Entry {
        std::string name;
        TensorT<Real>* tensor;
    };
    std::vector<Entry> entries;

    void add(const std::string& name, TensorT<Real>* t) {
        entries.push_back({name, t});
    }

    size_t coord_count() const {
        size_t n = 0;
        for (const auto& e : entries) {
            n += e.tensor->size();
        }
        return n;
    }
};

using ParamRegistry = ParamRegistryT<float>;

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

// Learnable parameters of one S-Mix / T-Mix unit.
template <class Real>
struct MixParamsT {
    using Tensor = TensorT<Real>;

    Variant variant = Variant::Rwkv56;
    Act gate_act = Act::Sigmoid;     // sigma(.) applied to G (RWKV-5/6 only)
    Act output_act = Act::Identity;  // applied after W_o; extension knob

    Tensor Wr, Wk, Wv, Wo;
    Tensor Wg;  // present iff variant == Rwkv56
    Tensor mu_r, mu_k, mu_v;
    Tensor mu_g;  // present iff variant == Rwkv56
    Tensor w, u;  // decay / current-token bonus

    int channels() const { return Wr.dim(0); }
    bool has_gate() const { return variant == Variant::Rwkv56; }

    void init(int C, Variant var, Act gate, Rng& rng) {
        variant = var;
        gate_act = gate;
        const double ws = 0.4 / std::sqrt(static_cast<double>(C));
        auto randmat = [&](Tensor& t) {
            t = Tensor({C, C});
            for (size_t i = 0; i < t.size(); ++i) {
                t.at(i) = static_cast<Real>(rng.normal(0.0, ws));
            }
        };
        auto randvec = [&](Tensor& t, double lo, double hi) {
            t = Tensor({C});
            for (size_t i = 0; i < t.size(); ++i) {
                t.at(i) = static_cast<Real>(rng.uniform(lo, hi));
            }
        };
        randmat(Wr);
        randmat(Wk);
        randmat(Wv);
        Wo = Tensor::identity(C);
        randvec(mu_r, -1.0, 1.0);
        randvec(mu_k, -1.0, 1.0);
        randvec(mu_v, -1.0, 1.0);
        if (has_gate()) {
            randmat(Wg);
            randvec(mu_g, -1.0, 1.0);
        }
        randvec(w, 0.2, 1.3);
        randvec(u, -0.3, 0.3);
    }

    void register_into(ParamRegistryT<Real>& reg, const std::string& prefix) {
        reg.add(prefix + ".Wr", &Wr);
        reg.add(prefix + ".Wk", &Wk);
        reg.add(prefix + ".Wv", &Wv);
        reg.add(prefix + ".Wo", &Wo);
        reg.add(prefix + ".mu_r", &mu_r);
        reg.add(prefix + ".mu_k", &mu_k);
        reg.add(prefix + ".mu_v", &mu_v);
        if (has_gate()) {
            reg.add(prefix + ".Wg", &Wg);
            reg.add(prefix + ".mu_g", &mu_g);
        }
        reg.add(prefix + ".w", &w);
        reg.add(prefix + ".u", &u);
    }
};

// Channel Mixing carries only the R and V paths.
template <class Real>
struct ChannelMixParamsT {
    using Tensor = TensorT<Real>;

    Act act_r = Act::Sigmoid;
    Act act_v = Act::Relu;

    Tensor Wr, Wv;
    Tensor mu_r, mu_v;

    int channels() const { return Wr.dim(0); }

    void init(int C, Rng& rng) {
        const double ws = 0.4 / std::sqrt(static_cast<double>(C));
        Wr = Tensor({C, C});
        Wv = Tensor({C, C});
        for (size_t i = 0; i < Wr.size(); ++i) {
            Wr.at(i) = static_cast<Real>(rng.normal(0.0, ws));
        }
        for (size_t i = 0; i < Wv.size(); ++i) {
            Wv.at(i) = static_cast<Real>(rng.normal(0.0, ws));
        }
        mu_r = Tensor({C});
        mu_v = Tensor({C});
        for (int c = 0; c < C; ++c) {
            mu_r.at(static_cast<size_t>(c)) = static_cast<Real>(rng.uniform(-1.0, 1.0));
            mu_v.at(static_cast<size_t>(c)) = static_cast<Real>(rng.uniform(-1.0, 1.0));
        }
    }

    void register_into(ParamRegistryT<Real>& reg, const std::string& prefix) {
        reg.add(prefix + ".Wr", &Wr);
        reg.add(prefix + ".Wv", &Wv);
        reg.add(prefix + ".mu_r", &mu_r);
        reg.add(prefix + ".mu_v", &mu_v);
    }
};

using MixParams = MixParamsT<float>;
using ChannelMixParams = ChannelMixParamsT<float>;

// ---------------------------------------------------------------------------
// leafed views: parameters placed on a tape for one step
// ---------------------------------------------------------------------------

template <class Real>
struct MixVarsT {
    Variant variant;
    Act gate_act, output_act;
    VarT<Real> Wr, Wk, Wv, Wo, Wg;
    VarT<Real> one_minus_mu_r, one_minus_mu_k, one_minus_mu_v, one_minus_mu_g;
    VarT<Real> w, u;
};

template <class Real>
MixVarsT<Real> leaf_mix(TapeT<Real>& tp, const MixParamsT<Real>& p) {
    MixVarsT<Real> mv;
    mv.variant = p.variant;
    mv.gate_act = p.gate_act;
    mv.output_act = p.output_act;
    mv.Wr = tp.leaf(p.Wr);
    mv.Wk = tp.leaf(p.Wk);
    mv.Wv = tp.leaf(p.Wv);
    mv.Wo = tp.leaf(p.Wo);
    // mu is stored unconstrained; the effective interpolation weight is
    // sigmoid(mu), so (1 - mu_eff) stays in (0, 1) during SGD.
    mv.one_minus_mu_r = affine(sigmoid(tp.leaf(p.mu_r)), Real(-1), Real(1));
    mv.one_minus_mu_k = affine(sigmoid(tp.leaf(p.mu_k)), Real(-1), Real(1));
    mv.one_minus_mu_v = affine(sigmoid(tp.leaf(p.mu_v)), Real(-1), Real(1));
    if (p.has_gate()) {
        mv.Wg = tp.leaf(p.Wg);
        mv.one_minus_mu_g = affine(sigmoid(tp.leaf(p.mu_g)), Real(-1), Real(1));
    }
    mv.w = tp.leaf(p.w);
    mv.u = tp.leaf(p.u);
    return mv;
}

template <class Real>
struct ChannelMixVarsT {
    Act act_r, act_v;
    VarT<Real> Wr, Wv;
    VarT<Real> one_minus_mu_r, one_minus_mu_v;
};

template <class Real>
ChannelMixVarsT<Real> leaf_mix(TapeT<Real>& tp, const ChannelMixParamsT<Real>& p) {
    ChannelMixVarsT<Real> mv;
    mv.act_r = p.act_r;
    mv.act_v = p.act_v;
    mv.Wr = tp.leaf(p.Wr);
    mv.Wv = tp.leaf(p.Wv);
    mv.one_minus_mu_r = affine(sigmoid(tp.leaf(p.mu_r)), Real(-1), Real(1));
    mv.one_minus_mu_v = affine(sigmoid(tp.leaf(p.mu_v)), Real(-1), Real(1));
    return mv;
}

// ---------------------------------------------------------------------------
// token shifts
// ---------------------------------------------------------------------------

// Quadrant shift over an H x W grid of tokens in raster order. Channel
// quarters [0,C/4) / [C/4,C/2) / [C/2,3C/4) / [3C/4,C) read the neighbor
// above / below / left / right; out-of-bounds neighbors contribute zeros.
// Quarter boundaries use integer division, which also covers channel counts
// that are not multiples of four (image data has C = 3). With `blocks` > 1
// the input holds that many independent grids back to back.
template <class Real>
VarT<Real> q_shift(VarT<Real> x, int H, int W, int blocks = 1) {
    check(x.value().rank() == 2, "q_shift", "tokens must be [T,C]");
    const int T = x.value().dim(0), C = x.value().dim(1);
    check(T == H * W * blocks, "q_shift", "token count does not match grid");
    TapeT<Real>& tp = *x.tape;
    const int q1 = C / 4, q2 = C / 2, q3 = 3 * C / 4;
    TensorT<Real> out({T, C});
    const auto& xv = x.value();
    for (int b = 0; b < blocks; ++b) {
        const size_t base = static_cast<size_t>(b) * H * W;
        for (int y = 0; y < H; ++y) {
            for (int xx = 0; xx < W; ++xx) {
                Real* orow = out.data() + (base + static_cast<size_t>(y) * W + xx) * C;
                auto pull = [&](int cs, int ce, int ny, int nx) {
                    if (ny < 0 || ny >= H || nx < 0 || nx >= W) {
                        return;  // zeros already present
                    }
                    const Real* srow = xv.data() + (base + static_cast<size_t>(ny) * W + nx) * C;
                    for (int c = cs; c < ce; ++c) {
                        orow[c] = srow[c];
                    }
                };
                pull(0, q1, y - 1, xx);
                pull(q1, q2, y + 1, xx);
                pull(q2, q3, y, xx - 1);
                pull(q3, C, y, xx + 1);
            }
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(x.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ix = x.id;
        tp.set_back(v, [oid, ix, H, W, C, q1, q2, q3, blocks](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            TensorT<Real>& d = t.grad_buf(ix);
            for (int b = 0; b < blocks; ++b) {
                const size_t base = static_cast<size_t>(b) * H * W;
                for (int y = 0; y < H; ++y) {
                    for (int xx = 0; xx < W; ++xx) {
                        const Real* grow =
                            g.data() + (base + static_cast<size_t>(y) * W + xx) * C;
                        auto push_back_to = [&](int cs, int ce, int ny, int nx) {
                            if (ny < 0 || ny >= H || nx < 0 || nx >= W) {
                                return;
                            }
                            Real* drow =
                                d.data() + (base + static_cast<size_t>(ny) * W + nx) * C;
                            for (int c = cs; c < ce; ++c) {
                                drow[c] += grow[c];
                            }
                        };
                        push_back_to(0, q1, y - 1, xx);
                        push_back_to(q1, q2, y + 1, xx);
                        push_back_to(q2, q3, y, xx - 1);
                        push_back_to(q3, C, y, xx + 1);
                    }
                }
            }
        });
    }
    return v;
}

// Regroup an H x W token grid into (H/p)*(W/p) patch tokens whose features
// are the p*p*C pixel values in raster order.
template <class Real>
VarT<Real> im2patches(VarT<Real> frame, int H, int W, int p) {
    check(frame.value().rank() == 2 && frame.value().dim(0) == H * W, "im2patches",
          "frame tokens must be [H*W, C]");
    check(H % p == 0 && W % p == 0, "im2patches", "grid not divisible by patch");
    const int C = frame.value().dim(1);
    const int Ho = H / p, Wo = W / p;
    TapeT<Real>& tp = *frame.tape;
    TensorT<Real> out({Ho * Wo, p * p * C}, Uninit{});
    const auto& xv = frame.value();
    for (int py = 0; py < Ho; ++py) {
        for (int px = 0; px < Wo; ++px) {
            Real* drow = out.data() + (static_cast<size_t>(py) * Wo + px) * (p * p * C);
            for (int y = 0; y < p; ++y) {
                for (int x = 0; x < p; ++x) {
                    const int src = (py * p + y) * W + (px * p + x);
                    const Real* srow = xv.data() + static_cast<size_t>(src) * C;
                    for (int c = 0; c < C; ++c) {
                        drow[(static_cast<size_t>(y) * p + x) * C + c] = srow[c];
                    }
                }
            }
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(frame.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ifr = frame.id;
        tp.set_back(v, [oid, ifr, W, p, C, Ho, Wo](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            TensorT<Real>& d = t.grad_buf(ifr);
            for (int py = 0; py < Ho; ++py) {
                for (int px = 0; px < Wo; ++px) {
                    const Real* grow =
                        g.data() + (static_cast<size_t>(py) * Wo + px) * (p * p * C);
                    for (int y = 0; y < p; ++y) {
                        for (int x = 0; x < p; ++x) {
                            const int dst = (py * p + y) * W + (px * p + x);
                            Real* drow = d.data() + static_cast<size_t>(dst) * C;
                            for (int c = 0; c < C; ++c) {
                                drow[c] += grow[(static_cast<size_t>(y) * p + x) * C + c];
                            }
                        }
                    }
                }
            }
        });
    }
    return v;
}

// Inverse of im2patches: place patch-major pixel rows back onto the grid.
template <class Real>
VarT<Real> patches2im(VarT<Real> x, int H, int W, int p) {
    check(H % p == 0 && W % p == 0, "patches2im", "grid not divisible by patch");
    const int Ho = H / p, Wo = W / p;
    check(x.value().rank() == 2 && x.value().dim(0) == Ho * Wo, "patches2im",
          "expected one row per patch");
    const int C = x.value().dim(1) / (p * p);
    check(C * p * p == x.value().dim(1), "patches2im", "row length is not p*p*C");
    TapeT<Real>& tp = *x.tape;
    TensorT<Real> out({H * W, C}, Uninit{});
    const auto& xv = x.value();
    for (int py = 0; py < Ho; ++py) {
        for (int px = 0; px < Wo; ++px) {
            const Real* srow = xv.data() + (static_cast<size_t>(py) * Wo + px) * (p * p * C);
            for (int y = 0; y < p; ++y) {
                for (int x2 = 0; x2 < p; ++x2) {
                    const int dst = (py * p + y) * W + (px * p + x2);
                    Real* drow = out.data() + static_cast<size_t>(dst) * C;
                    for (int c = 0; c < C; ++c) {
                        drow[c] = srow[(static_cast<size_t>(y) * p + x2) * C + c];
                    }
                }
            }
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(x.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ix = x.id;
        tp.set_back(v, [oid, ix, W, p, C, Ho, Wo](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            TensorT<Real>& d = t.grad_buf(ix);
            for (int py = 0; py < Ho; ++py) {
                for (int px = 0; px < Wo; ++px) {
                    Real* drow = d.data() + (static_cast<size_t>(py) * Wo + px) * (p * p * C);
                    for (int y = 0; y < p; ++y) {
                        for (int x2 = 0; x2 < p; ++x2) {
                            const int src = (py * p + y) * W + (px * p + x2);
                            const Real* grow = g.data() + static_cast<size_t>(src) * C;
                            for (int c = 0; c < C; ++c) {
                                drow[(static_cast<size_t>(y) * p + x2) * C + c] += grow[c];
                            }
                        }
                    }
                }
            }
        });
    }
    return v;
}

// Previous-token shift: row t reads row t-1, row 0 reads zeros.
template <class Real>
VarT<Real> token_shift(VarT<Real> x) {
    check(x.value().rank() == 2, "token_shift", "tokens must be [T,C]");
    const int T = x.value().dim(0), C = x.value().dim(1);
    TapeT<Real>& tp = *x.tape;
    TensorT<Real> out({T, C});
    for (int t = 1; t < T; ++t) {
        for (int c = 0; c < C; ++c) {
            out.at2(t, c) = x.value().at2(t - 1, c);
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(x.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ix = x.id;
        tp.set_back(v, [oid, ix, T, C](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            TensorT<Real>& d = t.grad_buf(ix);
            for (int r = 1; r < T; ++r) {
                for (int c = 0; c < C; ++c) {
                    d.at2(r - 1, c) += g.at2(r, c);
                }
            }
        });
    }
    return v;
}

// ---------------------------------------------------------------------------
// token interpolation and the mixing units
// ---------------------------------------------------------------------------

// fused x + om (.) x_shifted (single pass; om broadcasts over rows)
template <class Real>
VarT<Real> interp_shift(VarT<Real> x, VarT<Real> xs, VarT<Real> om) {
    detail::require_same_shape(x, xs, "interp_shift");
    check(om.value().size() == static_cast<size_t>(x.value().dim(1)), "interp_shift",
          "mu vector length must equal column count");
    TapeT<Real>& tp = *x.tape;
    const int T = x.value().dim(0), C = x.value().dim(1);
    TensorT<Real> out({T, C}, Uninit{});
    const Real* px = x.value().data();
    const Real* ps = xs.value().data();
    const Real* po = om.value().data();
    Real* pd = out.data();
    for (int t = 0; t < T; ++t) {
        for (int c = 0; c < C; ++c) {
            pd[static_cast<size_t>(t) * C + c] =
                px[static_cast<size_t>(t) * C + c] + po[c] * ps[static_cast<size_t>(t) * C + c];
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.any_wants({x, xs, om}));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ix = x.id, is = xs.id, io = om.id;
        tp.set_back(v, [oid, ix, is, io, T, C](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            detail::axpy_into(t, ix, g);
            if (t.wants_grad(is)) {
                TensorT<Real>& d = t.grad_buf(is);
                const TensorT<Real>& ov = t.value(io);
                for (int r = 0; r < T; ++r) {
                    for (int c = 0; c < C; ++c) {
                        d.at2(r, c) += g.at2(r, c) * ov.at(static_cast<size_t>(c));
                    }
                }
            }
            if (t.wants_grad(io)) {
                TensorT<Real>& d = t.grad_buf(io);
                const TensorT<Real>& sv = t.value(is);
                for (int c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int r = 0; r < T; ++r) {
                        acc += static_cast<double>(g.at2(r, c)) * sv.at2(r, c);
                    }
                    d.at(static_cast<size_t>(c)) += static_cast<Real>(acc);
                }
            }
        });
    }
    return v;
}

// fused f(a) (.) b for the activation kinds used by the gates
template <class Real>
VarT<Real> act_mul(VarT<Real> a, VarT<Real> b, Act act) {
    if (act == Act::One) {
        return b;
    }
    if (act == Act::Identity) {
        return mul(a, b);
    }
    detail::require_same_shape(a, b, "act_mul");
    TapeT<Real>& tp = *a.tape;
    const size_t n = a.value().size();
    TensorT<Real> out(a.value().shape(), Uninit{});
    auto fa = std::make_shared<std::vector<Real>>(n);  // f(a); sigma(a) for silu
    const Real* pa = a.value().data();
    const Real* pb = b.value().data();
    Real* pd = out.data();
    for (size_t i = 0; i < n; ++i) {
        Real f;
        if (act == Act::Sigmoid) {
            f = sigmoid_r(pa[i]);
            (*fa)[i] = f;
        } else if (act == Act::Silu) {
            const Real s = sigmoid_r(pa[i]);
            (*fa)[i] = s;
            f = pa[i] * s;
        } else {  // Relu
            tp.fold_relu_sign(pa[i] > Real(0));
            f = pa[i] > Real(0) ? pa[i] : Real(0);
            (*fa)[i] = f;
        }
        pd[i] = f * pb[i];
    }
    VarT<Real> v = tp.push(std::move(out), tp.any_wants({a, b}));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id, ib = b.id;
        tp.set_back(v, [oid, ia, ib, fa, act, n](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            const TensorT<Real>& av = t.value(ia);
            const TensorT<Real>& bv = t.value(ib);
            const bool wa = t.wants_grad(ia);
            const bool wb = t.wants_grad(ib);
            TensorT<Real>* da = wa ? &t.grad_buf(ia) : nullptr;
            TensorT<Real>* db = wb ? &t.grad_buf(ib) : nullptr;
            for (size_t i = 0; i < n; ++i) {
                Real f, fp;
                if (act == Act::Sigmoid) {
                    f = (*fa)[i];
                    fp = f * (Real(1) - f);
                } else if (act == Act::Silu) {
                    const Real sgm = (*fa)[i];
                    f = av.at(i) * sgm;
                    fp = sgm * (Real(1) + av.at(i) * (Real(1) - sgm));
                } else {
                    f = (*fa)[i];
                    fp = av.at(i) > Real(0) ? Real(1) : Real(0);
                }
                if (wa) {
                    da->at(i) += g.at(i) * bv.at(i) * fp;
                }
                if (wb) {
                    db->at(i) += g.at(i) * f;
                }
            }
        });
    }
    return v;
}

// fused (x + om (.) xs) * W: the interpolation never materializes
template <class Real>
VarT<Real> interp_project(VarT<Real> x, VarT<Real> xs, VarT<Real> om, VarT<Real> W) {
    detail::require_same_shape(x, xs, "interp_project");
    const int T = x.value().dim(0), C = x.value().dim(1);
    check(W.value().rank() == 2 && W.value().dim(0) == C, "interp_project",
          "projection rows must match channels");
    const int N = W.value().dim(1);
    check(om.value().size() == static_cast<size_t>(C), "interp_project",
          "mu vector length must equal column count");
    TapeT<Real>& tp = *x.tape;
    TensorT<Real> out({T, N}, Uninit{});
    const Real* px = x.value().data();
    const Real* ps = xs.value().data();
    const Real* po = om.value().data();
    const Real* pw = W.value().data();
    constexpr int kMaxC = 256;
    check(C <= kMaxC && N <= kMaxC, "interp_project", "channel buffer exceeded");
    if (C == 3 && N == 3) {  // the image-channel case dominates the CSM
        const Real o0 = po[0], o1 = po[1], o2 = po[2];
        const Real w00 = pw[0], w01 = pw[1], w02 = pw[2];
        const Real w10 = pw[3], w11 = pw[4], w12 = pw[5];
        const Real w20 = pw[6], w21 = pw[7], w22 = pw[8];
        Real* pd = out.data();
        for (int t = 0; t < T; ++t) {
            const size_t o = static_cast<size_t>(t) * 3;
            const Real i0 = px[o] + o0 * ps[o];
            const Real i1 = px[o + 1] + o1 * ps[o + 1];
            const Real i2 = px[o + 2] + o2 * ps[o + 2];
            pd[o] = i0 * w00 + i1 * w10 + i2 * w20;
            pd[o + 1] = i0 * w01 + i1 * w11 + i2 * w21;
            pd[o + 2] = i0 * w02 + i1 * w12 + i2 * w22;
        }
    } else {
        Real ibuf[kMaxC];
        for (int t = 0; t < T; ++t) {
            const Real* xr = px + static_cast<size_t>(t) * C;
            const Real* sr = ps + static_cast<size_t>(t) * C;
            for (int c = 0; c < C; ++c) {
                ibuf[c] = xr[c] + po[c] * sr[c];
            }
            Real* orow = out.data() + static_cast<size_t>(t) * N;
            for (int j = 0; j < N; ++j) {
                orow[j] = Real(0);
            }
            for (int c = 0; c < C; ++c) {
                const Real iv = ibuf[c];
                const Real* wr = pw + static_cast<size_t>(c) * N;
                for (int j = 0; j < N; ++j) {
                    orow[j] += iv * wr[j];
                }
            }
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.any_wants({x, xs, om, W}));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ix = x.id, is = xs.id, io = om.id, iw = W.id;
        tp.set_back(v, [oid, ix, is, io, iw, T, C, N](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            const TensorT<Real>& xv = t.value(ix);
            const TensorT<Real>& sv = t.value(is);
            const TensorT<Real>& ov = t.value(io);
            const TensorT<Real>& wv = t.value(iw);
            // dI = G * W^T, then dx += dI, dxs += om (.) dI, dom += sum xs (.) dI
            TensorT<Real> di({T, C}, Uninit{});
            detail::gemm_nt_acc(g.data(), wv.data(), di.data(), T, N, C, false);
            if (t.wants_grad(ix)) {
                detail::axpy_into(t, ix, di);
            }
            if (t.wants_grad(is)) {
                TensorT<Real>& d = t.grad_buf(is);
                for (int r = 0; r < T; ++r) {
                    for (int c = 0; c < C; ++c) {
                        d.at2(r, c) += di.at2(r, c) * ov.at(static_cast<size_t>(c));
                    }
                }
            }
            if (t.wants_grad(io)) {
                TensorT<Real>& d = t.grad_buf(io);
                for (int c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int r = 0; r < T; ++r) {
                        acc += static_cast<double>(di.at2(r, c)) * sv.at2(r, c);
                    }
                    d.at(static_cast<size_t>(c)) += static_cast<Real>(acc);
                }
            }
            if (t.wants_grad(iw)) {
                // dW = I^T * G with I recomputed on the fly
                TensorT<Real> interp({T, C}, Uninit{});
                for (int r = 0; r < T; ++r) {
                    for (int c = 0; c < C; ++c) {
                        interp.at2(r, c) =
                            xv.at2(r, c) + ov.at(static_cast<size_t>(c)) * sv.at2(r, c);
                    }
                }
                detail::gemm_tn_acc(interp.data(), g.data(), t.grad_buf(iw).data(), C, T, N,
                                    true);
            }
        });
    }
    return v;
}

// x + (1 - mu) (.) x_shifted, then projection. `one_minus_mu` is the
// pre-computed (1 - mu_effective) channel vector.
template <class Real>
VarT<Real> token_interp(VarT<Real> x, VarT<Real> x_shifted, VarT<Real> one_minus_mu,
                        VarT<Real> W) {
    return interp_project(x, x_shifted, one_minus_mu, W);
}

template <class Real>
struct InterpOut {
    VarT<Real> r, k, v, g;
    bool has_g = false;
};

template <class Real>
InterpOut<Real> token_interp_all(VarT<Real> x, VarT<Real> x_shifted, const MixVarsT<Real>& mv) {
    InterpOut<Real> o;
    o.r = token_interp(x, x_shifted, mv.one_minus_mu_r, mv.Wr);
    o.k = token_interp(x, x_shifted, mv.one_minus_mu_k, mv.Wk);
    o.v = token_interp(x, x_shifted, mv.one_minus_mu_v, mv.Wv);
    if (mv.variant == Variant::Rwkv56) {
        o.g = token_interp(x, x_shifted, mv.one_minus_mu_g, mv.Wg);
        o.has_g = true;
    }
    return o;
}

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

// o_t = sigma(g_t) (.) Norm(sigmoid(r_t) (.) wkv_t), then W_o; the gate factor
// exists only in the RWKV-5/6 variant.
template <class Real>
VarT<Real> mix_output(const InterpOut<Real>& io, VarT<Real> wkv, const MixVarsT<Real>& mv) {
    VarT<Real> y = layer_norm(act_mul(io.r, wkv, Act::Sigmoid), Real(kLayerNormEps));
    if (io.has_g) {
        y = act_mul(io.g, y, mv.gate_act);
    }
    y = matmul(y, mv.Wo);
    return apply_act(y, mv.output_act);
}

}  // namespace detail

// Spatial Mixing over `blocks` independent H x W grids of tokens (raster
// order within each grid).
template <class Real>
VarT<Real> spatial_mix(VarT<Real> x, int H, int W, const MixVarsT<Real>& mv, int blocks = 1) {
    VarT<Real> xs = q_shift(x, H, W, blocks);
    InterpOut<Real> io = token_interp_all(x, xs, mv);
    VarT<Real> wk = wkv_bidirectional(io.k, io.v, mv.w, mv.u, blocks > 1 ? H * W : 0);
    return detail::mix_output(io, wk, mv);
}

// Time Mixing over frame-ordered tokens (zero token before t = 1).
template <class Real>
VarT<Real> time_mix(VarT<Real> x, const MixVarsT<Real>& mv) {
    VarT<Real> xs = token_shift(x);
    InterpOut<Real> io = token_interp_all(x, xs, mv);
    VarT<Real> wk = wkv_causal(io.k, io.v, mv.w, mv.u);
    return detail::mix_output(io, wk, mv);
}

// Channel Mixing: O = sigma_r(R) (.) sigma_v(V). The caller chooses the token
// shift (q_shift in spatial contexts, token_shift in temporal ones).
template <class Real>
VarT<Real> channel_mix(VarT<Real> x, VarT<Real> x_shifted, const ChannelMixVarsT<Real>& mv) {
    VarT<Real> r = token_interp(x, x_shifted, mv.one_minus_mu_r, mv.Wr);
    VarT<Real> v = token_interp(x, x_shifted, mv.one_minus_mu_v, mv.Wv);
    return act_mul(r, apply_act(v, mv.act_v), mv.act_r);
}

template <class Real>
VarT<Real> channel_mix_spatial(VarT<Real> x, int H, int W, const ChannelMixVarsT<Real>& mv,
                               int blocks = 1) {
    return channel_mix(x, q_shift(x, H, W, blocks), mv);
}

template <class Real>
VarT<Real> channel_mix_temporal(VarT<Real> x, const ChannelMixVarsT<Real>& mv) {
    return channel_mix(x, token_shift(x), mv);
}

}  // namespace otter
