#pragma once

// Compound Segmentation Module: segment each frame into p x p patches, run
// S-Mix / C-Mix residual branches per patch, learn a sigmoid saliency weight
// per patch, reassemble into the frame, then a global S-Mix / C-Mix pass and
// a residual connection with the raw frame.
//
// Frames are carried as [H*W, C] token matrices in raster order.

#include <vector>

#include "otter/mixing.hpp"

namespace otter {

// ---------------------------------------------------------------------------
// segmentation geometry
// ---------------------------------------------------------------------------

struct PatchOrigin {
    int y, x;
};

inline std::vector<PatchOrigin> patch_origins(int H, int W, int p) {
    check(p >= 1, "segment", "patch size must be >= 1");
    check(H % p == 0 && W % p == 0, "segment",
          "H=" + std::to_string(H) + " W=" + std::to_string(W) +
              " not divisible by p=" + std::to_string(p));
    std::vector<PatchOrigin> origins;
    origins.reserve(static_cast<size_t>(H / p) * (W / p));
    for (int y = 0; y < H; y += p) {
        for (int x = 0; x < W; x += p) {
            origins.push_back({y, x});
        }
    }
    return origins;
}

// Extract one p x p patch (raster token order) from a [H*W, C] frame.
template <class Real>
VarT<Real> extract_patch(VarT<Real> frame, int H, int W, PatchOrigin o, int p) {
    check(frame.value().rank() == 2 && frame.value().dim(0) == H * W, "extract_patch",
          "frame tokens must be [H*W, C]");
    const int C = frame.value().dim(1);
    TapeT<Real>& tp = *frame.tape;
    TensorT<Real> out({p * p, C}, Uninit{});
    for (int y = 0; y < p; ++y) {
        for (int x = 0; x < p; ++x) {
            const int src = (o.y + y) * W + (o.x + x);
            const Real* srow = frame.value().data() + static_cast<size_t>(src) * C;
            Real* drow = out.data() + (static_cast<size_t>(y) * p + x) * C;
            for (int c = 0; c < C; ++c) {
                drow[c] = srow[c];
            }
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(frame.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ifr = frame.id;
        tp.set_back(v, [oid, ifr, W, o, p, C](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            TensorT<Real>& d = t.grad_buf(ifr);
            for (int y = 0; y < p; ++y) {
                for (int x = 0; x < p; ++x) {
                    const int dst = (o.y + y) * W + (o.x + x);
                    Real* drow = d.data() + static_cast<size_t>(dst) * C;
                    const Real* grow = g.data() + (static_cast<size_t>(y) * p + x) * C;
                    for (int c = 0; c < C; ++c) {
                        drow[c] += grow[c];
                    }
                }
            }
        });
    }
    return v;
}

// Spec-level Seg(frame, p): the complete patch set in row-major patch order.
template <class Real>
std::vector<VarT<Real>> segment(VarT<Real> frame, int H, int W, int p) {
    std::vector<VarT<Real>> patches;
    for (const PatchOrigin& o : patch_origins(H, W, p)) {
        patches.push_back(extract_patch(frame, H, W, o, p));
    }
    return patches;
}

// RT(...): write each patch back to its raw position. Origins must form an
// exact partition of the H x W grid.
template <class Real>
VarT<Real> reassemble(const std::vector<VarT<Real>>& patches,
                      const std::vector<PatchOrigin>& origins, int H, int W, int p) {
    check(!patches.empty(), "reassemble", "empty patch set");
    check(patches.size() == origins.size(), "reassemble", "patch/origin count mismatch");
    check(static_cast<int>(patches.size()) * p * p == H * W, "reassemble",
          "patch set does not cover the grid exactly");
    const int C = patches[0].value().dim(1);
    TapeT<Real>& tp = *patches[0].tape;
    TensorT<Real> out({H * W, C}, Uninit{});
    std::vector<char> covered(static_cast<size_t>(H) * W, 0);
    bool wants = false;
    for (size_t i = 0; i < patches.size(); ++i) {
        check(patches[i].value().dim(0) == p * p && patches[i].value().dim(1) == C,
              "reassemble", "patch shape mismatch");
        wants = wants || tp.wants_grad(patches[i].id);
        const PatchOrigin o = origins[i];
        for (int y = 0; y < p; ++y) {
            for (int x = 0; x < p; ++x) {
                const int dst = (o.y + y) * W + (o.x + x);
                check(!covered[static_cast<size_t>(dst)], "reassemble", "duplicate patch cell");
                covered[static_cast<size_t>(dst)] = 1;
                const Real* srow =
                    patches[i].value().data() + (static_cast<size_t>(y) * p + x) * C;
                Real* drow = out.data() + static_cast<size_t>(dst) * C;
                for (int c = 0; c < C; ++c) {
                    drow[c] = srow[c];
                }
            }
        }
    }
    for (char cvd : covered) {
        check(cvd != 0, "reassemble", "missing patch cell");
    }
    VarT<Real> v = tp.push(std::move(out), wants);
    if (tp.wants_grad(v.id)) {
        auto ids = std::make_shared<std::vector<int>>();
        for (const auto& pt : patches) {
            ids->push_back(pt.id);
        }
        auto org = std::make_shared<std::vector<PatchOrigin>>(origins);
        int oid = v.id;
        tp.set_back(v, [oid, ids, org, W, p, C](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            for (size_t i = 0; i < ids->size(); ++i) {
                const int pid = (*ids)[i];
                if (!t.wants_grad(pid)) {
                    continue;
                }
                TensorT<Real>& d = t.grad_buf(pid);
                const PatchOrigin o = (*org)[i];
                for (int y = 0; y < p; ++y) {
                    for (int x = 0; x < p; ++x) {
                        const int src = (o.y + y) * W + (o.x + x);
                        const Real* grow = g.data() + static_cast<size_t>(src) * C;
                        Real* drow = d.data() + (static_cast<size_t>(y) * p + x) * C;
                        for (int c = 0; c < C; ++c) {
                            drow[c] += grow[c];
                        }
                    }
                }
            }
        });
    }
    return v;
}

// ---------------------------------------------------------------------------
// 3x3 convolution over token grids (stride 1, zero padding)
// ---------------------------------------------------------------------------

template <class Real>
VarT<Real> conv2d_3x3(VarT<Real> x, int H, int W, VarT<Real> kernel, VarT<Real> bias,
                      int blocks = 1) {
    check(x.value().rank() == 2 && x.value().dim(0) == H * W * blocks, "conv2d_3x3",
          "tokens must be [blocks*H*W, C]");
    const int Ci = x.value().dim(1);
    check(kernel.value().rank() == 4 && kernel.value().dim(1) == Ci &&
              kernel.value().dim(2) == 3 && kernel.value().dim(3) == 3,
          "conv2d_3x3", "kernel must be [Co, Ci, 3, 3]");
    const int Co = kernel.value().dim(0);
    check(bias.value().size() == static_cast<size_t>(Co), "conv2d_3x3", "bias must be [Co]");
    TapeT<Real>& tp = *x.tape;
    TensorT<Real> out({H * W * blocks, Co}, Uninit{});
    const auto& xv = x.value();
    const auto& kv = kernel.value();
    for (int b = 0; b < blocks; ++b) {
        const size_t base = static_cast<size_t>(b) * H * W;
        for (int y = 0; y < H; ++y) {
            const int dy_lo = y == 0 ? 0 : -1;
            const int dy_hi = y == H - 1 ? 0 : 1;
            for (int xx = 0; xx < W; ++xx) {
                const int dx_lo = xx == 0 ? 0 : -1;
                const int dx_hi = xx == W - 1 ? 0 : 1;
                Real* orow = out.data() + (base + static_cast<size_t>(y) * W + xx) * Co;
                for (int co = 0; co < Co; ++co) {
                    orow[co] = bias.value().at(static_cast<size_t>(co));
                }
                for (int dy = dy_lo; dy <= dy_hi; ++dy) {
                    for (int dx = dx_lo; dx <= dx_hi; ++dx) {
                        const Real* srow =
                            xv.data() + (base + static_cast<size_t>(y + dy) * W + xx + dx) * Ci;
                        const Real* kt = kv.data() + static_cast<size_t>((dy + 1) * 3 + dx + 1);
                        for (int co = 0; co < Co; ++co) {
                            Real acc = Real(0);
                            const Real* kk = kt + static_cast<size_t>(co) * Ci * 9;
                            for (int ci = 0; ci < Ci; ++ci) {
                                acc += srow[ci] * kk[static_cast<size_t>(ci) * 9];
                            }
                            orow[co] += acc;
                        }
                    }
                }
            }
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.any_wants({x, kernel, bias}));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ix = x.id, ik = kernel.id, ibb = bias.id;
        tp.set_back(v, [oid, ix, ik, ibb, H, W, Ci, Co, blocks](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            const TensorT<Real>& xv2 = t.value(ix);
            const TensorT<Real>& kv2 = t.value(ik);
            const bool wx = t.wants_grad(ix);
            const bool wk = t.wants_grad(ik);
            const bool wb = t.wants_grad(ibb);
            TensorT<Real>* dx = wx ? &t.grad_buf(ix) : nullptr;
            TensorT<Real>* dK = wk ? &t.grad_buf(ik) : nullptr;
            TensorT<Real>* db = wb ? &t.grad_buf(ibb) : nullptr;
            for (int b = 0; b < blocks; ++b) {
                const size_t base = static_cast<size_t>(b) * H * W;
                for (int y = 0; y < H; ++y) {
                    for (int xx = 0; xx < W; ++xx) {
                        const Real* grow =
                            g.data() + (base + static_cast<size_t>(y) * W + xx) * Co;
                        for (int co = 0; co < Co; ++co) {
                            const Real gv = grow[co];
                            if (gv == Real(0)) {
                                continue;
                            }
                            if (wb) {
                                db->at(static_cast<size_t>(co)) += gv;
                            }
                            for (int dy = -1; dy <= 1; ++dy) {
                                const int ny = y + dy;
                                if (ny < 0 || ny >= H) {
                                    continue;
                                }
                                for (int dxx = -1; dxx <= 1; ++dxx) {
                                    const int nx = xx + dxx;
                                    if (nx < 0 || nx >= W) {
                                        continue;
                                    }
                                    const size_t koff =
                                        ((static_cast<size_t>(co) * Ci) * 3 + (dy + 1)) * 3 +
                                        (dxx + 1);
                                    const size_t soff =
                                        (base + static_cast<size_t>(ny) * W + nx) * Ci;
                                    for (int ci = 0; ci < Ci; ++ci) {
                                        if (wx) {
                                            dx->at(soff + ci) +=
                                                gv * kv2.at(koff + static_cast<size_t>(ci) * 9);
                                        }
                                        if (wk) {
                                            dK->at(koff + static_cast<size_t>(ci) * 9) +=
                                                gv * xv2.at(soff + ci);
                                        }
                                    }
                                }
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
// CSM parameters
// ---------------------------------------------------------------------------

template <class Real>
struct CsmParamsT {
    using Tensor = TensorT<Real>;

    MixParamsT<Real> patch_smix;
    ChannelMixParamsT<Real> patch_cmix;
    Tensor conv_w;  // [C, C, 3, 3]
    Tensor conv_b;  // [C]
    MixParamsT<Real> global_smix;
    ChannelMixParamsT<Real> global_cmix;

    void init(int C, Variant var, Rng& rng) {
        // sigma(.) inside the CSM's S-Mix is Sigmoid; C-Mix uses Sigmoid/ReLU
        patch_smix.init(C, var, Act::Sigmoid, rng);
        patch_cmix.init(C, rng);
        conv_w = Tensor({C, C, 3, 3});
        const double cs = 0.15 / std::sqrt(9.0 * C);
        for (size_t i = 0; i < conv_w.size(); ++i) {
            conv_w.at(i) = static_cast<Real>(rng.normal(0.0, cs));
        }
        conv_b = Tensor({C});
        global_smix.init(C, var, Act::Sigmoid, rng);
        global_cmix.init(C, rng);
    }

    void register_into(ParamRegistryT<Real>& reg, const std::string& prefix) {
        patch_smix.register_into(reg, prefix + ".patch_smix");
        patch_cmix.register_into(reg, prefix + ".patch_cmix");
        reg.add(prefix + ".conv_w", &conv_w);
        reg.add(prefix + ".conv_b", &conv_b);
        global_smix.register_into(reg, prefix + ".global_smix");
        global_cmix.register_into(reg, prefix + ".global_cmix");
    }
};

using CsmParams = CsmParamsT<float>;

template <class Real>
struct CsmVarsT {
    MixVarsT<Real> patch_smix;
    ChannelMixVarsT<Real> patch_cmix;
    VarT<Real> conv_w, conv_b;
    MixVarsT<Real> global_smix;
    ChannelMixVarsT<Real> global_cmix;
    bool lw_on = true;  // learnable saliency weights; off fixes lw = 1
};

template <class Real>
CsmVarsT<Real> leaf_csm(TapeT<Real>& tp, const CsmParamsT<Real>& p, bool lw_on = true) {
    CsmVarsT<Real> cv;
    cv.patch_smix = leaf_mix(tp, p.patch_smix);
    cv.patch_cmix = leaf_mix(tp, p.patch_cmix);
    cv.conv_w = tp.leaf(p.conv_w);
    cv.conv_b = tp.leaf(p.conv_b);
    cv.global_smix = leaf_mix(tp, p.global_smix);
    cv.global_cmix = leaf_mix(tp, p.global_cmix);
    cv.lw_on = lw_on;
    return cv;
}

// ---------------------------------------------------------------------------
// patch branch and module forward
// ---------------------------------------------------------------------------

template <class Real>
struct PatchBranchOut {
    VarT<Real> beta;  // branch features
    VarT<Real> lw;    // sigmoid saliency weights, same shape as the patch
};

// alpha = S-Mix(patch) + patch; beta = C-Mix(alpha) + alpha;
// lw = sigmoid(conv3x3(beta) + patch)
template <class Real>
PatchBranchOut<Real> patch_branch(VarT<Real> patch, int p, const CsmVarsT<Real>& cv) {
    VarT<Real> alpha = add(spatial_mix(patch, p, p, cv.patch_smix), patch);
    VarT<Real> beta = add(channel_mix_spatial(alpha, p, p, cv.patch_cmix), alpha);
    VarT<Real> lw;
    if (cv.lw_on) {
        lw = sigmoid(add(conv2d_3x3(beta, p, p, cv.conv_w, cv.conv_b), patch));
    } else {
        lw = patch.tape->constant(TensorT<Real>::full(patch.value().shape(), Real(1)));
    }
    return {beta, lw};
}

template <class Real>
struct CsmFrameOut {
    VarT<Real> frame;     // [H*W, C]
    VarT<Real> lw_frame;  // reassembled saliency weights (valid if requested)
    bool has_lw = false;
};

// One frame through the CSM. All patches travel as one block-major token
// matrix so the branch is a handful of kernel calls; the result is bitwise
// identical to running patch_branch per patch. Residual with the raw input
// is applied once at module output.
template <class Real>
CsmFrameOut<Real> csm_frame(VarT<Real> frame, int H, int W, int p, const CsmVarsT<Real>& cv,
                            bool want_lw = false) {
    check(H % p == 0 && W % p == 0, "csm_frame",
          "H=" + std::to_string(H) + " W=" + std::to_string(W) +
              " not divisible by p=" + std::to_string(p));
    const int C = frame.value().dim(1);
    const int blocks = (H / p) * (W / p);
    // [H*W, C] frame -> [blocks*p*p, C] patch-major tokens
    VarT<Real> seg = reshape(im2patches(frame, H, W, p), {blocks * p * p, C});
    VarT<Real> alpha = add(spatial_mix(seg, p, p, cv.patch_smix, blocks), seg);
    VarT<Real> beta = add(channel_mix_spatial(alpha, p, p, cv.patch_cmix, blocks), alpha);
    VarT<Real> lw;
    if (cv.lw_on) {
        lw = sigmoid(add(conv2d_3x3(beta, p, p, cv.conv_w, cv.conv_b, blocks), seg));
    } else {
        lw = seg.tape->constant(TensorT<Real>::full(seg.value().shape(), Real(1)));
    }
    VarT<Real> weighted = mul(lw, beta);
    VarT<Real> assembled =
        patches2im(reshape(weighted, {blocks, p * p * C}), H, W, p);
    VarT<Real> g1 = add(spatial_mix(assembled, H, W, cv.global_smix), assembled);
    VarT<Real> g2 = add(channel_mix_spatial(g1, H, W, cv.global_cmix), g1);
    CsmFrameOut<Real> out;
    out.frame = add(g2, frame);
    if (want_lw) {
        out.lw_frame = patches2im(reshape(lw, {blocks, p * p * C}), H, W, p);
        out.has_lw = true;
    }
    return out;
}

// Whole clip: frames are processed independently.
template <class Real>
std::vector<CsmFrameOut<Real>> csm_forward(const std::vector<VarT<Real>>& frames, int H, int W,
                                           int p, const CsmVarsT<Real>& cv,
                                           bool want_lw = false) {
    std::vector<CsmFrameOut<Real>> out;
    out.reserve(frames.size());
    for (const auto& f : frames) {
        out.push_back(csm_frame(f, H, W, p, cv, want_lw));
    }
    return out;
}

}  // namespace otter
