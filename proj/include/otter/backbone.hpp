#pragma once

// Per-frame feature extractor f_theta: C x H x W -> D. The desk-scale default
// is a small vision-RWKV-style stack built from this project's own mixing
// units: patchify to tokens, two stages of (S-Mix + C-Mix residual block,
// then 2x strided patch-merge downsample), global average over tokens and a
// linear head to D.

#include <vector>

#include "otter/mixing.hpp"

namespace otter {

// Stack [1,D] rows into [N,D].
template <class Real>
VarT<Real> concat_rows(const std::vector<VarT<Real>>& rows) {
    check(!rows.empty(), "concat_rows", "empty row list");
    const int D = rows[0].value().dim(rows[0].value().rank() - 1);
    TapeT<Real>& tp = *rows[0].tape;
    TensorT<Real> out({static_cast<int>(rows.size()), D}, Uninit{});
    bool wants = false;
    for (size_t i = 0; i < rows.size(); ++i) {
        check(rows[i].value().size() == static_cast<size_t>(D), "concat_rows",
              "row length mismatch");
        wants = wants || tp.wants_grad(rows[i].id);
        for (int c = 0; c < D; ++c) {
            out.at2(static_cast<int>(i), c) = rows[i].value().at(static_cast<size_t>(c));
        }
    }
    VarT<Real> v = tp.push(std::move(out), wants);
    if (tp.wants_grad(v.id)) {
        auto ids = std::make_shared<std::vector<int>>();
        for (const auto& r : rows) {
            ids->push_back(r.id);
        }
        int oid = v.id;
        tp.set_back(v, [oid, ids, D](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            for (size_t i = 0; i < ids->size(); ++i) {
                const int rid = (*ids)[i];
                if (!t.wants_grad(rid)) {
                    continue;
                }
                TensorT<Real>& d = t.grad_buf(rid);
                for (int c = 0; c < D; ++c) {
                    d.at(static_cast<size_t>(c)) += g.at2(static_cast<int>(i), c);
                }
            }
        });
    }
    return v;
}

// Merge 2x2 token neighborhoods into one token with concatenated features.
template <class Real>
VarT<Real> merge2x2(VarT<Real> x, int H, int W) {
    check(H % 2 == 0 && W % 2 == 0, "merge2x2", "grid must be even");
    return im2patches(x, H, W, 2);
}

// ---------------------------------------------------------------------------
// configuration and parameters
// ---------------------------------------------------------------------------

struct BackboneConfig {
    int in_channels = 3;
    int image = 64;        // H == W
    int patch = 8;         // patchify stride
    int width1 = 8;        // stage-1 channels (divisible by 4 for Q-Shift)
    int width2 = 16;       // stage-2 channels
    int out_dim = 64;      // D

    void validate() const {
        check(image % patch == 0, "BackboneConfig", "image not divisible by patch");
        const int g1 = image / patch;
        check(g1 % 2 == 0, "BackboneConfig", "stage-1 grid must be even for the merge");
        check(g1 / 2 >= 1, "BackboneConfig", "spatial extent collapsed before pooling");
        check(width1 % 4 == 0 && width2 % 4 == 0, "BackboneConfig",
              "stage widths must be divisible by 4");
        check(out_dim >= 1, "BackboneConfig", "D must be >= 1");
    }
};

template <class Real>
struct BackboneParamsT {
    using Tensor = TensorT<Real>;

    BackboneConfig cfg;
    Tensor embed_w, embed_b;  // [patch^2*C, width1], [width1]
    MixParamsT<Real> s1_smix;
    ChannelMixParamsT<Real> s1_cmix;
    Tensor merge_w, merge_b;  // [4*width1, width2], [width2]
    MixParamsT<Real> s2_smix;
    ChannelMixParamsT<Real> s2_cmix;
    Tensor head_w, head_b;  // [width2, D], [D]

    void init(const BackboneConfig& c, Variant var, Rng& rng) {
        cfg = c;
        cfg.validate();
        auto randmat = [&](Tensor& t, int rows, int cols) {
            t = Tensor({rows, cols});
            const double s = 1.0 / std::sqrt(static_cast<double>(rows));
            for (size_t i = 0; i < t.size(); ++i) {
                t.at(i) = static_cast<Real>(rng.normal(0.0, s));
            }
        };
        randmat(embed_w, cfg.patch * cfg.patch * cfg.in_channels, cfg.width1);
        embed_b = Tensor({cfg.width1});
        s1_smix.init(cfg.width1, var, Act::Sigmoid, rng);
        s1_cmix.init(cfg.width1, rng);
        randmat(merge_w, 4 * cfg.width1, cfg.width2);
        merge_b = Tensor({cfg.width2});
        s2_smix.init(cfg.width2, var, Act::Sigmoid, rng);
        s2_cmix.init(cfg.width2, rng);
        randmat(head_w, cfg.width2, cfg.out_dim);
        head_b = Tensor({cfg.out_dim});
    }

    void register_into(ParamRegistryT<Real>& reg, const std::string& prefix) {
        reg.add(prefix + ".embed_w", &embed_w);
        reg.add(prefix + ".embed_b", &embed_b);
        s1_smix.register_into(reg, prefix + ".s1_smix");
        s1_cmix.register_into(reg, prefix + ".s1_cmix");
        reg.add(prefix + ".merge_w", &merge_w);
        reg.add(prefix + ".merge_b", &merge_b);
        s2_smix.register_into(reg, prefix + ".s2_smix");
        s2_cmix.register_into(reg, prefix + ".s2_cmix");
        reg.add(prefix + ".head_w", &head_w);
        reg.add(prefix + ".head_b", &head_b);
    }
};

using BackboneParams = BackboneParamsT<float>;

template <class Real>
struct BackboneVarsT {
    BackboneConfig cfg;
    VarT<Real> embed_w, embed_b;
    MixVarsT<Real> s1_smix;
    ChannelMixVarsT<Real> s1_cmix;
    VarT<Real> merge_w, merge_b;
    MixVarsT<Real> s2_smix;
    ChannelMixVarsT<Real> s2_cmix;
    VarT<Real> head_w, head_b;
};

template <class Real>
BackboneVarsT<Real> leaf_backbone(TapeT<Real>& tp, const BackboneParamsT<Real>& p) {
    BackboneVarsT<Real> bv;
    bv.cfg = p.cfg;
    bv.embed_w = tp.leaf(p.embed_w);
    bv.embed_b = tp.leaf(p.embed_b);
    bv.s1_smix = leaf_mix(tp, p.s1_smix);
    bv.s1_cmix = leaf_mix(tp, p.s1_cmix);
    bv.merge_w = tp.leaf(p.merge_w);
    bv.merge_b = tp.leaf(p.merge_b);
    bv.s2_smix = leaf_mix(tp, p.s2_smix);
    bv.s2_cmix = leaf_mix(tp, p.s2_cmix);
    bv.head_w = tp.leaf(p.head_w);
    bv.head_b = tp.leaf(p.head_b);
    return bv;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

// One frame ([H*W, C] tokens) to a [1, D] feature row.
template <class Real>
VarT<Real> backbone_frame(VarT<Real> frame, const BackboneVarsT<Real>& bv) {
    const BackboneConfig& c = bv.cfg;
    const int g1 = c.image / c.patch;
    VarT<Real> x = add_rowvec(matmul(im2patches(frame, c.image, c.image, c.patch), bv.embed_w),
                              bv.embed_b);
    x = add(x, spatial_mix(x, g1, g1, bv.s1_smix));
    x = add(x, channel_mix_spatial(x, g1, g1, bv.s1_cmix));
    const int g2 = g1 / 2;
    x = add_rowvec(matmul(merge2x2(x, g1, g1), bv.merge_w), bv.merge_b);
    x = add(x, spatial_mix(x, g2, g2, bv.s2_smix));
    x = add(x, channel_mix_spatial(x, g2, g2, bv.s2_cmix));
    VarT<Real> pooled = reshape(mean_over_rows(x), {1, c.width2});
    return add_rowvec(matmul(pooled, bv.head_w), bv.head_b);
}

// Clip to per-frame features [F, D].
template <class Real>
VarT<Real> extract(const std::vector<VarT<Real>>& frames, const BackboneVarsT<Real>& bv) {
    check(!frames.empty(), "extract", "clip has no frames");
    std::vector<VarT<Real>> rows;
    rows.reserve(frames.size());
    for (const auto& f : frames) {
        rows.push_back(backbone_frame(f, bv));
    }
    return concat_rows(rows);
}

}  // namespace otter
