#pragma once

// The composed Otter model: CSM -> backbone -> TRM -> dual-prototype head,
// with ablation switches that bypass a module with the identity and change
// nothing else. Parameters live outside tapes and are re-leafed per step in
// registry (declaration) order; the checkpoint format serializes them the
// same way.

#include <cstring>
#include <fstream>

#include "otter/backbone.hpp"
#include "otter/csm.hpp"
#include "otter/episodes.hpp"
#include "otter/fewshot.hpp"
#include "otter/trm.hpp"

namespace otter {

struct ModelFlags {
    bool csm_on = true;
    bool trm_on = true;
    TrmBranchMode branch = TrmBranchMode::Both;
    bool lw_on = true;  // learnable saliency / scan weights
};

template <class Real>
struct OtterModelT {
    // geometry
    int frames = 8;
    int channels = 3;
    int image = 64;
    int csm_patch = 16;
    int feat_dim = 64;
    Variant variant = Variant::Rwkv56;

    CsmParamsT<Real> csm;
    BackboneParamsT<Real> backbone;
    TrmParamsT<Real> trm;

    void init(uint64_t seed, const BackboneConfig& bb) {
        check(image % csm_patch == 0, "OtterModel", "image not divisible by CSM patch");
        check(bb.image == image && bb.in_channels == channels && bb.out_dim == feat_dim,
              "OtterModel", "backbone config disagrees with model geometry");
        Rng r_csm(substream(seed, 1));
        csm.init(channels, variant, r_csm);
        Rng r_bb(substream(seed, 2));
        backbone.init(bb, variant, r_bb);
        Rng r_trm(substream(seed, 3));
        trm.init(feat_dim, variant, r_trm);
    }

    ParamRegistryT<Real> registry() {
        ParamRegistryT<Real> reg;
        csm.register_into(reg, "csm");
        backbone.register_into(reg, "backbone");
        trm.register_into(reg, "trm");
        return reg;
    }
};

using OtterModel = OtterModelT<float>;

// ---------------------------------------------------------------------------
// leafed model
// ---------------------------------------------------------------------------

template <class Real>
struct ModelVarsT {
    ModelFlags flags;
    int image = 0, channels = 0, csm_patch = 0;
    CsmVarsT<Real> csm;
    BackboneVarsT<Real> backbone;
    TrmVarsT<Real> trm;
    std::vector<VarT<Real>> leaves;  // aligned with registry order when training
};

// Places every parameter on the tape. With train = true parameters are
// gradient leaves (returned in registry order); otherwise constants.
template <class Real>
ModelVarsT<Real> leaf_model(TapeT<Real>& tp, OtterModelT<Real>& m, const ModelFlags& flags,
                            bool train) {
    ModelVarsT<Real> mv;
    mv.flags = flags;
    mv.image = m.image;
    mv.channels = m.channels;
    mv.csm_patch = m.csm_patch;
    if (train) {
        // leaf in registry order so SGD can walk leaves and entries together
        auto reg = m.registry();
        mv.leaves.reserve(reg.entries.size());
        for (auto& e : reg.entries) {
            mv.leaves.push_back(tp.leaf(*e.tensor));
        }
        // rebuild the structured views over the already-leafed tensors
        size_t i = 0;
        auto take = [&]() { return mv.leaves[i++]; };
        auto mix_view = [&](const MixParamsT<Real>& p) {
            MixVarsT<Real> v;
            v.variant = p.variant;
            v.gate_act = p.gate_act;
            v.output_act = p.output_act;
            v.Wr = take();
            v.Wk = take();
            v.Wv = take();
            v.Wo = take();
            v.one_minus_mu_r = affine(sigmoid(take()), Real(-1), Real(1));
            v.one_minus_mu_k = affine(sigmoid(take()), Real(-1), Real(1));
            v.one_minus_mu_v = affine(sigmoid(take()), Real(-1), Real(1));
            if (p.has_gate()) {
                v.Wg = take();
                v.one_minus_mu_g = affine(sigmoid(take()), Real(-1), Real(1));
            }
            v.w = take();
            v.u = take();
            return v;
        };
        auto cmix_view = [&](const ChannelMixParamsT<Real>& p) {
            ChannelMixVarsT<Real> v;
            v.act_r = p.act_r;
            v.act_v = p.act_v;
            v.Wr = take();
            v.Wv = take();
            v.one_minus_mu_r = affine(sigmoid(take()), Real(-1), Real(1));
            v.one_minus_mu_v = affine(sigmoid(take()), Real(-1), Real(1));
            return v;
        };
        mv.csm.patch_smix = mix_view(m.csm.patch_smix);
        mv.csm.patch_cmix = cmix_view(m.csm.patch_cmix);
        mv.csm.conv_w = take();
        mv.csm.conv_b = take();
        mv.csm.global_smix = mix_view(m.csm.global_smix);
        mv.csm.global_cmix = cmix_view(m.csm.global_cmix);
        mv.csm.lw_on = flags.lw_on;
        mv.backbone.cfg = m.backbone.cfg;
        mv.backbone.embed_w = take();
        mv.backbone.embed_b = take();
        mv.backbone.s1_smix = mix_view(m.backbone.s1_smix);
        mv.backbone.s1_cmix = cmix_view(m.backbone.s1_cmix);
        mv.backbone.merge_w = take();
        mv.backbone.merge_b = take();
        mv.backbone.s2_smix = mix_view(m.backbone.s2_smix);
        mv.backbone.s2_cmix = cmix_view(m.backbone.s2_cmix);
        mv.backbone.head_w = take();
        mv.backbone.head_b = take();
        auto trm_branch_view = [&](const TrmBranchParamsT<Real>& p) {
            TrmBranchVarsT<Real> v;
            v.tmix = mix_view(p.tmix);
            v.cmix = cmix_view(p.cmix);
            v.conv_w = take();
            v.conv_b = take();
            v.lw_on = flags.lw_on;
            return v;
        };
        mv.trm.ordered = trm_branch_view(m.trm.ordered);
        mv.trm.reversed = trm_branch_view(m.trm.reversed);
        check(i == mv.leaves.size(), "leaf_model", "registry order drifted");
    } else {
        mv.csm = leaf_csm_frozen(tp, m.csm, flags.lw_on);
        mv.backbone = leaf_backbone_frozen(tp, m.backbone);
        mv.trm.ordered = leaf_trm_branch_frozen(tp, m.trm.ordered, flags.lw_on);
        mv.trm.reversed = leaf_trm_branch_frozen(tp, m.trm.reversed, flags.lw_on);
    }
    return mv;
}

// frozen (constant) leafing used by evaluation paths
template <class Real>
MixVarsT<Real> leaf_mix_frozen(TapeT<Real>& tp, const MixParamsT<Real>& p) {
    MixVarsT<Real> mv;
    mv.variant = p.variant;
    mv.gate_act = p.gate_act;
    mv.output_act = p.output_act;
    mv.Wr = tp.constant(p.Wr);
    mv.Wk = tp.constant(p.Wk);
    mv.Wv = tp.constant(p.Wv);
    mv.Wo = tp.constant(p.Wo);
    mv.one_minus_mu_r = affine(sigmoid(tp.constant(p.mu_r)), Real(-1), Real(1));
    mv.one_minus_mu_k = affine(sigmoid(tp.constant(p.mu_k)), Real(-1), Real(1));
    mv.one_minus_mu_v = affine(sigmoid(tp.constant(p.mu_v)), Real(-1), Real(1));
    if (p.has_gate()) {
        mv.Wg = tp.constant(p.Wg);
        mv.one_minus_mu_g = affine(sigmoid(tp.constant(p.mu_g)), Real(-1), Real(1));
    }
    mv.w = tp.constant(p.w);
    mv.u = tp.constant(p.u);
    return mv;
}

template <class Real>
ChannelMixVarsT<Real> leaf_cmix_frozen(TapeT<Real>& tp, const ChannelMixParamsT<Real>& p) {
    ChannelMixVarsT<Real> mv;
    mv.act_r = p.act_r;
    mv.act_v = p.act_v;
    mv.Wr = tp.constant(p.Wr);
    mv.Wv = tp.constant(p.Wv);
    mv.one_minus_mu_r = affine(sigmoid(tp.constant(p.mu_r)), Real(-1), Real(1));
    mv.one_minus_mu_v = affine(sigmoid(tp.constant(p.mu_v)), Real(-1), Real(1));
    return mv;
}

template <class Real>
CsmVarsT<Real> leaf_csm_frozen(TapeT<Real>& tp, const CsmParamsT<Real>& p, bool lw_on) {
    CsmVarsT<Real> cv;
    cv.patch_smix = leaf_mix_frozen(tp, p.patch_smix);
    cv.patch_cmix = leaf_cmix_frozen(tp, p.patch_cmix);
    cv.conv_w = tp.constant(p.conv_w);
    cv.conv_b = tp.constant(p.conv_b);
    cv.global_smix = leaf_mix_frozen(tp, p.global_smix);
    cv.global_cmix = leaf_cmix_frozen(tp, p.global_cmix);
    cv.lw_on = lw_on;
    return cv;
}

template <class Real>
BackboneVarsT<Real> leaf_backbone_frozen(TapeT<Real>& tp, const BackboneParamsT<Real>& p) {
    BackboneVarsT<Real> bv;
    bv.cfg = p.cfg;
    bv.embed_w = tp.constant(p.embed_w);
    bv.embed_b = tp.constant(p.embed_b);
    bv.s1_smix = leaf_mix_frozen(tp, p.s1_smix);
    bv.s1_cmix = leaf_cmix_frozen(tp, p.s1_cmix);
    bv.merge_w = tp.constant(p.merge_w);
    bv.merge_b = tp.constant(p.merge_b);
    bv.s2_smix = leaf_mix_frozen(tp, p.s2_smix);
    bv.s2_cmix = leaf_cmix_frozen(tp, p.s2_cmix);
    bv.head_w = tp.constant(p.head_w);
    bv.head_b = tp.constant(p.head_b);
    return bv;
}

template <class Real>
TrmBranchVarsT<Real> leaf_trm_branch_frozen(TapeT<Real>& tp, const TrmBranchParamsT<Real>& p,
                                            bool lw_on) {
    TrmBranchVarsT<Real> bv;
    bv.tmix = leaf_mix_frozen(tp, p.tmix);
    bv.cmix = leaf_cmix_frozen(tp, p.cmix);
    bv.conv_w = tp.constant(p.conv_w);
    bv.conv_b = tp.constant(p.conv_b);
    bv.lw_on = lw_on;
    return bv;
}

// ---------------------------------------------------------------------------
// data plumbing: [F,C,H,W] float clips to per-frame token matrices
// ---------------------------------------------------------------------------

template <class Real>
std::vector<TensorT<Real>> clip_to_frame_tokens(const Tensor& clip) {
    check(clip.rank() == 4, "clip_to_frame_tokens", "clip must be [F,C,H,W]");
    const int F = clip.dim(0), C = clip.dim(1), H = clip.dim(2), W = clip.dim(3);
    std::vector<TensorT<Real>> frames;
    frames.reserve(static_cast<size_t>(F));
    for (int f = 0; f < F; ++f) {
        TensorT<Real> tok({H * W, C});
        for (int c = 0; c < C; ++c) {
            const float* src = clip.data() + (static_cast<size_t>(f) * C + c) * H * W;
            for (int t = 0; t < H * W; ++t) {
                tok.at2(t, c) = static_cast<Real>(src[t]);
            }
        }
        frames.push_back(std::move(tok));
    }
    return frames;
}

// ---------------------------------------------------------------------------
// forward pieces
// ---------------------------------------------------------------------------

template <class Real>
struct ClipFeatures {
    VarT<Real> feats;                      // [F, D], pre-TRM
    std::vector<VarT<Real>> lw_frames;     // per frame, when requested
};

template <class Real>
ClipFeatures<Real> clip_features(TapeT<Real>& tp, const ModelVarsT<Real>& mv, const Tensor& clip,
                                 bool want_lw = false) {
    auto toks = clip_to_frame_tokens<Real>(clip);
    std::vector<VarT<Real>> frames;
    frames.reserve(toks.size());
    for (auto& t : toks) {
        frames.push_back(tp.constant(t));
    }
    ClipFeatures<Real> out;
    if (mv.flags.csm_on) {
        auto cs = csm_forward(frames, mv.image, mv.image, mv.csm_patch, mv.csm, want_lw);
        std::vector<VarT<Real>> processed;
        processed.reserve(cs.size());
        for (auto& c : cs) {
            processed.push_back(c.frame);
            if (want_lw) {
                out.lw_frames.push_back(c.lw_frame);
            }
        }
        out.feats = extract(processed, mv.backbone);
    } else {
        out.feats = extract(frames, mv.backbone);
    }
    return out;
}

template <class Real>
VarT<Real> temporal_enhance(const ModelVarsT<Real>& mv, VarT<Real> feats) {
    if (!mv.flags.trm_on) {
        return feats;
    }
    return trm_forward(feats, mv.trm, mv.flags.branch);
}

// ---------------------------------------------------------------------------
// full episode pipeline
// ---------------------------------------------------------------------------

template <class Real>
struct EpisodeOutcome {
    VarT<Real> loss;
    std::vector<int> predicted;  // slot index per query
    std::vector<int> truth;      // slot index per query
    double ce_value = 0.0;
};

template <class Real>
EpisodeOutcome<Real> episode_forward(TapeT<Real>& tp, const ModelVarsT<Real>& mv,
                                     const Episode& ep, const LossWeightsT<Real>& lw,
                                     const DistanceWeightsT<Real>& omega, Real tau,
                                     DistanceKind dist_kind = DistanceKind::Frobenius) {
    std::vector<VarT<Real>> p1, p2;
    for (int slot = 0; slot < ep.way; ++slot) {
        std::vector<VarT<Real>> plain, enhanced;
        for (const VideoSample* s : ep.support[static_cast<size_t>(slot)]) {
            VarT<Real> f = clip_features(tp, mv, s->clip).feats;
            plain.push_back(f);
            enhanced.push_back(temporal_enhance(mv, f));
        }
        p2.push_back(build_prototype(plain));
        p1.push_back(build_prototype(enhanced));
    }

    EpisodeOutcome<Real> out;
    std::vector<VarT<Real>> qdists;
    for (size_t q = 0; q < ep.queries.size(); ++q) {
        VarT<Real> f = clip_features(tp, mv, ep.queries[q]->clip).feats;
        VarT<Real> ft = temporal_enhance(mv, f);
        auto cls = classify(p1, p2, ft, f, omega, dist_kind);
        qdists.push_back(cls.combined);
        out.predicted.push_back(cls.predicted);
        out.truth.push_back(ep.query_slots[q]);
    }
    out.loss = total_loss(qdists, out.truth, p1, p2, lw, tau);
    return out;
}

// ---------------------------------------------------------------------------
// checkpoints: "OTCK", little-endian, parameter blobs in declaration order
// ---------------------------------------------------------------------------

constexpr uint32_t kCheckpointVersion = 1;

template <class Real>
void save_checkpoint(const std::string& path, OtterModelT<Real>& model, uint64_t config_hash,
                     uint64_t episode_counter) {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "save_checkpoint", "cannot open " + path);
    f.write("OTCK", 4);
    const uint32_t version = kCheckpointVersion;
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&config_hash), 8);
    f.write(reinterpret_cast<const char*>(&episode_counter), 8);
    auto reg = model.registry();
    const uint32_t count = static_cast<uint32_t>(reg.entries.size());
    f.write(reinterpret_cast<const char*>(&count), 4);
    for (auto& e : reg.entries) {
        const uint32_t nlen = static_cast<uint32_t>(e.name.size());
        f.write(reinterpret_cast<const char*>(&nlen), 4);
        f.write(e.name.data(), nlen);
        const uint32_t rank = static_cast<uint32_t>(e.tensor->rank());
        f.write(reinterpret_cast<const char*>(&rank), 4);
        for (int d = 0; d < e.tensor->rank(); ++d) {
            const uint32_t ext = static_cast<uint32_t>(e.tensor->dim(d));
            f.write(reinterpret_cast<const char*>(&ext), 4);
        }
        // stored as float32 regardless of the working precision
        std::vector<float> buf(e.tensor->size());
        for (size_t i = 0; i < buf.size(); ++i) {
            buf[i] = static_cast<float>(e.tensor->at(i));
        }
        f.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    check(f.good(), "save_checkpoint", "write failed for " + path);
}

template <class Real>
struct CheckpointInfo {
    uint64_t config_hash = 0;
    uint64_t episode_counter = 0;
};

template <class Real>
CheckpointInfo<Real> load_checkpoint(const std::string& path, OtterModelT<Real>& model) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "load_checkpoint", "cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    check(f.good() && std::memcmp(magic, "OTCK", 4) == 0, "load_checkpoint",
          "bad magic in " + path);
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    check(version == kCheckpointVersion, "load_checkpoint", "unsupported version");
    CheckpointInfo<Real> info;
    f.read(reinterpret_cast<char*>(&info.config_hash), 8);
    f.read(reinterpret_cast<char*>(&info.episode_counter), 8);
    uint32_t count = 0;
    f.read(reinterpret_cast<char*>(&count), 4);
    auto reg = model.registry();
    check(count == reg.entries.size(), "load_checkpoint",
          "parameter count mismatch; checkpoint does not fit this architecture");
    for (auto& e : reg.entries) {
        uint32_t nlen = 0;
        f.read(reinterpret_cast<char*>(&nlen), 4);
        std::string name(nlen, '\0');
        f.read(name.data(), nlen);
        check(name == e.name, "load_checkpoint",
              "parameter order mismatch at '" + name + "' (expected '" + e.name + "')");
        uint32_t rank = 0;
        f.read(reinterpret_cast<char*>(&rank), 4);
        check(rank == static_cast<uint32_t>(e.tensor->rank()), "load_checkpoint",
              "rank mismatch for " + name);
        for (int d = 0; d < e.tensor->rank(); ++d) {
            uint32_t ext = 0;
            f.read(reinterpret_cast<char*>(&ext), 4);
            check(ext == static_cast<uint32_t>(e.tensor->dim(d)), "load_checkpoint",
                  "shape mismatch for " + name);
        }
        std::vector<float> buf(e.tensor->size());
        f.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float)));
        for (size_t i = 0; i < buf.size(); ++i) {
            e.tensor->at(i) = static_cast<Real>(buf[i]);
        }
    }
    check(f.good(), "load_checkpoint", "truncated checkpoint " + path);
    return info;
}

}  // namespace otter
