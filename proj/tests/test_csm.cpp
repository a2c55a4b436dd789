// Compound Segmentation Module: partition geometry, patch branches, saliency
// weighting, the zero-init closed form, and differentiability.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "otter/csm.hpp"

using namespace otter;

namespace {

using TensorD = TensorT<double>;
using TapeD = TapeT<double>;
using VarD = VarT<double>;

template <class Real>
TensorT<Real> randn(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    TensorT<Real> t(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) {
        t.at(i) = static_cast<Real>(rng.normal(0.0, scale));
    }
    return t;
}

double max_abs_diff(const TensorD& a, const TensorD& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a.at(i) - b.at(i)));
    }
    return m;
}

CsmParamsT<double> zero_csm(int C) {
    CsmParamsT<double> p;
    Rng rng(0);
    p.init(C, Variant::Rwkv56, rng);
    auto zero = [](TensorD& t) {
        for (size_t i = 0; i < t.size(); ++i) {
            t.at(i) = 0.0;
        }
    };
    zero(p.patch_smix.Wr);
    zero(p.patch_smix.Wk);
    zero(p.patch_smix.Wv);
    zero(p.patch_smix.Wg);
    zero(p.patch_smix.Wo);
    zero(p.patch_smix.mu_r);
    zero(p.patch_smix.mu_k);
    zero(p.patch_smix.mu_v);
    zero(p.patch_smix.mu_g);
    zero(p.patch_smix.w);
    zero(p.patch_smix.u);
    zero(p.patch_cmix.Wr);
    zero(p.patch_cmix.Wv);
    zero(p.patch_cmix.mu_r);
    zero(p.patch_cmix.mu_v);
    zero(p.conv_w);
    zero(p.conv_b);
    zero(p.global_smix.Wr);
    zero(p.global_smix.Wk);
    zero(p.global_smix.Wv);
    zero(p.global_smix.Wg);
    zero(p.global_smix.Wo);
    zero(p.global_smix.mu_r);
    zero(p.global_smix.mu_k);
    zero(p.global_smix.mu_v);
    zero(p.global_smix.mu_g);
    zero(p.global_smix.w);
    zero(p.global_smix.u);
    zero(p.global_cmix.Wr);
    zero(p.global_cmix.Wv);
    zero(p.global_cmix.mu_r);
    zero(p.global_cmix.mu_v);
    return p;
}

}  // namespace

TEST_CASE("segment: whole-frame patch and the paper geometry") {
    TapeD tp;
    Rng rng(1);
    TensorD frame = randn<double>({16, 3}, rng);
    VarD vf = tp.constant(frame);

    auto whole = segment(vf, 4, 4, 4);
    REQUIRE(whole.size() == 1);
    CHECK(max_abs_diff(whole[0].value(), frame) == 0.0);

    // 224 / 56 = 4x4 patches of 56x56
    auto origins = patch_origins(224, 224, 56);
    CHECK(origins.size() == 16);
    CHECK(origins[5].y == 56);
    CHECK(origins[5].x == 56);

    CHECK_THROWS_AS(patch_origins(224, 224, 60), OtterError);
}

TEST_CASE("segment/reassemble round-trips arbitrary tensors") {
    TapeD tp;
    Rng rng(2);
    const int H = 12, W = 8, p = 4, C = 3;
    TensorD frame({H * W, C});
    for (size_t i = 0; i < frame.size(); ++i) {
        frame.at(i) = static_cast<double>(i) * 0.5 - 17.0;  // unique markers
    }
    VarD vf = tp.constant(frame);
    auto patches = segment(vf, H, W, p);
    TensorD back = reassemble(patches, patch_origins(H, W, p), H, W, p).value();
    CHECK(max_abs_diff(back, frame) == 0.0);
}

TEST_CASE("reassemble: annihilation and checkerboard mask oracle") {
    TapeD tp;
    Rng rng(3);
    const int H = 8, W = 8, p = 4, C = 2;
    TensorD frame = randn<double>({H * W, C}, rng);
    VarD vf = tp.constant(frame);
    auto patches = segment(vf, H, W, p);
    auto origins = patch_origins(H, W, p);

    // lw == 0 annihilates
    std::vector<VarD> zeroed;
    for (auto& pt : patches) {
        zeroed.push_back(mul(pt, tp.constant(TensorD::zeros({p * p, C}))));
    }
    TensorD z = reassemble(zeroed, origins, H, W, p).value();
    for (size_t i = 0; i < z.size(); ++i) {
        CHECK(z.at(i) == 0.0);
    }

    // checkerboard pattern over patches: 1,0,1,0 / 0,1,0,1 ...
    std::vector<VarD> masked;
    for (size_t i = 0; i < patches.size(); ++i) {
        const int py = origins[i].y / p, px = origins[i].x / p;
        const double on = (py + px) % 2 == 0 ? 1.0 : 0.0;
        masked.push_back(mul(patches[i], tp.constant(TensorD::full({p * p, C}, on))));
    }
    TensorD got = reassemble(masked, origins, H, W, p).value();
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double on = ((y / p) + (x / p)) % 2 == 0 ? 1.0 : 0.0;
            for (int c = 0; c < C; ++c) {
                CHECK(got.at2(y * W + x, c) == on * frame.at2(y * W + x, c));
            }
        }
    }

    // duplicate patch set is rejected
    std::vector<VarD> dup = {patches[0], patches[0], patches[2], patches[3]};
    std::vector<PatchOrigin> dup_org = {origins[0], origins[0], origins[2], origins[3]};
    CHECK_THROWS_AS(reassemble(dup, dup_org, H, W, p), OtterError);
}

TEST_CASE("patch_branch zero-init algebra") {
    const int C = 3, p = 4;
    CsmParamsT<double> zp = zero_csm(C);
    TapeD tp;
    Rng rng(4);
    TensorD patch = randn<double>({p * p, C}, rng);
    CsmVarsT<double> cv = leaf_csm(tp, zp);
    PatchBranchOut<double> pb = patch_branch(tp.constant(patch), p, cv);
    CHECK(max_abs_diff(pb.beta.value(), patch) == 0.0);  // residual identity
    for (size_t i = 0; i < patch.size(); ++i) {
        const double want = 1.0 / (1.0 + std::exp(-patch.at(i)));
        CHECK(pb.lw.value().at(i) == Catch::Approx(want).margin(1e-12));
    }

    // conv weights zero and zero patch: lw = 0.5 everywhere
    PatchBranchOut<double> pb0 = patch_branch(tp.constant(TensorD::zeros({p * p, C})), p, cv);
    for (size_t i = 0; i < pb0.lw.value().size(); ++i) {
        CHECK(pb0.lw.value().at(i) == 0.5);
    }
}

TEST_CASE("patch_branch equals composition of verified sub-operations") {
    const int C = 4, p = 4;
    Rng rng(5);
    CsmParamsT<double> cp;
    cp.init(C, Variant::Rwkv56, rng);
    TapeD tp;
    TensorD patch = randn<double>({p * p, C}, rng);
    VarD vp = tp.constant(patch);
    CsmVarsT<double> cv = leaf_csm(tp, cp);
    PatchBranchOut<double> pb = patch_branch(vp, p, cv);

    VarD alpha = add(spatial_mix(vp, p, p, cv.patch_smix), vp);
    VarD beta = add(channel_mix_spatial(alpha, p, p, cv.patch_cmix), alpha);
    VarD lw = sigmoid(add(conv2d_3x3(beta, p, p, cv.conv_w, cv.conv_b), vp));
    CHECK(max_abs_diff(pb.beta.value(), beta.value()) <= 1e-6);
    CHECK(max_abs_diff(pb.lw.value(), lw.value()) <= 1e-6);
}

TEST_CASE("conv2d_3x3 matches a direct stencil oracle and differentiates") {
    Rng rng(6);
    const int H = 5, W = 4, Ci = 3, Co = 2;
    TensorD x = randn<double>({H * W, Ci}, rng);
    TensorD k = randn<double>({Co, Ci, 3, 3}, rng);
    TensorD b = randn<double>({Co}, rng);
    TapeD tp;
    TensorD got = conv2d_3x3(tp.constant(x), H, W, tp.constant(k), tp.constant(b)).value();
    for (int y = 0; y < H; ++y) {
        for (int xx = 0; xx < W; ++xx) {
            for (int co = 0; co < Co; ++co) {
                double acc = b.at(static_cast<size_t>(co));
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ny = y + dy, nx = xx + dx;
                        if (ny < 0 || ny >= H || nx < 0 || nx >= W) {
                            continue;
                        }
                        for (int ci = 0; ci < Ci; ++ci) {
                            acc += x.at2(ny * W + nx, ci) *
                                   k.at(((static_cast<size_t>(co) * Ci + ci) * 3 + (dy + 1)) * 3 +
                                        (dx + 1));
                        }
                    }
                }
                CHECK(got.at2(y * W + xx, co) == Catch::Approx(acc).margin(1e-12));
            }
        }
    }

    // gradient through conv
    auto loss_of = [&]() {
        TapeD t2;
        VarD y = conv2d_3x3(t2.constant(x), H, W, t2.constant(k), t2.constant(b));
        return sum_all(mul(y, y)).value().at(0);
    };
    TapeD t3;
    VarD vx = t3.leaf(x), vk = t3.leaf(k), vb = t3.leaf(b);
    VarD y = conv2d_3x3(vx, H, W, vk, vb);
    auto gs = grad(sum_all(mul(y, y)), {vx, vk, vb});
    auto fd = finite_diff<double>(loss_of, {&x, &k, &b}, 1e-5);
    for (int pi = 0; pi < 3; ++pi) {
        for (size_t i = 0; i < fd[static_cast<size_t>(pi)].size(); ++i) {
            const double a = gs[static_cast<size_t>(pi)].at(i);
            const double bb = fd[static_cast<size_t>(pi)].at(i);
            CHECK(std::abs(a - bb) / std::max({std::abs(a), std::abs(bb), 1e-6}) <= 1e-3);
        }
    }
}

TEST_CASE("csm_forward zero-init closed form and shape preservation") {
    const int C = 3, H = 8, W = 8, p = 4;
    CsmParamsT<double> zp = zero_csm(C);
    TapeD tp;
    Rng rng(7);
    std::vector<VarD> frames;
    for (int f = 0; f < 2; ++f) {
        frames.push_back(tp.constant(randn<double>({H * W, C}, rng)));
    }
    CsmVarsT<double> cv = leaf_csm(tp, zp);
    auto outs = csm_forward(frames, H, W, p, cv);
    REQUIRE(outs.size() == 2);
    for (int f = 0; f < 2; ++f) {
        const TensorD& x = frames[static_cast<size_t>(f)].value();
        const TensorD& y = outs[static_cast<size_t>(f)].frame.value();
        CHECK(y.same_shape(x));
        for (size_t i = 0; i < x.size(); ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-x.at(i)));
            CHECK(y.at(i) == Catch::Approx(x.at(i) + sig * x.at(i)).margin(1e-9));
        }
    }
}

TEST_CASE("blocked csm_frame is bitwise identical to per-patch composition") {
    const int C = 3, H = 8, W = 8, p = 4;
    Rng rng(21);
    CsmParamsT<double> cp;
    cp.init(C, Variant::Rwkv56, rng);
    TapeD tp;
    TensorD frame = randn<double>({H * W, C}, rng);
    VarD vf = tp.constant(frame);
    CsmVarsT<double> cv = leaf_csm(tp, cp);
    CsmFrameOut<double> fast = csm_frame(vf, H, W, p, cv, true);

    // reference: the spec operations composed patch by patch
    const auto origins = patch_origins(H, W, p);
    std::vector<VarD> weighted, lws;
    for (const PatchOrigin& o : origins) {
        VarD patch = extract_patch(vf, H, W, o, p);
        auto pb = patch_branch(patch, p, cv);
        weighted.push_back(mul(pb.lw, pb.beta));
        lws.push_back(pb.lw);
    }
    VarD assembled = reassemble(weighted, origins, H, W, p);
    VarD g1 = add(spatial_mix(assembled, H, W, cv.global_smix), assembled);
    VarD g2 = add(channel_mix_spatial(g1, H, W, cv.global_cmix), g1);
    VarD want = add(g2, vf);
    VarD want_lw = reassemble(lws, origins, H, W, p);

    CHECK(max_abs_diff(fast.frame.value(), want.value()) == 0.0);
    CHECK(max_abs_diff(fast.lw_frame.value(), want_lw.value()) == 0.0);
}

TEST_CASE("csm_forward: F=1 equals the single-frame path") {
    const int C = 3, H = 8, W = 8, p = 4;
    Rng rng(8);
    CsmParamsT<double> cp;
    cp.init(C, Variant::Rwkv56, rng);
    TapeD tp;
    TensorD frame = randn<double>({H * W, C}, rng);
    CsmVarsT<double> cv = leaf_csm(tp, cp);
    auto batch = csm_forward({tp.constant(frame)}, H, W, p, cv);
    TensorD single = csm_frame(tp.constant(frame), H, W, p, cv).frame.value();
    CHECK(max_abs_diff(batch[0].frame.value(), single) == 0.0);
}

TEST_CASE("csm saliency maps stay in (0,1) and export per frame") {
    const int C = 3, H = 8, W = 8, p = 4;
    Rng rng(9);
    CsmParamsT<double> cp;
    cp.init(C, Variant::Rwkv56, rng);
    TapeD tp;
    CsmVarsT<double> cv = leaf_csm(tp, cp);
    auto outs = csm_forward({tp.constant(randn<double>({H * W, C}, rng))}, H, W, p, cv, true);
    REQUIRE(outs[0].has_lw);
    const TensorD& lw = outs[0].lw_frame.value();
    CHECK(lw.dim(0) == H * W);
    for (size_t i = 0; i < lw.size(); ++i) {
        CHECK(lw.at(i) > 0.0);
        CHECK(lw.at(i) < 1.0);
    }
}

TEST_CASE("gradients flow through the full CSM") {
    const int C = 3, H = 8, W = 8, p = 4;
    Rng rng(10);
    CsmParamsT<double> cp;
    cp.init(C, Variant::Rwkv56, rng);
    TensorD frame = randn<double>({H * W, C}, rng);

    auto loss_of = [&]() {
        TapeD t2;
        CsmVarsT<double> cv2 = leaf_csm(t2, cp);
        auto o = csm_forward({t2.constant(frame)}, H, W, p, cv2);
        return mean_all(mul(o[0].frame, o[0].frame)).value().at(0);
    };

    // spot-check a representative subset of parameters via FD
    TapeD tp;
    CsmVarsT<double> cv = leaf_csm(tp, cp);
    auto o = csm_forward({tp.constant(frame)}, H, W, p, cv);
    VarD loss = mean_all(mul(o[0].frame, o[0].frame));
    tp.backward(loss);
    TensorD g_convw = tp.grad(cv.conv_w.id);
    TensorD g_wv = tp.grad(cv.patch_smix.Wv.id);
    TensorD g_gwk = tp.grad(cv.global_smix.Wk.id);

    auto fd = finite_diff<double>(loss_of, {&cp.conv_w, &cp.patch_smix.Wv, &cp.global_smix.Wk},
                                  1e-5);
    auto check_block = [&](const TensorD& an, const TensorD& num) {
        for (size_t i = 0; i < num.size(); ++i) {
            const double a = an.at(i), b = num.at(i);
            CHECK(std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}) <= 1e-3);
        }
    };
    check_block(g_convw, fd[0]);
    check_block(g_wv, fd[1]);
    check_block(g_gwk, fd[2]);
}
