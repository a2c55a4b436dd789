// Per-frame feature extractor: shape contract, per-frame determinism,
// frame-permutation equivariance, zero-head linearity, gradients.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "otter/backbone.hpp"

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

BackboneConfig tiny_cfg() {
    BackboneConfig c;
    c.in_channels = 3;
    c.image = 16;
    c.patch = 4;
    c.width1 = 4;
    c.width2 = 8;
    c.out_dim = 8;
    return c;
}

}  // namespace

TEST_CASE("im2patches regroups and round-trips gradients") {
    Rng rng(1);
    TapeD tp;
    const int H = 4, W = 4, C = 2, p = 2;
    TensorD x = randn<double>({H * W, C}, rng);
    VarD g = im2patches(tp.constant(x), H, W, p);
    REQUIRE(g.value().dim(0) == 4);
    REQUIRE(g.value().dim(1) == p * p * C);
    // patch 3 (bottom right), pixel (1,1) inside the patch, channel 1
    CHECK(g.value().at2(3, (1 * p + 1) * C + 1) == x.at2(3 * W + 3, 1));
}

TEST_CASE("zero head maps any clip to zero features") {
    Rng rng(2);
    BackboneParamsT<double> bp;
    bp.init(tiny_cfg(), Variant::Rwkv56, rng);
    for (size_t i = 0; i < bp.head_w.size(); ++i) {
        bp.head_w.at(i) = 0.0;
    }
    TapeD tp;
    BackboneVarsT<double> bv = leaf_backbone(tp, bp);
    std::vector<VarD> frames = {tp.constant(TensorD::zeros({16 * 16, 3})),
                                tp.constant(randn<double>({16 * 16, 3}, rng))};
    TensorD feats = extract(frames, bv).value();
    REQUIRE(feats.dim(0) == 2);
    REQUIRE(feats.dim(1) == 8);
    for (size_t i = 0; i < feats.size(); ++i) {
        CHECK(feats.at(i) == 0.0);
    }
}

TEST_CASE("identical frames produce identical feature rows") {
    Rng rng(3);
    BackboneParamsT<double> bp;
    bp.init(tiny_cfg(), Variant::Rwkv56, rng);
    TapeD tp;
    BackboneVarsT<double> bv = leaf_backbone(tp, bp);
    TensorD frame = randn<double>({16 * 16, 3}, rng);
    TensorD feats = extract({tp.constant(frame), tp.constant(frame)}, bv).value();
    for (int d = 0; d < 8; ++d) {
        CHECK(feats.at2(0, d) == feats.at2(1, d));
    }
}

TEST_CASE("frame permutation permutes feature rows") {
    Rng rng(4);
    BackboneParamsT<double> bp;
    bp.init(tiny_cfg(), Variant::Rwkv56, rng);
    TapeD tp;
    BackboneVarsT<double> bv = leaf_backbone(tp, bp);
    std::vector<TensorD> fs;
    for (int f = 0; f < 4; ++f) {
        fs.push_back(randn<double>({16 * 16, 3}, rng));
    }
    std::vector<VarD> a = {tp.constant(fs[0]), tp.constant(fs[1]), tp.constant(fs[2]),
                           tp.constant(fs[3])};
    std::vector<VarD> b = {tp.constant(fs[2]), tp.constant(fs[0]), tp.constant(fs[3]),
                           tp.constant(fs[1])};
    TensorD fa = extract(a, bv).value();
    TensorD fb = extract(b, bv).value();
    const int perm[4] = {2, 0, 3, 1};
    for (int f = 0; f < 4; ++f) {
        for (int d = 0; d < 8; ++d) {
            CHECK(fb.at2(f, d) == fa.at2(perm[f], d));
        }
    }
}

TEST_CASE("default desk config yields F x 64 features") {
    Rng rng(5);
    BackboneParamsT<float> bp;
    bp.init(BackboneConfig{}, Variant::Rwkv56, rng);
    TapeT<float> tp;
    BackboneVarsT<float> bv = leaf_backbone(tp, bp);
    std::vector<VarT<float>> frames;
    for (int f = 0; f < 8; ++f) {
        frames.push_back(tp.constant(randn<float>({64 * 64, 3}, rng)));
    }
    TensorT<float> feats = extract(frames, bv).value();
    CHECK(feats.dim(0) == 8);
    CHECK(feats.dim(1) == 64);
}

TEST_CASE("gradients flow through extract") {
    Rng rng(6);
    BackboneParamsT<double> bp;
    bp.init(tiny_cfg(), Variant::Rwkv56, rng);
    TensorD frame = randn<double>({16 * 16, 3}, rng);

    auto loss_of = [&]() {
        TapeD t2;
        BackboneVarsT<double> bv2 = leaf_backbone(t2, bp);
        VarD f = extract({t2.constant(frame)}, bv2);
        return mean_all(mul(f, f)).value().at(0);
    };

    TapeD tp;
    BackboneVarsT<double> bv = leaf_backbone(tp, bp);
    VarD f = extract({tp.constant(frame)}, bv);
    tp.backward(mean_all(mul(f, f)));
    TensorD g_embed = tp.grad(bv.embed_w.id);
    TensorD g_head = tp.grad(bv.head_w.id);
    TensorD g_merge = tp.grad(bv.merge_w.id);
    TensorD g_smixu = tp.grad(bv.s2_smix.u.id);

    auto fd = finite_diff<double>(
        loss_of, {&bp.embed_w, &bp.head_w, &bp.merge_w, &bp.s2_smix.u}, 1e-5);
    auto check_block = [&](const TensorD& an, const TensorD& num) {
        for (size_t i = 0; i < num.size(); ++i) {
            const double a = an.at(i), b = num.at(i);
            CHECK(std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}) <= 1e-3);
        }
    };
    check_block(g_embed, fd[0]);
    check_block(g_head, fd[1]);
    check_block(g_merge, fd[2]);
    check_block(g_smixu, fd[3]);
}
