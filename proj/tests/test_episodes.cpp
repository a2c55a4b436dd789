// Synthetic benchmark generator, episode sampler, noise protocols, .otv IO.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <set>

#include "otter/episodes.hpp"

using namespace otter;

namespace {

// centroid column of the subject mask in frame f
double centroid_col(const VideoSample& s, int f) {
    const int H = s.clip.dim(2), W = s.clip.dim(3);
    double num = 0.0, den = 0.0;
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double m = s.mask.at(static_cast<size_t>(f) * (H * W) + y * W + x);
            num += m * x;
            den += m;
        }
    }
    REQUIRE(den > 0.0);
    return num / den;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
    if (!(a.shape() == b.shape())) {
        return false;
    }
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("generator determinism: identical config and seed, identical bytes") {
    SynthConfig cfg;
    VideoSample a = synth_generate(cfg, static_cast<int>(MotionClass::Clockwise), 1234);
    VideoSample b = synth_generate(cfg, static_cast<int>(MotionClass::Clockwise), 1234);
    CHECK(bit_identical(a.clip, b.clip));
    CHECK(bit_identical(a.mask, b.mask));

    VideoSample c = synth_generate(cfg, static_cast<int>(MotionClass::Clockwise), 1235);
    CHECK_FALSE(bit_identical(a.clip, c.clip));
}

TEST_CASE("class 'right' moves the subject centroid strictly rightward") {
    SynthConfig cfg;
    for (uint64_t seed : {7ull, 21ull, 99ull}) {
        VideoSample s = synth_generate(cfg, static_cast<int>(MotionClass::Right), seed);
        for (int f = 1; f < cfg.frames; ++f) {
            CHECK(centroid_col(s, f) > centroid_col(s, f - 1));
        }
    }
}

TEST_CASE("direction pair: reversed 'left' frames form a valid 'right' trajectory") {
    SynthConfig cfg;
    VideoSample s = synth_generate(cfg, static_cast<int>(MotionClass::Left), 42);
    // centroid strictly decreases, so the reverse strictly increases
    for (int f = 1; f < cfg.frames; ++f) {
        CHECK(centroid_col(s, f) < centroid_col(s, f - 1));
    }
}

TEST_CASE("higher FoV level shrinks the subject area fraction") {
    SynthConfig lo;
    lo.fov_level = 0;
    SynthConfig hi;
    hi.fov_level = 4;
    for (uint64_t seed : {3ull, 11ull, 31ull}) {
        const double a0 = subject_area_fraction(
            synth_generate(lo, static_cast<int>(MotionClass::Approach), seed));
        const double a4 = subject_area_fraction(
            synth_generate(hi, static_cast<int>(MotionClass::Approach), seed));
        CHECK(a4 < a0);
    }
}

TEST_CASE("config validation") {
    SynthConfig bad;
    bad.subject_frac = 0.0;
    CHECK_THROWS_AS(synth_generate(bad, 0, 1), OtterError);
    SynthConfig bad2;
    bad2.fov_level = 5;
    CHECK_THROWS_AS(synth_generate(bad2, 0, 1), OtterError);
}

TEST_CASE("episode sampler: 5-way 1-shot structure, disjoint support/query") {
    SynthConfig cfg;
    cfg.height = 16;
    cfg.width = 16;  // small for speed
    Pool pool = make_pool(cfg, 6, 99);
    Episode ep = sample_episode(pool, 5, 1, 5, 1);
    CHECK(ep.way == 5);
    CHECK(ep.support.size() == 5);
    std::set<int> cls(ep.classes.begin(), ep.classes.end());
    CHECK(cls.size() == 5);  // distinct classes
    REQUIRE(ep.queries.size() == 5);
    for (size_t q = 0; q < ep.queries.size(); ++q) {
        const int slot = ep.query_slots[q];
        // query label comes from a support class
        CHECK(ep.queries[q]->label == ep.classes[static_cast<size_t>(slot)]);
        // and is never the same object as any support sample
        for (const auto& row : ep.support) {
            for (const VideoSample* sp : row) {
                CHECK(sp != ep.queries[q]);
            }
        }
    }

    // determinism of the sampler
    Episode ep2 = sample_episode(pool, 5, 1, 5, 1);
    CHECK(ep2.classes == ep.classes);
    CHECK(ep2.support == ep.support);
    CHECK(ep2.queries == ep.queries);
}

TEST_CASE("episode sampler: K exceeding the class size is an error") {
    SynthConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    Pool pool = make_pool(cfg, 2, 5);
    CHECK_THROWS_AS(sample_episode(pool, 5, 2, 5, 1), OtterError);
}

TEST_CASE("any-shot sampling stays within 1..5") {
    SynthConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    Pool pool = make_pool(cfg, 12, 5);
    std::set<int> shots;
    for (uint64_t s = 0; s < 40; ++s) {
        Episode ep = sample_episode_any_shot(pool, 5, 5, 5, s);
        shots.insert(ep.shot);
        CHECK(ep.shot >= 1);
        CHECK(ep.shot <= 5);
    }
    CHECK(shots.size() > 1);  // actually varies
}

TEST_CASE("sample-level noise replaces the stated fraction, deterministically") {
    SynthConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    Pool pool = make_pool(cfg, 16, 5);
    Episode ep = sample_episode(pool, 5, 10, 5, 3);

    Episode clean = inject_sample_noise(ep, pool, 0.0, 7);
    CHECK(clean.support == ep.support);

    Episode noisy = inject_sample_noise(ep, pool, 0.4, 7);
    for (int slot = 0; slot < 5; ++slot) {
        int changed = 0;
        for (int k = 0; k < 10; ++k) {
            if (noisy.support[static_cast<size_t>(slot)][static_cast<size_t>(k)] !=
                ep.support[static_cast<size_t>(slot)][static_cast<size_t>(k)]) {
                ++changed;
                // corrupted entries carry clips of a different class
                CHECK(noisy.support[static_cast<size_t>(slot)][static_cast<size_t>(k)]->label !=
                      ep.classes[static_cast<size_t>(slot)]);
            }
        }
        CHECK(changed == 4);  // 40% of 10
    }

    Episode noisy2 = inject_sample_noise(ep, pool, 0.4, 7);
    CHECK(noisy2.support == noisy.support);

    CHECK_THROWS_AS(inject_sample_noise(ep, pool, 0.5, 7), OtterError);
}

TEST_CASE("frame-level noise replaces the stated count, deterministically") {
    SynthConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    VideoSample s = synth_generate(cfg, 2, 77);

    VideoSample same = inject_frame_noise(s, cfg, 0, 5);
    CHECK(bit_identical(same.clip, s.clip));

    VideoSample noisy = inject_frame_noise(s, cfg, 4, 5);
    const size_t frame_elems = s.clip.size() / static_cast<size_t>(cfg.frames);
    int changed = 0;
    for (int f = 0; f < cfg.frames; ++f) {
        if (std::memcmp(noisy.clip.data() + f * frame_elems, s.clip.data() + f * frame_elems,
                        frame_elems * sizeof(float)) != 0) {
            ++changed;
        }
    }
    CHECK(changed == 4);

    VideoSample noisy2 = inject_frame_noise(s, cfg, 4, 5);
    CHECK(bit_identical(noisy2.clip, noisy.clip));

    CHECK_THROWS_AS(inject_frame_noise(s, cfg, 5, 5), OtterError);
}

TEST_CASE("visual noise: identity at zero, shape preserved, gaussian std on target") {
    SynthConfig cfg;
    VideoSample s = synth_generate(cfg, 1, 5);

    VideoSample z0 = inject_visual_noise(s, VisualNoise::Zoom, 0.0);
    CHECK(bit_identical(z0.clip, s.clip));

    VideoSample z = inject_visual_noise(s, VisualNoise::Zoom, 0.35);
    CHECK(z.clip.shape() == s.clip.shape());

    VideoSample g = inject_visual_noise(s, VisualNoise::Gaussian, 0.1, 123);
    CHECK(g.clip.shape() == s.clip.shape());
    float lo = s.clip.at(0), hi = s.clip.at(0);
    for (size_t i = 0; i < s.clip.size(); ++i) {
        lo = std::min(lo, s.clip.at(i));
        hi = std::max(hi, s.clip.at(i));
    }
    const double target = 0.1 * (hi - lo);
    double acc = 0.0;
    for (size_t i = 0; i < s.clip.size(); ++i) {
        const double d = static_cast<double>(g.clip.at(i)) - s.clip.at(i);
        acc += d * d;
    }
    const double measured = std::sqrt(acc / static_cast<double>(s.clip.size()));
    CHECK(measured == Catch::Approx(target).epsilon(0.10));

    CHECK_THROWS_AS(inject_visual_noise(s, VisualNoise::Zoom, 1.5), OtterError);
}

TEST_CASE("otv files round-trip bit-exactly and manifests parse") {
    SynthConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    VideoSample s = synth_generate(cfg, 3, 2024);
    const std::string path = "/tmp/otter_test_clip.otv";
    write_otv(path, s);
    VideoSample r = read_otv(path);
    CHECK(r.label == 3);
    CHECK(bit_identical(r.clip, s.clip));

    write_manifest("/tmp/otter_test_manifest.txt", {{path, 3}, {path, 5}});
    auto entries = read_manifest("/tmp/otter_test_manifest.txt");
    REQUIRE(entries.size() == 2);
    CHECK(entries[0].first == path);
    CHECK(entries[1].second == 5);
    std::remove(path.c_str());
    std::remove("/tmp/otter_test_manifest.txt");
}
