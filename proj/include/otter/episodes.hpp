#pragma once

// Synthetic wide-angle video benchmark: a textured background with a small
// high-contrast subject following a class-specific motion pattern. Higher FoV
// levels magnify the visible background (outpainting magnification U_m) and
// add radial barrel distortion (distortion factor U_d), shrinking the subject
// area fraction. Episode sampling, noise protocols and the .otv clip format
// live here too.
//
// Everything is a pure function of (config, seed): identical inputs produce
// bit-identical clips.

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "otter/tensor.hpp"

namespace otter {

static_assert(std::endian::native == std::endian::little,
              "clip and checkpoint formats are little-endian");

// motion classes come in direction-reversed pairs so temporal order carries
// class information
enum class MotionClass {
    Left = 0,
    Right,
    Up,
    Down,
    Clockwise,
    CounterClockwise,
    Approach,
    Recede,
};

inline const char* motion_name(int label) {
    static const char* names[8] = {"left", "right", "up", "down",
                                   "clockwise", "counter-clockwise", "approach", "recede"};
    return label >= 0 && label < 8 ? names[label] : "?";
}

constexpr int kNumMotionClasses = 8;

struct SynthConfig {
    int frames = 8;
    int channels = 3;
    int height = 64;
    int width = 64;
    int fov_level = 0;           // 0..4
    double subject_frac = 0.13;  // subject radius in scene units at level 0
    double um_per_level = 0.22;  // U_m = 1 + um_per_level * fov_level
    double ud_per_level = 0.10;  // U_d = ud_per_level * fov_level
    int distractors = 3;
    double distractor_brightness = 0.72;
    uint64_t texture_seed = 0;

    double u_m() const { return 1.0 + um_per_level * fov_level; }
    double u_d() const { return ud_per_level * fov_level; }

    void validate() const {
        check(frames >= 1 && channels == 3, "SynthConfig", "F >= 1 and C == 3 required");
        check(fov_level >= 0 && fov_level <= 4, "SynthConfig", "fov_level in 0..4");
        check(subject_frac > 0.0 && subject_frac < 1.0, "SynthConfig",
              "subject size fraction must be in (0,1)");
    }
};

struct VideoSample {
    Tensor clip;    // [F, C, H, W]
    int label = -1;
    int fov_level = 0;
    Tensor mask;    // [F, H*W], 1 inside the subject (generator side info)
};

namespace detail {

// two-octave value noise on a fixed lattice, bilinear interpolation
struct NoiseField {
    static constexpr int kG0 = 7;
    static constexpr int kG1 = 13;
    std::vector<double> base;  // shared luminance
    std::vector<double> fine;
    std::vector<double> chan;  // per-channel offsets, 3 * kG0^2

    explicit NoiseField(Rng& rng) {
        base.resize(kG0 * kG0);
        for (auto& v : base) {
            v = rng.uniform();
        }
        fine.resize(kG1 * kG1);
        for (auto& v : fine) {
            v = rng.uniform();
        }
        chan.resize(3 * kG0 * kG0);
        for (auto& v : chan) {
            v = rng.uniform();
        }
    }

    static double lattice(const std::vector<double>& g, int G, double u, double v) {
        u = std::clamp(u, 0.0, 1.0) * (G - 1);
        v = std::clamp(v, 0.0, 1.0) * (G - 1);
        const int iu = std::min(static_cast<int>(u), G - 2);
        const int iv = std::min(static_cast<int>(v), G - 2);
        const double fu = u - iu, fv = v - iv;
        const double a = g[static_cast<size_t>(iv) * G + iu];
        const double b = g[static_cast<size_t>(iv) * G + iu + 1];
        const double c = g[static_cast<size_t>(iv + 1) * G + iu];
        const double d = g[static_cast<size_t>(iv + 1) * G + iu + 1];
        return (a * (1 - fu) + b * fu) * (1 - fv) + (c * (1 - fu) + d * fu) * fv;
    }

    // sx, sy are scene coordinates; the lattice covers [-3.5, 3.5]
    double sample(double sx, double sy, int channel) const {
        const double u = sx / 7.0 + 0.5;
        const double v = sy / 7.0 + 0.5;
        const double lum = 0.62 * lattice(base, kG0, u, v) + 0.38 * lattice(fine, kG1, u, v);
        const double off = lattice({chan.begin() + channel * kG0 * kG0,
                                    chan.begin() + (channel + 1) * kG0 * kG0},
                                   kG0, u, v);
        return 0.18 + 0.5 * lum + 0.14 * off;
    }
};

struct Disc {
    double cx, cy, r;
    double color[3];
};

}  // namespace detail

// Deterministic clip synthesis for one labeled motion class.
inline VideoSample synth_generate(const SynthConfig& cfg, int label, uint64_t seed) {
    cfg.validate();
    check(label >= 0 && label < kNumMotionClasses, "synth_generate", "unknown motion class");
    Rng rng(substream(seed ^ cfg.texture_seed, 0x5eed + static_cast<uint64_t>(label)));

    detail::NoiseField field(rng);

    // static background distractors, dimmer than the subject
    std::vector<detail::Disc> distractors;
    for (int i = 0; i < cfg.distractors; ++i) {
        detail::Disc d;
        d.cx = rng.uniform(-1.4, 1.4);
        d.cy = rng.uniform(-1.4, 1.4);
        d.r = rng.uniform(0.06, 0.14);
        const double b = cfg.distractor_brightness;
        d.color[0] = b * rng.uniform(0.85, 1.0);
        d.color[1] = b * rng.uniform(0.85, 1.0);
        d.color[2] = b * rng.uniform(0.55, 0.8);
        distractors.push_back(d);
    }

    const double subj_color[3] = {rng.uniform(0.95, 1.05), rng.uniform(0.88, 0.98),
                                  rng.uniform(0.2, 0.3)};

    const int F = cfg.frames;
    std::vector<double> cx(static_cast<size_t>(F)), cy(static_cast<size_t>(F)),
        cr(static_cast<size_t>(F), cfg.subject_frac);
    const double span = 0.95;
    auto linear = [&](double from, double to, int f) {
        return F == 1 ? from : from + (to - from) * f / (F - 1);
    };
    switch (static_cast<MotionClass>(label)) {
        case MotionClass::Left:
        case MotionClass::Right: {
            const double y0 = rng.uniform(-0.45, 0.45);
            const double x0 = rng.uniform(-0.65, 0.65 - span);
            for (int f = 0; f < F; ++f) {
                const double t = linear(0.0, 1.0, f);
                const double x = x0 + span * t;
                cx[static_cast<size_t>(f)] =
                    label == static_cast<int>(MotionClass::Right) ? x : -x;
                cy[static_cast<size_t>(f)] = y0 + rng.normal(0.0, 0.015);
            }
            break;
        }
        case MotionClass::Up:
        case MotionClass::Down: {
            const double x0 = rng.uniform(-0.45, 0.45);
            const double y0 = rng.uniform(-0.65, 0.65 - span);
            for (int f = 0; f < F; ++f) {
                const double t = linear(0.0, 1.0, f);
                const double y = y0 + span * t;
                cy[static_cast<size_t>(f)] = label == static_cast<int>(MotionClass::Down) ? y : -y;
                cx[static_cast<size_t>(f)] = x0 + rng.normal(0.0, 0.015);
            }
            break;
        }
        case MotionClass::Clockwise:
        case MotionClass::CounterClockwise: {
            const double rho = rng.uniform(0.32, 0.55);
            const double th0 = rng.uniform(0.0, 6.283185307179586);
            const double sweep = 2.1 + rng.uniform(0.0, 0.7);
            const double dir =
                label == static_cast<int>(MotionClass::CounterClockwise) ? 1.0 : -1.0;
            for (int f = 0; f < F; ++f) {
                const double th = th0 + dir * sweep * linear(0.0, 1.0, f);
                cx[static_cast<size_t>(f)] = rho * std::cos(th);
                cy[static_cast<size_t>(f)] = rho * std::sin(th);
            }
            break;
        }
        case MotionClass::Approach:
        case MotionClass::Recede: {
            const double x0 = rng.uniform(-0.35, 0.35);
            const double y0 = rng.uniform(-0.35, 0.35);
            for (int f = 0; f < F; ++f) {
                double t = linear(0.0, 1.0, f);
                if (label == static_cast<int>(MotionClass::Recede)) {
                    t = 1.0 - t;
                }
                cx[static_cast<size_t>(f)] = x0;
                cy[static_cast<size_t>(f)] = y0;
                cr[static_cast<size_t>(f)] = cfg.subject_frac * (0.55 + 1.05 * t);
            }
            break;
        }
    }

    const double um = cfg.u_m();
    const double ud = cfg.u_d();
    const int H = cfg.height, W = cfg.width, C = cfg.channels;
    VideoSample s;
    s.label = label;
    s.fov_level = cfg.fov_level;
    s.clip = Tensor({F, C, H, W});
    s.mask = Tensor({F, H * W});
    for (int f = 0; f < F; ++f) {
        for (int py = 0; py < H; ++py) {
            const double ny = (py + 0.5) / H * 2.0 - 1.0;
            for (int px = 0; px < W; ++px) {
                const double nx = (px + 0.5) / W * 2.0 - 1.0;
                const double warp = um * (1.0 + ud * (nx * nx + ny * ny));
                const double sx = nx * warp;
                const double sy = ny * warp;
                double col[3];
                for (int c = 0; c < 3; ++c) {
                    col[c] = field.sample(sx, sy, c);
                }
                for (const auto& d : distractors) {
                    const double dx = sx - d.cx, dy = sy - d.cy;
                    if (dx * dx + dy * dy <= d.r * d.r) {
                        col[0] = d.color[0];
                        col[1] = d.color[1];
                        col[2] = d.color[2];
                    }
                }
                const double dx = sx - cx[static_cast<size_t>(f)];
                const double dy = sy - cy[static_cast<size_t>(f)];
                const double rr = cr[static_cast<size_t>(f)];
                bool inside = dx * dx + dy * dy <= rr * rr;
                if (inside) {
                    col[0] = subj_color[0];
                    col[1] = subj_color[1];
                    col[2] = subj_color[2];
                }
                for (int c = 0; c < C; ++c) {
                    s.clip.at(((static_cast<size_t>(f) * C + c) * H + py) * W + px) =
                        static_cast<float>(col[c]);
                }
                s.mask.at(static_cast<size_t>(f) * (H * W) + py * W + px) = inside ? 1.0f : 0.0f;
            }
        }
    }
    return s;
}

// subject pixel fraction, averaged over frames (from the generator mask)
inline double subject_area_fraction(const VideoSample& s) {
    double acc = 0.0;
    for (size_t i = 0; i < s.mask.size(); ++i) {
        acc += s.mask.at(i);
    }
    return acc / static_cast<double>(s.mask.size());
}

// ---------------------------------------------------------------------------
// pools and episode sampling
// ---------------------------------------------------------------------------

struct Pool {
    // samples grouped per class
    std::vector<std::vector<VideoSample>> by_class;

    int classes() const { return static_cast<int>(by_class.size()); }
    int per_class() const { return by_class.empty() ? 0 : static_cast<int>(by_class[0].size()); }
};

inline Pool make_pool(const SynthConfig& cfg, int per_class, uint64_t base_seed) {
    Pool pool;
    pool.by_class.resize(kNumMotionClasses);
    for (int cls = 0; cls < kNumMotionClasses; ++cls) {
        pool.by_class[static_cast<size_t>(cls)].reserve(static_cast<size_t>(per_class));
        for (int i = 0; i < per_class; ++i) {
            pool.by_class[static_cast<size_t>(cls)].push_back(synth_generate(
                cfg, cls, substream(base_seed, static_cast<uint64_t>(cls) * 100003 + i)));
        }
    }
    return pool;
}

struct Episode {
    int way = 0;
    int shot = 0;
    std::vector<int> classes;                         // pool class ids per slot
    std::vector<std::vector<const VideoSample*>> support;  // [way][shot]
    std::vector<const VideoSample*> queries;
    std::vector<int> query_slots;  // slot index (0..way-1) per query
};

// N-way K-shot episode with `query_count` queries spread round-robin over the
// chosen classes; support and query draws never overlap.
inline Episode sample_episode(const Pool& pool, int way, int shot, int query_count,
                              uint64_t seed) {
    check(way >= 2 && shot >= 1 && query_count >= 1, "sample_episode",
          "way >= 2, shot >= 1, queries >= 1");
    check(pool.classes() >= way, "sample_episode", "pool has too few classes");
    Rng rng(seed);

    // choose `way` distinct classes by partial Fisher-Yates
    std::vector<int> cls(static_cast<size_t>(pool.classes()));
    for (size_t i = 0; i < cls.size(); ++i) {
        cls[i] = static_cast<int>(i);
    }
    for (int i = 0; i < way; ++i) {
        const int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(cls.size()) - i));
        std::swap(cls[static_cast<size_t>(i)], cls[static_cast<size_t>(j)]);
    }
    cls.resize(static_cast<size_t>(way));

    Episode ep;
    ep.way = way;
    ep.shot = shot;
    ep.classes = cls;
    ep.support.resize(static_cast<size_t>(way));

    std::vector<int> queries_per_slot(static_cast<size_t>(way), 0);
    for (int q = 0; q < query_count; ++q) {
        queries_per_slot[static_cast<size_t>(q % way)] += 1;
    }

    for (int slot = 0; slot < way; ++slot) {
        const auto& samples = pool.by_class[static_cast<size_t>(cls[static_cast<size_t>(slot)])];
        const int need = shot + queries_per_slot[static_cast<size_t>(slot)];
        check(static_cast<int>(samples.size()) >= need, "sample_episode",
              "class " + std::string(motion_name(cls[static_cast<size_t>(slot)])) +
                  " has too few samples for K + queries");
        std::vector<int> idx(samples.size());
        for (size_t i = 0; i < idx.size(); ++i) {
            idx[i] = static_cast<int>(i);
        }
        for (int i = 0; i < need; ++i) {
            const int j = i + static_cast<int>(rng.below(idx.size() - i));
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        for (int k = 0; k < shot; ++k) {
            ep.support[static_cast<size_t>(slot)].push_back(
                &samples[static_cast<size_t>(idx[static_cast<size_t>(k)])]);
        }
        for (int q = 0; q < queries_per_slot[static_cast<size_t>(slot)]; ++q) {
            ep.queries.push_back(&samples[static_cast<size_t>(idx[static_cast<size_t>(shot + q)])]);
            ep.query_slots.push_back(slot);
        }
    }
    return ep;
}

// any-shot mode: K drawn uniformly in 1..max_shot per episode
inline Episode sample_episode_any_shot(const Pool& pool, int way, int max_shot, int query_count,
                                       uint64_t seed) {
    Rng rng(substream(seed, 0xa11));
    const int shot = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(max_shot)));
    return sample_episode(pool, way, shot, query_count, substream(seed, 0xa12));
}

// ---------------------------------------------------------------------------
// noise protocols
// ---------------------------------------------------------------------------

// Replace `ratio` of each class's support samples with clips from other
// classes, keeping the labels.
inline Episode inject_sample_noise(const Episode& ep, const Pool& pool, double ratio,
                                   uint64_t seed) {
    check(ratio >= 0.0 && ratio <= 0.4, "inject_sample_noise", "ratio must be in [0, 0.4]");
    Episode out = ep;
    if (ratio == 0.0) {
        return out;
    }
    Rng rng(seed);
    const int corrupt = static_cast<int>(std::llround(ratio * ep.shot));
    for (int slot = 0; slot < ep.way; ++slot) {
        std::vector<int> idx(static_cast<size_t>(ep.shot));
        for (size_t i = 0; i < idx.size(); ++i) {
            idx[i] = static_cast<int>(i);
        }
        for (int i = 0; i < corrupt; ++i) {
            const int j = i + static_cast<int>(rng.below(idx.size() - i));
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        for (int i = 0; i < corrupt; ++i) {
            // donor from a different class
            int donor_cls = ep.classes[static_cast<size_t>(slot)];
            while (donor_cls == ep.classes[static_cast<size_t>(slot)]) {
                donor_cls = static_cast<int>(rng.below(static_cast<uint64_t>(pool.classes())));
            }
            const auto& donors = pool.by_class[static_cast<size_t>(donor_cls)];
            const VideoSample* donor =
                &donors[static_cast<size_t>(rng.below(donors.size()))];
            out.support[static_cast<size_t>(slot)][static_cast<size_t>(
                idx[static_cast<size_t>(i)])] = donor;
        }
    }
    return out;
}

// Replace `count` random frames with frames from an unrelated random clip.
inline VideoSample inject_frame_noise(const VideoSample& s, const SynthConfig& cfg, int count,
                                      uint64_t seed) {
    const int F = s.clip.dim(0);
    check(count >= 0 && count <= F / 2, "inject_frame_noise", "count must be in [0, F/2]");
    VideoSample out = s;
    if (count == 0) {
        return out;
    }
    Rng rng(seed);
    const int donor_label = static_cast<int>(rng.below(kNumMotionClasses));
    VideoSample donor = synth_generate(cfg, donor_label, substream(seed, 0xd0));
    std::vector<int> idx(static_cast<size_t>(F));
    for (size_t i = 0; i < idx.size(); ++i) {
        idx[i] = static_cast<int>(i);
    }
    for (int i = 0; i < count; ++i) {
        const int j = i + static_cast<int>(rng.below(idx.size() - i));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    const size_t frame_elems = s.clip.size() / static_cast<size_t>(F);
    const size_t mask_elems = s.mask.size() / static_cast<size_t>(F);
    for (int i = 0; i < count; ++i) {
        const size_t f = static_cast<size_t>(idx[static_cast<size_t>(i)]);
        std::copy_n(donor.clip.data() + f * frame_elems, frame_elems,
                    out.clip.data() + f * frame_elems);
        std::copy_n(donor.mask.data() + f * mask_elems, mask_elems,
                    out.mask.data() + f * mask_elems);
    }
    return out;
}

enum class VisualNoise { Zoom, Gaussian };

inline VisualNoise visual_noise_from_name(const std::string& s) {
    if (s == "zoom") return VisualNoise::Zoom;
    if (s == "gaussian") return VisualNoise::Gaussian;
    fail("visual_noise_from_name", "unknown visual noise kind '" + s + "'");
}

// zoom: center crop by 1/(1+strength) and bilinear rescale back;
// gaussian: additive noise with std = strength * dynamic range of the clip
inline VideoSample inject_visual_noise(const VideoSample& s, VisualNoise kind, double strength,
                                       uint64_t seed = 0) {
    check(strength >= 0.0 && strength <= 1.0, "inject_visual_noise", "strength in [0,1]");
    VideoSample out = s;
    if (strength == 0.0) {
        return out;
    }
    const int F = s.clip.dim(0), C = s.clip.dim(1), H = s.clip.dim(2), W = s.clip.dim(3);
    if (kind == VisualNoise::Zoom) {
        const double scale = 1.0 + strength;
        for (int f = 0; f < F; ++f) {
            for (int c = 0; c < C; ++c) {
                const float* src =
                    s.clip.data() + (static_cast<size_t>(f) * C + c) * H * W;
                float* dst = out.clip.data() + (static_cast<size_t>(f) * C + c) * H * W;
                for (int y = 0; y < H; ++y) {
                    for (int x = 0; x < W; ++x) {
                        const double sy = (y - H / 2.0) / scale + H / 2.0;
                        const double sx = (x - W / 2.0) / scale + W / 2.0;
                        const int iy = std::clamp(static_cast<int>(sy), 0, H - 2);
                        const int ix = std::clamp(static_cast<int>(sx), 0, W - 2);
                        const double fy = std::clamp(sy - iy, 0.0, 1.0);
                        const double fx = std::clamp(sx - ix, 0.0, 1.0);
                        const double a = src[iy * W + ix], b = src[iy * W + ix + 1];
                        const double cc = src[(iy + 1) * W + ix], d = src[(iy + 1) * W + ix + 1];
                        dst[y * W + x] = static_cast<float>(
                            (a * (1 - fx) + b * fx) * (1 - fy) + (cc * (1 - fx) + d * fx) * fy);
                    }
                }
            }
        }
        return out;
    }
    // gaussian
    float lo = s.clip.at(0), hi = s.clip.at(0);
    for (size_t i = 0; i < s.clip.size(); ++i) {
        lo = std::min(lo, s.clip.at(i));
        hi = std::max(hi, s.clip.at(i));
    }
    const double std_dev = strength * static_cast<double>(hi - lo);
    Rng rng(seed);
    for (size_t i = 0; i < out.clip.size(); ++i) {
        out.clip.at(i) = static_cast<float>(out.clip.at(i) + rng.normal(0.0, std_dev));
    }
    return out;
}

// ---------------------------------------------------------------------------
// .otv clip format and dataset manifest
// ---------------------------------------------------------------------------

// "OTV1", u32 extents F C H W, F*C*H*W float32, u32 label; all little-endian.
inline void write_otv(const std::string& path, const VideoSample& s) {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "write_otv", "cannot open " + path);
    f.write("OTV1", 4);
    const uint32_t dims[4] = {static_cast<uint32_t>(s.clip.dim(0)),
                              static_cast<uint32_t>(s.clip.dim(1)),
                              static_cast<uint32_t>(s.clip.dim(2)),
                              static_cast<uint32_t>(s.clip.dim(3))};
    f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    f.write(reinterpret_cast<const char*>(s.clip.data()),
            static_cast<std::streamsize>(s.clip.size() * sizeof(float)));
    const uint32_t label = static_cast<uint32_t>(s.label);
    f.write(reinterpret_cast<const char*>(&label), sizeof(label));
    check(f.good(), "write_otv", "write failed for " + path);
}

inline VideoSample read_otv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "read_otv", "cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    check(f.good() && std::memcmp(magic, "OTV1", 4) == 0, "read_otv",
          "bad magic in " + path);
    uint32_t dims[4];
    f.read(reinterpret_cast<char*>(dims), sizeof(dims));
    check(f.good(), "read_otv", "truncated header in " + path);
    VideoSample s;
    s.clip = Tensor({static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                     static_cast<int>(dims[2]), static_cast<int>(dims[3])});
    f.read(reinterpret_cast<char*>(s.clip.data()),
           static_cast<std::streamsize>(s.clip.size() * sizeof(float)));
    uint32_t label = 0;
    f.read(reinterpret_cast<char*>(&label), sizeof(label));
    check(f.good(), "read_otv", "truncated data in " + path);
    s.label = static_cast<int>(label);
    s.clip.check_finite("read_otv");
    return s;
}

// line-oriented manifest: "<path> <label>" per line
inline void write_manifest(const std::string& path,
                           const std::vector<std::pair<std::string, int>>& entries) {
    std::ofstream f(path);
    check(f.good(), "write_manifest", "cannot open " + path);
    for (const auto& [p, label] : entries) {
        f << p << " " << label << "\n";
    }
}

inline std::vector<std::pair<std::string, int>> read_manifest(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "read_manifest", "cannot open " + path);
    std::vector<std::pair<std::string, int>> entries;
    std::string p;
    int label;
    while (f >> p >> label) {
        entries.emplace_back(p, label);
    }
    return entries;
}

}  // namespace otter
