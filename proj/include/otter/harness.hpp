#pragma once

// Training loop, episodic evaluation, ablation switches, the DTW
// temporal-relation metric, saliency export and run configuration.

#include <atomic>
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "otter/gradcheck.hpp"
#include "otter/model.hpp"

namespace otter {

// ---------------------------------------------------------------------------
// run configuration: line-oriented "key = value" file, flag overrides on top
// ---------------------------------------------------------------------------

enum class ProtoKind { Avg, Attn, QSp };

inline const char* proto_kind_name(ProtoKind k) {
    switch (k) {
        case ProtoKind::Avg: return "avg";
        case ProtoKind::Attn: return "attn";
        case ProtoKind::QSp: return "qsp";
    }
    return "?";
}

inline ProtoKind proto_kind_from_name(const std::string& s) {
    if (s == "avg") return ProtoKind::Avg;
    if (s == "attn") return ProtoKind::Attn;
    if (s == "qsp") return ProtoKind::QSp;
    fail("proto_kind_from_name", "unknown prototype kind '" + s + "'");
}

struct RunConfig {
    // episodic protocol
    int way = 5;
    int shot = 1;
    int train_episodes = 2000;
    int eval_tasks = 2000;
    int train_queries = 1;
    bool any_shot = false;  // K drawn uniformly in 1..shot per episode

    // optimization
    float lr = 1e-3f;
    float lr_decay = 1.0f;  // multiplicative per episode; 1.0 = off
    float lambda0 = 0.8f, lambda1 = 0.1f, lambda2 = 0.1f;
    float omega1 = 0.5f, omega2 = 0.5f;
    float tau = 1.0f;
    std::string distance = "frobenius";  // or "perframe"

    // geometry
    int image = 64;
    int frames = 8;
    int p = 16;  // CSM patch
    int feat_dim = 64;
    int bb_patch = 8;
    int width1 = 8;
    int width2 = 16;

    // data
    int fov_level = 0;
    int pool_per_class = 48;
    int eval_pool_per_class = 24;
    double sample_noise_ratio = 0.0;
    int frame_noise_count = 0;
    std::string visual_noise = "none";  // none | zoom | gaussian
    double visual_noise_strength = 0.0;

    // ablation flags
    bool csm_on = true;
    bool trm_on = true;
    std::string branch = "both";  // both | ordered | reversed
    std::string variant = "rwkv56";
    std::string proto_kind = "avg";
    bool lw_on = true;

    // seeds and plumbing
    uint64_t seed = 1;
    uint64_t data_seed = 1001;
    uint64_t eval_seed = 2002;
    int threads = 0;  // 0 = hardware concurrency
    int checkpoint_every = 0;
    std::string out_dir = ".";

    ModelFlags flags() const {
        ModelFlags f;
        f.csm_on = csm_on;
        f.trm_on = trm_on;
        f.branch = branch_mode_from_name(branch);
        f.lw_on = lw_on;
        return f;
    }

    LossWeightsT<float> loss_weights() const {
        LossWeightsT<float> lw{lambda0, lambda1, lambda2};
        lw.validate();
        return lw;
    }

    DistanceWeightsT<float> distance_weights() const {
        DistanceWeightsT<float> dw{omega1, omega2};
        dw.validate();
        return dw;
    }

    DistanceKind distance_kind() const {
        if (distance == "frobenius") {
            return DistanceKind::Frobenius;
        }
        if (distance == "perframe") {
            return DistanceKind::PerFrameSum;
        }
        fail("RunConfig", "unknown distance '" + distance + "'");
    }

    SynthConfig synth() const {
        SynthConfig s;
        s.frames = frames;
        s.height = image;
        s.width = image;
        s.fov_level = fov_level;
        return s;
    }

    BackboneConfig backbone() const {
        BackboneConfig b;
        b.in_channels = 3;
        b.image = image;
        b.patch = bb_patch;
        b.width1 = width1;
        b.width2 = width2;
        b.out_dim = feat_dim;
        return b;
    }

    OtterModel make_model() const {
        OtterModel m;
        m.frames = frames;
        m.channels = 3;
        m.image = image;
        m.csm_patch = p;
        m.feat_dim = feat_dim;
        m.variant = variant_from_name(variant);
        m.init(seed, backbone());
        return m;
    }

    void validate() const {
        check(way >= 2 && shot >= 1 && train_queries >= 1, "RunConfig",
              "way >= 2, shot >= 1, train_queries >= 1");
        check(image % p == 0, "RunConfig", "image not divisible by CSM patch p");
        loss_weights();
        distance_weights();
        (void)distance_kind();
        (void)branch_mode_from_name(branch);
        (void)variant_from_name(variant);
        (void)proto_kind_from_name(proto_kind);
        if (visual_noise != "none") {
            (void)visual_noise_from_name(visual_noise);
        }
        check(sample_noise_ratio >= 0.0 && sample_noise_ratio <= 0.4, "RunConfig",
              "sample_noise_ratio in [0, 0.4]");
        check(frame_noise_count >= 0 && frame_noise_count <= frames / 2, "RunConfig",
              "frame_noise_count in [0, F/2]");
    }

    // canonical semantic text; the checkpoint hash is FNV-1a over this
    std::string canonical_text() const {
        std::ostringstream os;
        os << "way=" << way << "\nshot=" << shot << "\ntrain_episodes=" << train_episodes
           << "\neval_tasks=" << eval_tasks << "\ntrain_queries=" << train_queries
           << "\nany_shot=" << any_shot << "\nlr=" << lr << "\nlr_decay=" << lr_decay
           << "\nlambda0=" << lambda0 << "\nlambda1=" << lambda1 << "\nlambda2=" << lambda2
           << "\nomega1=" << omega1 << "\nomega2=" << omega2 << "\ntau=" << tau
           << "\ndistance=" << distance << "\nimage=" << image << "\nframes=" << frames
           << "\np=" << p << "\nfeat_dim=" << feat_dim << "\nbb_patch=" << bb_patch
           << "\nwidth1=" << width1 << "\nwidth2=" << width2 << "\nfov_level=" << fov_level
           << "\npool_per_class=" << pool_per_class
           << "\neval_pool_per_class=" << eval_pool_per_class
           << "\nsample_noise_ratio=" << sample_noise_ratio
           << "\nframe_noise_count=" << frame_noise_count << "\nvisual_noise=" << visual_noise
           << "\nvisual_noise_strength=" << visual_noise_strength << "\ncsm_on=" << csm_on
           << "\ntrm_on=" << trm_on << "\nbranch=" << branch << "\nvariant=" << variant
           << "\nproto_kind=" << proto_kind << "\nlw_on=" << lw_on << "\nseed=" << seed
           << "\ndata_seed=" << data_seed << "\neval_seed=" << eval_seed << "\n";
        return os.str();
    }

    uint64_t hash() const {
        const std::string text = canonical_text();
        uint64_t h = 1469598103934665603ull;
        for (unsigned char c : text) {
            h = (h ^ c) * 1099511628211ull;
        }
        return h;
    }

    void set_field(const std::string& key, const std::string& value);
};

inline void RunConfig::set_field(const std::string& key, const std::string& value) {
    auto to_bool = [&](const std::string& v) {
        if (v == "1" || v == "true" || v == "on") return true;
        if (v == "0" || v == "false" || v == "off") return false;
        fail("RunConfig", "boolean expected for '" + key + "', got '" + v + "'");
    };
    if (key == "way") way = std::stoi(value);
    else if (key == "shot") shot = std::stoi(value);
    else if (key == "train_episodes") train_episodes = std::stoi(value);
    else if (key == "eval_tasks") eval_tasks = std::stoi(value);
    else if (key == "train_queries") train_queries = std::stoi(value);
    else if (key == "any_shot") any_shot = to_bool(value);
    else if (key == "lr") lr = std::stof(value);
    else if (key == "lr_decay") lr_decay = std::stof(value);
    else if (key == "lambda0") lambda0 = std::stof(value);
    else if (key == "lambda1") lambda1 = std::stof(value);
    else if (key == "lambda2") lambda2 = std::stof(value);
    else if (key == "omega1") omega1 = std::stof(value);
    else if (key == "omega2") omega2 = std::stof(value);
    else if (key == "tau") tau = std::stof(value);
    else if (key == "distance") distance = value;
    else if (key == "image") image = std::stoi(value);
    else if (key == "frames") frames = std::stoi(value);
    else if (key == "p") p = std::stoi(value);
    else if (key == "feat_dim") feat_dim = std::stoi(value);
    else if (key == "bb_patch") bb_patch = std::stoi(value);
    else if (key == "width1") width1 = std::stoi(value);
    else if (key == "width2") width2 = std::stoi(value);
    else if (key == "fov_level") fov_level = std::stoi(value);
    else if (key == "pool_per_class") pool_per_class = std::stoi(value);
    else if (key == "eval_pool_per_class") eval_pool_per_class = std::stoi(value);
    else if (key == "sample_noise_ratio") sample_noise_ratio = std::stod(value);
    else if (key == "frame_noise_count") frame_noise_count = std::stoi(value);
    else if (key == "visual_noise") visual_noise = value;
    else if (key == "visual_noise_strength") visual_noise_strength = std::stod(value);
    else if (key == "csm_on") csm_on = to_bool(value);
    else if (key == "trm_on") trm_on = to_bool(value);
    else if (key == "branch") branch = value;
    else if (key == "variant") variant = value;
    else if (key == "proto_kind") proto_kind = value;
    else if (key == "lw_on") lw_on = to_bool(value);
    else if (key == "seed") seed = std::stoull(value);
    else if (key == "data_seed") data_seed = std::stoull(value);
    else if (key == "eval_seed") eval_seed = std::stoull(value);
    else if (key == "threads") threads = std::stoi(value);
    else if (key == "checkpoint_every") checkpoint_every = std::stoi(value);
    else if (key == "out_dir") out_dir = value;
    else fail("RunConfig", "unknown config key '" + key + "'");
}

inline RunConfig load_config(const std::string& path, RunConfig base = RunConfig{}) {
    std::ifstream f(path);
    check(f.good(), "load_config", "cannot open " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const size_t hash_pos = line.find('#');
        if (hash_pos != std::string::npos) {
            line = line.substr(0, hash_pos);
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const size_t eq = line.find('=');
        check(eq != std::string::npos, "load_config",
              path + ":" + std::to_string(lineno) + ": expected key = value");
        base.set_field(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return base;
}

// ---------------------------------------------------------------------------
// pools
// ---------------------------------------------------------------------------

inline Pool train_pool(const RunConfig& cfg) {
    return make_pool(cfg.synth(), cfg.pool_per_class, substream(cfg.data_seed, 0x7121));
}

inline Pool eval_pool(const RunConfig& cfg) {
    return make_pool(cfg.synth(), cfg.eval_pool_per_class, substream(cfg.data_seed, 0xe7a1));
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct TrainResult {
    std::vector<float> loss_trace;
    uint64_t episodes_run = 0;
};

// Per-episode SGD on the total loss; deterministic given seeds. The episode
// stream is indexed by episode counter, so resuming from a checkpoint
// bit-matches an uninterrupted run.
inline TrainResult train(OtterModel& model, const RunConfig& cfg, const Pool& pool,
                         uint64_t start_episode = 0,
                         std::vector<float> prior_trace = {}) {
    cfg.validate();
    const ModelFlags flags = cfg.flags();
    const LossWeightsT<float> lw = cfg.loss_weights();
    const DistanceWeightsT<float> omega = cfg.distance_weights();
    const DistanceKind dk = cfg.distance_kind();

    TrainResult res;
    res.loss_trace = std::move(prior_trace);
    res.loss_trace.reserve(static_cast<size_t>(cfg.train_episodes));
    Tape tp;
    double lr_now = static_cast<double>(cfg.lr) *
                    std::pow(static_cast<double>(cfg.lr_decay), static_cast<double>(start_episode));
    for (uint64_t e = start_episode; e < static_cast<uint64_t>(cfg.train_episodes); ++e) {
        Episode ep =
            cfg.any_shot
                ? sample_episode_any_shot(pool, cfg.way, cfg.shot, cfg.train_queries,
                                          substream(cfg.seed, 0xe9150de + e))
                : sample_episode(pool, cfg.way, cfg.shot, cfg.train_queries,
                                 substream(cfg.seed, 0xe9150de + e));
        tp.clear();
        ModelVarsT<float> mv;
        EpisodeOutcome<float> out;
        try {
            mv = leaf_model(tp, model, flags, true);
            out = episode_forward(tp, mv, ep, lw, omega, cfg.tau, dk);
        } catch (const OtterError& err) {
            fail("train", "aborted at episode " + std::to_string(e) + ": " + err.what());
        }
        const float loss = out.loss.value().at(0);
        if (!std::isfinite(loss)) {
            fail("train", "divergence (non-finite loss) at episode " + std::to_string(e));
        }
        tp.backward(out.loss);
        auto reg = model.registry();
        for (size_t i = 0; i < reg.entries.size(); ++i) {
            const Tensor* g = tp.grad_if_any(mv.leaves[i].id);
            if (g == nullptr) {
                continue;
            }
            Tensor& t = *reg.entries[i].tensor;
            for (size_t j = 0; j < t.size(); ++j) {
                t.at(j) = static_cast<float>(static_cast<double>(t.at(j)) -
                                             lr_now * static_cast<double>(g->at(j)));
            }
        }
        res.loss_trace.push_back(loss);
        res.episodes_run = e + 1;
        lr_now *= static_cast<double>(cfg.lr_decay);
        if (cfg.checkpoint_every > 0 && (e + 1) % static_cast<uint64_t>(cfg.checkpoint_every) == 0) {
            char name[64];
            std::snprintf(name, sizeof(name), "ckpt_ep%06llu.otck",
                          static_cast<unsigned long long>(e + 1));
            save_checkpoint(std::filesystem::path(cfg.out_dir) / name, model, cfg.hash(), e + 1);
        }
    }
    return res;
}

inline void write_loss_trace(const std::string& path, const std::vector<float>& trace) {
    std::ofstream f(path);
    check(f.good(), "write_loss_trace", "cannot open " + path);
    for (float v : trace) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
        f << buf << "\n";
    }
}

// ---------------------------------------------------------------------------
// evaluation (read-only model, worker pool over tasks)
// ---------------------------------------------------------------------------

struct EvalResult {
    double accuracy = 0.0;
    double ci95 = 0.0;
    int tasks = 0;
    std::vector<char> correct;  // per task
};

namespace detail {

// prototype variants for the appendix comparison; Avg is the trained default,
// Attn and QSp are evaluation-time stubs
template <class Real>
std::vector<VarT<Real>> prototypes_for_query(const std::vector<std::vector<VarT<Real>>>& class_feats,
                                             VarT<Real> query, ProtoKind kind) {
    std::vector<VarT<Real>> protos;
    for (const auto& feats : class_feats) {
        if (kind == ProtoKind::Avg || feats.size() == 1) {
            protos.push_back(build_prototype(feats));
            continue;
        }
        if (kind == ProtoKind::QSp) {
            // nearest support to this query
            size_t best = 0;
            double bestd = 1e300;
            for (size_t k = 0; k < feats.size(); ++k) {
                const double d = static_cast<double>(
                    proto_distance(feats[k], query).value().at(0));
                if (d < bestd) {
                    bestd = d;
                    best = k;
                }
            }
            protos.push_back(feats[best]);
            continue;
        }
        // Attn: distance-softmax weights over supports
        std::vector<double> wts(feats.size());
        double m = -1e300;
        for (size_t k = 0; k < feats.size(); ++k) {
            wts[k] = -static_cast<double>(proto_distance(feats[k], query).value().at(0));
            m = std::max(m, wts[k]);
        }
        double sum = 0.0;
        for (auto& w : wts) {
            w = std::exp(w - m);
            sum += w;
        }
        VarT<Real> acc;
        for (size_t k = 0; k < feats.size(); ++k) {
            VarT<Real> scaled = affine(feats[k], static_cast<Real>(wts[k] / sum), Real(0));
            acc = k == 0 ? scaled : add(acc, scaled);
        }
        protos.push_back(acc);
    }
    return protos;
}

}  // namespace detail

// Per-sample features under a frozen model: the pre-TRM sequence and the
// temporal-enhanced one. Evaluation computes them once per pool sample.
struct EvalFeatures {
    Tensor plain;     // [F, D]
    Tensor enhanced;  // [F, D]
};

struct FeatureCache {
    std::vector<std::vector<EvalFeatures>> by_class;
    const EvalFeatures* find(const Pool& pool, const VideoSample* s) const {
        for (size_t cls = 0; cls < pool.by_class.size(); ++cls) {
            const auto& v = pool.by_class[cls];
            if (!v.empty() && s >= v.data() && s < v.data() + v.size()) {
                return &by_class[cls][static_cast<size_t>(s - v.data())];
            }
        }
        return nullptr;
    }
};

inline EvalFeatures features_of_sample(OtterModel& model, const RunConfig& cfg,
                                       const VideoSample& s) {
    Tape tp;
    ModelVarsT<float> mv = leaf_model(tp, model, cfg.flags(), false);
    Var f = clip_features(tp, mv, s.clip).feats;
    Var e = temporal_enhance(mv, f);
    return {f.value(), e.value()};
}

inline FeatureCache build_feature_cache(OtterModel& model, const RunConfig& cfg,
                                        const Pool& pool) {
    FeatureCache cache;
    cache.by_class.resize(pool.by_class.size());
    struct Job {
        int cls, idx;
    };
    std::vector<Job> jobs;
    for (size_t cls = 0; cls < pool.by_class.size(); ++cls) {
        cache.by_class[cls].resize(pool.by_class[cls].size());
        for (size_t i = 0; i < pool.by_class[cls].size(); ++i) {
            jobs.push_back({static_cast<int>(cls), static_cast<int>(i)});
        }
    }
    std::atomic<size_t> cursor{0};
    auto worker = [&]() {
        while (true) {
            const size_t j = cursor.fetch_add(1);
            if (j >= jobs.size()) {
                break;
            }
            const Job job = jobs[j];
            cache.by_class[static_cast<size_t>(job.cls)][static_cast<size_t>(job.idx)] =
                features_of_sample(model, cfg,
                                   pool.by_class[static_cast<size_t>(job.cls)]
                                                [static_cast<size_t>(job.idx)]);
        }
    };
    const int nthreads = cfg.threads > 0
                             ? cfg.threads
                             : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    std::vector<std::thread> ts;
    for (int i = 0; i < nthreads; ++i) {
        ts.emplace_back(worker);
    }
    for (auto& t : ts) {
        t.join();
    }
    return cache;
}

namespace detail {

inline double frob_distance(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.at(i)) - b.at(i);
        acc += d * d;
    }
    return std::sqrt(acc);
}

inline double perframe_distance(const Tensor& a, const Tensor& b) {
    const int F = a.dim(0), D = a.dim(1);
    double total = 0.0;
    for (int f = 0; f < F; ++f) {
        double acc = 0.0;
        for (int d = 0; d < D; ++d) {
            const double diff = static_cast<double>(a.at2(f, d)) - b.at2(f, d);
            acc += diff * diff;
        }
        total += std::sqrt(acc);
    }
    return total;
}

inline double tensor_distance(const Tensor& a, const Tensor& b, DistanceKind kind) {
    return kind == DistanceKind::Frobenius ? frob_distance(a, b) : perframe_distance(a, b);
}

// prototype in plain tensor math (Avg / Attn / QSp variants)
inline Tensor proto_of(const std::vector<const Tensor*>& feats, const Tensor& query,
                       ProtoKind kind, DistanceKind dk) {
    if (kind == ProtoKind::Avg || feats.size() == 1) {
        Tensor p(feats[0]->shape());
        for (size_t i = 0; i < p.size(); ++i) {
            double acc = 0.0;
            for (const Tensor* f : feats) {
                acc += f->at(i);
            }
            p.at(i) = static_cast<float>(acc / static_cast<double>(feats.size()));
        }
        return p;
    }
    if (kind == ProtoKind::QSp) {
        size_t best = 0;
        double bestd = 1e300;
        for (size_t k = 0; k < feats.size(); ++k) {
            const double d = tensor_distance(*feats[k], query, dk);
            if (d < bestd) {
                bestd = d;
                best = k;
            }
        }
        return *feats[best];
    }
    // Attn: distance-softmax weights over supports
    std::vector<double> wts(feats.size());
    double m = -1e300;
    for (size_t k = 0; k < feats.size(); ++k) {
        wts[k] = -tensor_distance(*feats[k], query, dk);
        m = std::max(m, wts[k]);
    }
    double sum = 0.0;
    for (auto& w : wts) {
        w = std::exp(w - m);
        sum += w;
    }
    Tensor p(feats[0]->shape());
    for (size_t i = 0; i < p.size(); ++i) {
        double acc = 0.0;
        for (size_t k = 0; k < feats.size(); ++k) {
            acc += wts[k] * feats[k]->at(i);
        }
        p.at(i) = static_cast<float>(acc / sum);
    }
    return p;
}

}  // namespace detail

// classification of one episode from cached features
inline int classify_cached(const Episode& ep, const Pool& pool, const FeatureCache& cache,
                           const RunConfig& cfg, const EvalFeatures* query_override = nullptr) {
    const DistanceKind dk = cfg.distance_kind();
    const ProtoKind pk = proto_kind_from_name(cfg.proto_kind);
    const EvalFeatures* qf =
        query_override != nullptr ? query_override : cache.find(pool, ep.queries[0]);
    check(qf != nullptr, "classify_cached", "query not in pool cache");
    int best = 0;
    double bestd = 1e300;
    for (int slot = 0; slot < ep.way; ++slot) {
        std::vector<const Tensor*> plain, enhanced;
        for (const VideoSample* s : ep.support[static_cast<size_t>(slot)]) {
            const EvalFeatures* sf = cache.find(pool, s);
            check(sf != nullptr, "classify_cached", "support not in pool cache");
            plain.push_back(&sf->plain);
            enhanced.push_back(&sf->enhanced);
        }
        const Tensor p1 = detail::proto_of(enhanced, qf->enhanced, pk, dk);
        const Tensor p2 = detail::proto_of(plain, qf->plain, pk, dk);
        const double d = cfg.omega1 * detail::tensor_distance(p1, qf->enhanced, dk) +
                         cfg.omega2 * detail::tensor_distance(p2, qf->plain, dk);
        if (d < bestd) {
            bestd = d;
            best = slot;
        }
    }
    return best;
}

// classification of one episode with a frozen model; returns predicted slots
inline std::vector<int> classify_episode(OtterModel& model, const RunConfig& cfg,
                                         const Episode& ep) {
    Tape tp;
    ModelVarsT<float> mv = leaf_model(tp, model, cfg.flags(), false);
    const DistanceWeightsT<float> omega = cfg.distance_weights();
    const DistanceKind dk = cfg.distance_kind();
    const ProtoKind pk = proto_kind_from_name(cfg.proto_kind);

    std::vector<std::vector<Var>> plain(static_cast<size_t>(ep.way));
    std::vector<std::vector<Var>> enhanced(static_cast<size_t>(ep.way));
    for (int slot = 0; slot < ep.way; ++slot) {
        for (const VideoSample* s : ep.support[static_cast<size_t>(slot)]) {
            Var f = clip_features(tp, mv, s->clip).feats;
            plain[static_cast<size_t>(slot)].push_back(f);
            enhanced[static_cast<size_t>(slot)].push_back(temporal_enhance(mv, f));
        }
    }
    std::vector<int> preds;
    for (const VideoSample* q : ep.queries) {
        Var f = clip_features(tp, mv, q->clip).feats;
        Var ft = temporal_enhance(mv, f);
        auto p1 = detail::prototypes_for_query(enhanced, ft, pk);
        auto p2 = detail::prototypes_for_query(plain, f, pk);
        auto cls = classify(p1, p2, ft, f, omega, dk);
        preds.push_back(cls.predicted);
    }
    return preds;
}

// Accuracy with 95% CI over a deterministic task stream; tasks run on a
// read-only model in a worker pool, results are keyed by task index.
inline EvalResult evaluate(OtterModel& model, const RunConfig& cfg, const Pool& pool) {
    cfg.validate();
    check(cfg.eval_tasks >= 1, "evaluate", "eval_tasks must be >= 1");
    EvalResult res;
    res.tasks = cfg.eval_tasks;
    res.correct.assign(static_cast<size_t>(cfg.eval_tasks), 0);

    const SynthConfig scfg = cfg.synth();
    const FeatureCache cache = build_feature_cache(model, cfg, pool);
    std::atomic<int> cursor{0};
    auto worker = [&]() {
        while (true) {
            const int t = cursor.fetch_add(1);
            if (t >= cfg.eval_tasks) {
                break;
            }
            const uint64_t es = substream(cfg.eval_seed, 0xeba1 + static_cast<uint64_t>(t));
            Episode ep = cfg.any_shot
                             ? sample_episode_any_shot(pool, cfg.way, cfg.shot, 1, es)
                             : sample_episode(pool, cfg.way, cfg.shot, 1, es);
            if (cfg.sample_noise_ratio > 0.0) {
                ep = inject_sample_noise(ep, pool, cfg.sample_noise_ratio, substream(es, 1));
            }
            int pred;
            if (cfg.frame_noise_count > 0 || cfg.visual_noise != "none") {
                VideoSample noisy_query = *ep.queries[0];
                if (cfg.frame_noise_count > 0) {
                    noisy_query = inject_frame_noise(noisy_query, scfg, cfg.frame_noise_count,
                                                     substream(es, 2));
                }
                if (cfg.visual_noise != "none") {
                    noisy_query = inject_visual_noise(
                        noisy_query, visual_noise_from_name(cfg.visual_noise),
                        cfg.visual_noise_strength, substream(es, 3));
                }
                const EvalFeatures qf = features_of_sample(model, cfg, noisy_query);
                pred = classify_cached(ep, pool, cache, cfg, &qf);
            } else {
                pred = classify_cached(ep, pool, cache, cfg);
            }
            res.correct[static_cast<size_t>(t)] = pred == ep.query_slots[0] ? 1 : 0;
        }
    };
    const int nthreads = cfg.threads > 0
                             ? cfg.threads
                             : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    std::vector<std::thread> ts;
    for (int i = 0; i < std::min(nthreads, cfg.eval_tasks); ++i) {
        ts.emplace_back(worker);
    }
    for (auto& th : ts) {
        th.join();
    }

    int hits = 0;
    for (char c : res.correct) {
        hits += c;
    }
    res.accuracy = static_cast<double>(hits) / cfg.eval_tasks;
    const double stderr_ = std::sqrt(res.accuracy * (1.0 - res.accuracy) /
                                     static_cast<double>(cfg.eval_tasks));
    res.ci95 = 1.96 * stderr_;
    return res;
}

// ---------------------------------------------------------------------------
// DTW temporal-relation metric
// ---------------------------------------------------------------------------

// Classic dynamic time warping with per-frame cost 1 - cosine and monotone
// steps {(1,0),(0,1),(1,1)}.
template <class Real>
double dtw_score(const TensorT<Real>& a, const TensorT<Real>& b) {
    check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), "dtw_score",
          "sequences must be [F, D] with matching D");
    const int Fa = a.dim(0), Fb = b.dim(0), D = a.dim(1);
    auto row_norm = [&](const TensorT<Real>& t, int f) {
        double acc = 0.0;
        for (int d = 0; d < D; ++d) {
            acc += static_cast<double>(t.at2(f, d)) * t.at2(f, d);
        }
        check(acc > 0.0, "dtw_score", "zero-norm frame " + std::to_string(f));
        return std::sqrt(acc);
    };
    std::vector<double> na(static_cast<size_t>(Fa)), nb(static_cast<size_t>(Fb));
    for (int f = 0; f < Fa; ++f) {
        na[static_cast<size_t>(f)] = row_norm(a, f);
    }
    for (int f = 0; f < Fb; ++f) {
        nb[static_cast<size_t>(f)] = row_norm(b, f);
    }
    std::vector<double> dp(static_cast<size_t>(Fa) * Fb);
    for (int i = 0; i < Fa; ++i) {
        for (int j = 0; j < Fb; ++j) {
            double dot = 0.0;
            for (int d = 0; d < D; ++d) {
                dot += static_cast<double>(a.at2(i, d)) * b.at2(j, d);
            }
            const double cost =
                1.0 - dot / (na[static_cast<size_t>(i)] * nb[static_cast<size_t>(j)]);
            double best;
            if (i == 0 && j == 0) {
                best = 0.0;
            } else if (i == 0) {
                best = dp[static_cast<size_t>(j - 1)];
            } else if (j == 0) {
                best = dp[(static_cast<size_t>(i - 1)) * Fb];
            } else {
                best = std::min({dp[(static_cast<size_t>(i - 1)) * Fb + j],
                                 dp[static_cast<size_t>(i) * Fb + j - 1],
                                 dp[(static_cast<size_t>(i - 1)) * Fb + j - 1]});
            }
            dp[static_cast<size_t>(i) * Fb + j] = cost + best;
        }
    }
    return dp[static_cast<size_t>(Fa) * Fb - 1];
}

// Episode-mean DTW between each query's feature sequence and its true-class
// temporal-enhanced prototype (our reporting convention).
inline double dtw_probe(OtterModel& model, const RunConfig& cfg, const Pool& pool,
                        int episodes, uint64_t seed) {
    double acc = 0.0;
    int count = 0;
    for (int e = 0; e < episodes; ++e) {
        Episode ep = sample_episode(pool, cfg.way, cfg.shot, cfg.way, substream(seed, (uint64_t)e));
        Tape tp;
        ModelVarsT<float> mv = leaf_model(tp, model, cfg.flags(), false);
        std::vector<Var> p1;
        for (int slot = 0; slot < ep.way; ++slot) {
            std::vector<Var> enhanced;
            for (const VideoSample* s : ep.support[static_cast<size_t>(slot)]) {
                enhanced.push_back(
                    temporal_enhance(mv, clip_features(tp, mv, s->clip).feats));
            }
            p1.push_back(build_prototype(enhanced));
        }
        for (size_t q = 0; q < ep.queries.size(); ++q) {
            Var f = temporal_enhance(mv, clip_features(tp, mv, ep.queries[q]->clip).feats);
            acc += dtw_score(p1[static_cast<size_t>(ep.query_slots[q])].value(), f.value());
            ++count;
        }
    }
    return acc / count;
}

// ---------------------------------------------------------------------------
// saliency export
// ---------------------------------------------------------------------------

inline void write_pgm(const std::string& path, const std::vector<uint8_t>& gray, int W, int H) {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "write_pgm", "cannot open " + path);
    f << "P5\n" << W << " " << H << "\n255\n";
    f.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
    check(f.good(), "write_pgm", "write failed for " + path);
}

struct SaliencyStats {
    double mean_inside = 0.0;
    double mean_outside = 0.0;
};

// Channel-averaged CSM saliency per frame; optionally written as 8-bit PGM.
inline SaliencyStats export_saliency(OtterModel& model, const RunConfig& cfg,
                                     const VideoSample& sample, const std::string& out_dir,
                                     const std::string& prefix = "saliency",
                                     bool write_files = true) {
    Tape tp;
    ModelVarsT<float> mv = leaf_model(tp, model, cfg.flags(), false);
    check(mv.flags.csm_on, "export_saliency", "CSM is disabled in this configuration");
    auto toks = clip_to_frame_tokens<float>(sample.clip);
    std::vector<Var> frames;
    for (auto& t : toks) {
        frames.push_back(tp.constant(t));
    }
    auto outs = csm_forward(frames, model.image, model.image, model.csm_patch, mv.csm, true);

    SaliencyStats st;
    double in_acc = 0.0, out_acc = 0.0;
    size_t in_n = 0, out_n = 0;
    const int H = model.image, W = model.image;
    for (size_t f = 0; f < outs.size(); ++f) {
        const auto& lw = outs[f].lw_frame.value();  // [H*W, C]
        const int C = lw.dim(1);
        std::vector<uint8_t> gray(static_cast<size_t>(H) * W);
        for (int t = 0; t < H * W; ++t) {
            double m = 0.0;
            for (int c = 0; c < C; ++c) {
                m += lw.at2(t, c);
            }
            m /= C;
            gray[static_cast<size_t>(t)] =
                static_cast<uint8_t>(std::lround(std::clamp(m, 0.0, 1.0) * 255.0));
            const bool inside =
                sample.mask.size() != 0 &&
                sample.mask.at(f * static_cast<size_t>(H) * W + static_cast<size_t>(t)) > 0.5f;
            if (inside) {
                in_acc += m;
                ++in_n;
            } else {
                out_acc += m;
                ++out_n;
            }
        }
        if (write_files) {
            char name[128];
            std::snprintf(name, sizeof(name), "%s_f%02zu.pgm", prefix.c_str(), f);
            write_pgm((std::filesystem::path(out_dir) / name).string(), gray, W, H);
        }
    }
    st.mean_inside = in_n > 0 ? in_acc / static_cast<double>(in_n) : 0.0;
    st.mean_outside = out_n > 0 ? out_acc / static_cast<double>(out_n) : 0.0;
    return st;
}

// ---------------------------------------------------------------------------
// WKV benchmark
// ---------------------------------------------------------------------------

struct BenchRow {
    int T = 0;
    double streaming_ms = 0.0;
    double oracle_ms = 0.0;
};

inline std::vector<BenchRow> bench_wkv(const std::vector<int>& Ts, int C, int reps,
                                       uint64_t seed = 42) {
    check(!Ts.empty(), "bench_wkv", "empty T list");
    for (size_t i = 1; i < Ts.size(); ++i) {
        check(Ts[i] > Ts[i - 1], "bench_wkv", "T list must ascend");
    }
    std::vector<BenchRow> rows;
    Rng rng(seed);
    for (int T : Ts) {
        Tensor k({T, C}), v({T, C}), w({C}), u({C});
        for (size_t i = 0; i < k.size(); ++i) {
            k.at(i) = static_cast<float>(rng.normal(0.0, 1.0));
            v.at(i) = static_cast<float>(rng.normal(0.0, 1.0));
        }
        for (int c = 0; c < C; ++c) {
            w.at(static_cast<size_t>(c)) = static_cast<float>(rng.uniform(0.2, 1.2));
            u.at(static_cast<size_t>(c)) = static_cast<float>(rng.normal(0.0, 0.5));
        }
        BenchRow row;
        row.T = T;
        double best_s = 1e300, best_o = 1e300;
        float sink = 0.0f;
        for (int r = 0; r < reps; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            Tensor s = wkv_bidirectional_run(k, v, w, u);
            const auto t1 = std::chrono::steady_clock::now();
            sink += s.at(0);
            best_s = std::min(
                best_s, std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        for (int r = 0; r < reps; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            Tensor o = wkv_bidirectional_oracle(k, v, w, u);
            const auto t1 = std::chrono::steady_clock::now();
            sink += o.at(0);
            best_o = std::min(
                best_o, std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        if (sink == 1e30f) { std::fprintf(stderr, "."); }
        row.streaming_ms = best_s;
        row.oracle_ms = best_o;
        rows.push_back(row);
    }
    return rows;
}

inline void print_bench_table(const std::vector<BenchRow>& rows, std::FILE* out) {
    std::fprintf(out, "%8s %16s %16s\n", "T", "streaming-ms", "oracle-ms");
    for (const auto& r : rows) {
        std::fprintf(out, "%8d %16.3f %16.3f\n", r.T, r.streaming_ms, r.oracle_ms);
    }
}

// ---------------------------------------------------------------------------
// one full experiment: fresh init, train, evaluate
// ---------------------------------------------------------------------------

struct ExperimentResult {
    double accuracy = 0.0;
    double ci95 = 0.0;
    std::vector<float> loss_trace;
};

inline ExperimentResult run_experiment(const RunConfig& cfg, OtterModel* model_out = nullptr,
                                       const Pool* train_p = nullptr,
                                       const Pool* eval_p = nullptr) {
    cfg.validate();
    OtterModel model = cfg.make_model();
    Pool tp_local, ep_local;
    if (train_p == nullptr) {
        tp_local = train_pool(cfg);
        train_p = &tp_local;
    }
    if (eval_p == nullptr) {
        ep_local = eval_pool(cfg);
        eval_p = &ep_local;
    }
    TrainResult tr = train(model, cfg, *train_p);
    EvalResult ev = evaluate(model, cfg, *eval_p);
    ExperimentResult res;
    res.accuracy = ev.accuracy;
    res.ci95 = ev.ci95;
    res.loss_trace = std::move(tr.loss_trace);
    if (model_out != nullptr) {
        *model_out = std::move(model);
    }
    return res;
}

}  // namespace otter
