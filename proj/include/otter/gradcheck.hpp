#pragma once

// Whole-model gradient verification: reverse-mode gradients from one tape
// against central finite differences, one coordinate at a time.
//
// A perturbed coordinate only invalidates its own stage and everything after
// it, so the evaluator caches stage outputs computed at the base parameters:
// CSM coordinates re-run the whole pipeline, backbone coordinates start from
// the cached CSM frames, TRM coordinates start from the cached features.
// Coordinates are distributed over a worker pool; each worker owns a private
// model copy.

#include <atomic>
#include <thread>

#include "otter/model.hpp"

namespace otter {

template <class Real>
struct GradCheckResult {
    size_t coords = 0;
    size_t failures = 0;
    size_t kink_refined = 0;  // coords whose +/-h straddled a relu kink
    double max_rel_err = 0.0;
    std::string worst_param;
    size_t worst_index = 0;
    double worst_analytic = 0.0, worst_numeric = 0.0;
};

namespace detail {

enum class Stage { Csm, Backbone, Trm };

inline Stage stage_of(const std::string& name) {
    if (name.rfind("csm", 0) == 0) {
        return Stage::Csm;
    }
    if (name.rfind("backbone", 0) == 0) {
        return Stage::Backbone;
    }
    return Stage::Trm;
}

// loss evaluated with no gradient recording; stages can start from caches.
// `signature` receives the relu activation-sign hash of the evaluation.
template <class Real>
Real episode_loss_value(OtterModelT<Real>& model, const ModelFlags& flags, const Episode& ep,
                        const LossWeightsT<Real>& lw, const DistanceWeightsT<Real>& omega,
                        Real tau, Stage from,
                        const std::vector<std::vector<TensorT<Real>>>* csm_cache,
                        const std::vector<TensorT<Real>>* feat_cache,
                        uint64_t* signature = nullptr) {
    TapeT<Real> tp;
    ModelVarsT<Real> mv = leaf_model(tp, model, flags, false);

    // clips in episode order: supports class-major, then queries
    std::vector<const VideoSample*> clips;
    for (const auto& row : ep.support) {
        for (const VideoSample* s : row) {
            clips.push_back(s);
        }
    }
    for (const VideoSample* q : ep.queries) {
        clips.push_back(q);
    }

    std::vector<VarT<Real>> feats(clips.size());
    for (size_t i = 0; i < clips.size(); ++i) {
        if (from == Stage::Trm) {
            feats[i] = tp.constant((*feat_cache)[i]);
        } else if (from == Stage::Backbone && flags.csm_on) {
            std::vector<VarT<Real>> frames;
            for (const auto& t : (*csm_cache)[i]) {
                frames.push_back(tp.constant(t));
            }
            feats[i] = extract(frames, mv.backbone);
        } else {
            feats[i] = clip_features(tp, mv, clips[i]->clip).feats;
        }
    }

    std::vector<VarT<Real>> p1, p2;
    size_t idx = 0;
    for (int slot = 0; slot < ep.way; ++slot) {
        std::vector<VarT<Real>> plain, enhanced;
        for (int k = 0; k < ep.shot; ++k) {
            plain.push_back(feats[idx]);
            enhanced.push_back(temporal_enhance(mv, feats[idx]));
            ++idx;
        }
        p2.push_back(build_prototype(plain));
        p1.push_back(build_prototype(enhanced));
    }
    std::vector<VarT<Real>> qd;
    std::vector<int> truth;
    for (size_t q = 0; q < ep.queries.size(); ++q) {
        VarT<Real> f = feats[idx + q];
        auto cls = classify(p1, p2, temporal_enhance(mv, f), f, omega);
        qd.push_back(cls.combined);
        truth.push_back(ep.query_slots[q]);
    }
    const Real loss = total_loss(qd, truth, p1, p2, lw, tau).value().at(0);
    if (signature != nullptr) {
        *signature = tp.relu_signature();
    }
    return loss;
}

}  // namespace detail

// Verifies every parameter coordinate; h and tolerance per the harness caller.
// rel_floor guards coordinates whose gradient is numerically zero.
template <class Real>
GradCheckResult<Real> gradcheck_model(OtterModelT<Real>& model, const ModelFlags& flags,
                                      const Episode& ep, const LossWeightsT<Real>& lw,
                                      const DistanceWeightsT<Real>& omega, Real tau, Real h,
                                      double tol, double rel_floor, int threads) {
    // analytic gradients from one recorded tape
    TapeT<Real> tp;
    ModelVarsT<Real> mv = leaf_model(tp, model, flags, true);
    EpisodeOutcome<Real> out = episode_forward(tp, mv, ep, lw, omega, tau);
    tp.backward(out.loss);
    auto reg = model.registry();
    std::vector<TensorT<Real>> analytic;
    analytic.reserve(reg.entries.size());
    for (size_t i = 0; i < reg.entries.size(); ++i) {
        analytic.push_back(tp.grad(mv.leaves[i].id));
    }
    tp.clear();

    // stage caches at base parameters
    std::vector<std::vector<TensorT<Real>>> csm_cache;
    std::vector<TensorT<Real>> feat_cache;
    {
        TapeT<Real> tc;
        ModelVarsT<Real> mc = leaf_model(tc, model, flags, false);
        std::vector<const VideoSample*> clips;
        for (const auto& row : ep.support) {
            for (const VideoSample* s : row) {
                clips.push_back(s);
            }
        }
        for (const VideoSample* q : ep.queries) {
            clips.push_back(q);
        }
        for (const VideoSample* s : clips) {
            auto toks = clip_to_frame_tokens<Real>(s->clip);
            std::vector<VarT<Real>> frames;
            for (auto& t : toks) {
                frames.push_back(tc.constant(t));
            }
            std::vector<TensorT<Real>> processed;
            VarT<Real> feats;
            if (flags.csm_on) {
                auto cs = csm_forward(frames, mv.image, mv.image, mv.csm_patch, mc.csm);
                std::vector<VarT<Real>> pf;
                for (auto& c : cs) {
                    processed.push_back(c.frame.value());
                    pf.push_back(c.frame);
                }
                feats = extract(pf, mc.backbone);
            } else {
                feats = extract(frames, mc.backbone);
            }
            csm_cache.push_back(std::move(processed));
            feat_cache.push_back(feats.value());
        }
    }

    // flatten coordinates
    struct Coord {
        size_t param;
        size_t index;
    };
    std::vector<Coord> coords;
    for (size_t p = 0; p < reg.entries.size(); ++p) {
        for (size_t i = 0; i < reg.entries[p].tensor->size(); ++i) {
            coords.push_back({p, i});
        }
    }

    const int nthreads = threads > 0 ? threads : static_cast<int>(
                             std::max(1u, std::thread::hardware_concurrency()));
    std::vector<double> rel(coords.size(), 0.0);
    std::vector<double> numeric(coords.size(), 0.0);
    std::vector<char> refined(coords.size(), 0);
    std::atomic<size_t> cursor{0};

    auto worker = [&]() {
        OtterModelT<Real> local = model;  // private copy to perturb
        auto lreg = local.registry();
        while (true) {
            const size_t ci = cursor.fetch_add(1);
            if (ci >= coords.size()) {
                break;
            }
            const Coord c = coords[ci];
            TensorT<Real>* t = lreg.entries[c.param].tensor;
            const detail::Stage st = detail::stage_of(lreg.entries[c.param].name);
            const Real orig = t->at(c.index);
            // A central difference is only a derivative oracle when both
            // evaluations sit on the same smooth piece; when the +/-h pair
            // straddles a relu kink, shrink the step for this coordinate.
            double h_eff = static_cast<double>(h);
            double fd = 0.0;
            for (int attempt = 0;; ++attempt) {
                uint64_t sig_p = 0, sig_m = 0;
                t->at(c.index) = orig + static_cast<Real>(h_eff);
                const double fp = static_cast<double>(detail::episode_loss_value(
                    local, flags, ep, lw, omega, tau, st, &csm_cache, &feat_cache, &sig_p));
                t->at(c.index) = orig - static_cast<Real>(h_eff);
                const double fm = static_cast<double>(detail::episode_loss_value(
                    local, flags, ep, lw, omega, tau, st, &csm_cache, &feat_cache, &sig_m));
                t->at(c.index) = orig;
                fd = (fp - fm) / (2.0 * h_eff);
                if (sig_p == sig_m || attempt >= 3) {
                    break;
                }
                refined[ci] = 1;
                h_eff /= 10.0;
            }
            const double an = static_cast<double>(analytic[c.param].at(c.index));
            numeric[ci] = fd;
            rel[ci] = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), rel_floor});
        }
    };
    std::vector<std::thread> ts;
    for (int i = 0; i < nthreads; ++i) {
        ts.emplace_back(worker);
    }
    for (auto& t : ts) {
        t.join();
    }

    GradCheckResult<Real> res;
    res.coords = coords.size();
    for (size_t ci = 0; ci < coords.size(); ++ci) {
        res.kink_refined += refined[ci] != 0 ? 1u : 0u;
        if (rel[ci] > res.max_rel_err) {
            res.max_rel_err = rel[ci];
            res.worst_param = reg.entries[coords[ci].param].name;
            res.worst_index = coords[ci].index;
            res.worst_analytic = static_cast<double>(analytic[coords[ci].param].at(coords[ci].index));
            res.worst_numeric = numeric[ci];
        }
        if (rel[ci] > tol) {
            ++res.failures;
        }
    }
    return res;
}

}  // namespace otter
