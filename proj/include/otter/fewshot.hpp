#pragma once

// Dual-prototype episodic classification: per-class temporal-enhanced
// prototype P1 (post-TRM) and regular prototype P2 (pre-TRM), combined
// distances, prototype-separation losses and the three-part training
// objective.

#include <vector>

#include "otter/tape.hpp"

namespace otter {

template <class Real>
struct LossWeightsT {
    Real l0 = Real(0.8), l1 = Real(0.1), l2 = Real(0.1);

    void validate() const {
        check(l0 >= Real(0) && l1 >= Real(0) && l2 >= Real(0), "LossWeights",
              "weights must be nonnegative");
        const double s = static_cast<double>(l0) + l1 + l2;
        check(std::abs(s - 1.0) <= 1e-6, "LossWeights", "weights must sum to 1");
    }
};

using LossWeights = LossWeightsT<float>;

template <class Real>
struct DistanceWeightsT {
    Real w1 = Real(0.5), w2 = Real(0.5);

    void validate() const {
        check(w1 >= Real(0) && w2 >= Real(0), "DistanceWeights", "weights must be nonnegative");
        check(std::abs(static_cast<double>(w1) + w2 - 1.0) <= 1e-6, "DistanceWeights",
              "weights must sum to 1");
    }
};

using DistanceWeights = DistanceWeightsT<float>;

// Elementwise mean of the K support features of one class.
template <class Real>
VarT<Real> build_prototype(const std::vector<VarT<Real>>& supports) {
    check(!supports.empty(), "build_prototype", "empty class");
    VarT<Real> acc = supports[0];
    for (size_t i = 1; i < supports.size(); ++i) {
        acc = add(acc, supports[i]);
    }
    return affine(acc, Real(1) / static_cast<Real>(supports.size()), Real(0));
}

// rows [start, start+count) of a [T,C] matrix
template <class Real>
VarT<Real> slice_rows(VarT<Real> a, int start, int count) {
    check(a.value().rank() == 2, "slice_rows", "operand must be rank-2");
    const int T = a.value().dim(0), C = a.value().dim(1);
    check(start >= 0 && count >= 1 && start + count <= T, "slice_rows", "row range out of bounds");
    TapeT<Real>& tp = *a.tape;
    TensorT<Real> out({count, C}, Uninit{});
    for (int t = 0; t < count; ++t) {
        for (int c = 0; c < C; ++c) {
            out.at2(t, c) = a.value().at2(start + t, c);
        }
    }
    VarT<Real> v = tp.push(std::move(out), tp.wants_grad(a.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, ia = a.id;
        tp.set_back(v, [oid, ia, start, count, C](TapeT<Real>& t) {
            const TensorT<Real>& g = *t.grad_if_any(oid);
            TensorT<Real>& d = t.grad_buf(ia);
            for (int r = 0; r < count; ++r) {
                for (int c = 0; c < C; ++c) {
                    d.at2(start + r, c) += g.at2(r, c);
                }
            }
        });
    }
    return v;
}

enum class DistanceKind {
    Frobenius,    // one norm over all F*D entries
    PerFrameSum,  // sum over frames of per-frame norms
};

// || P - q ||
template <class Real>
VarT<Real> proto_distance(VarT<Real> P, VarT<Real> q,
                          DistanceKind kind = DistanceKind::Frobenius) {
    detail::require_same_shape(P, q, "proto_distance");
    VarT<Real> d = sub(P, q);
    if (kind == DistanceKind::Frobenius) {
        return sqrt_op(sum_all(mul(d, d)));
    }
    const int F = d.value().dim(0);
    VarT<Real> sq = mul(d, d);
    VarT<Real> acc;
    for (int f = 0; f < F; ++f) {
        VarT<Real> row = sqrt_op(sum_all(slice_rows(sq, f, 1)));
        acc = f == 0 ? row : add(acc, row);
    }
    return acc;
}

// cosine similarity of two flattened feature tensors
template <class Real>
VarT<Real> cosine_sim(VarT<Real> a, VarT<Real> b) {
    detail::require_same_shape(a, b, "cosine_sim");
    VarT<Real> na = sqrt_op(sum_all(mul(a, a)));
    VarT<Real> nb = sqrt_op(sum_all(mul(b, b)));
    check(na.value().at(0) > Real(0) && nb.value().at(0) > Real(0), "cosine_sim",
          "cosine undefined for zero-norm operand");
    return mul(sum_all(mul(a, b)), recip(mul(na, nb)));
}

// Sum of cosine similarity over unordered class pairs n != n'.
template <class Real>
VarT<Real> separation_loss(const std::vector<VarT<Real>>& prototypes) {
    check(prototypes.size() >= 2, "separation_loss", "needs at least two classes");
    VarT<Real> acc;
    bool first = true;
    for (size_t i = 0; i < prototypes.size(); ++i) {
        for (size_t j = i + 1; j < prototypes.size(); ++j) {
            VarT<Real> s = cosine_sim(prototypes[i], prototypes[j]);
            acc = first ? s : add(acc, s);
            first = false;
        }
    }
    return acc;
}

// Cross-entropy of softmax(-d / tau) against class `y`, numerically shifted.
template <class Real>
VarT<Real> cross_entropy_from_distances(VarT<Real> d, int y, Real tau) {
    check(d.value().rank() == 1, "cross_entropy", "distances must be a vector");
    const int N = d.value().dim(0);
    check(y >= 0 && y < N, "cross_entropy",
          "label " + std::to_string(y) + " outside 0.." + std::to_string(N - 1));
    check(tau > Real(0), "cross_entropy", "temperature must be positive");
    TapeT<Real>& tp = *d.tape;
    // logits z = -d / tau
    double m = -std::numeric_limits<double>::infinity();
    for (int n = 0; n < N; ++n) {
        m = std::max(m, static_cast<double>(-d.value().at(static_cast<size_t>(n)) / tau));
    }
    double sum = 0.0;
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(N));
    for (int n = 0; n < N; ++n) {
        double e = std::exp(static_cast<double>(-d.value().at(static_cast<size_t>(n)) / tau) - m);
        (*probs)[static_cast<size_t>(n)] = e;
        sum += e;
    }
    for (auto& p : *probs) {
        p /= sum;
    }
    const double zy = static_cast<double>(-d.value().at(static_cast<size_t>(y)) / tau);
    const double ce = -(zy - m - std::log(sum));
    VarT<Real> v = tp.push(TensorT<Real>::scalar(static_cast<Real>(ce)), tp.wants_grad(d.id));
    if (tp.wants_grad(v.id)) {
        int oid = v.id, idd = d.id;
        tp.set_back(v, [oid, idd, probs, y, tau, N](TapeT<Real>& t) {
            const Real g = t.grad_if_any(oid)->at(0);
            TensorT<Real>& dd = t.grad_buf(idd);
            for (int n = 0; n < N; ++n) {
                const double ind = n == y ? 1.0 : 0.0;
                dd.at(static_cast<size_t>(n)) +=
                    g * static_cast<Real>((ind - (*probs)[static_cast<size_t>(n)]) / tau);
            }
        });
    }
    return v;
}

// ---------------------------------------------------------------------------
// classification
// ---------------------------------------------------------------------------

template <class Real>
struct ClassifyOut {
    int predicted = -1;           // argmin class, ties broken by lowest index
    VarT<Real> combined;          // [N] combined distances
};

// D_n = w1 * dist(P1_n, q_trm) + w2 * dist(P2_n, q_raw)
template <class Real>
ClassifyOut<Real> classify(const std::vector<VarT<Real>>& p1, const std::vector<VarT<Real>>& p2,
                           VarT<Real> q_trm, VarT<Real> q_raw,
                           const DistanceWeightsT<Real>& omega,
                           DistanceKind kind = DistanceKind::Frobenius) {
    check(!p1.empty() && p1.size() == p2.size(), "classify",
          "both prototypes must be present for each class");
    std::vector<VarT<Real>> ds;
    ds.reserve(p1.size());
    for (size_t n = 0; n < p1.size(); ++n) {
        VarT<Real> d1 = affine(proto_distance(p1[n], q_trm, kind), omega.w1, Real(0));
        VarT<Real> d2 = affine(proto_distance(p2[n], q_raw, kind), omega.w2, Real(0));
        ds.push_back(add(d1, d2));
    }
    ClassifyOut<Real> out;
    out.combined = stack_scalars(ds);
    out.predicted = 0;
    for (size_t n = 1; n < ds.size(); ++n) {
        if (out.combined.value().at(n) < out.combined.value().at(static_cast<size_t>(out.predicted))) {
            out.predicted = static_cast<int>(n);
        }
    }
    return out;
}

// total = l0 * mean-over-queries CE + l1 * Lp(P1) + l2 * Lp(P2)
template <class Real>
VarT<Real> total_loss(const std::vector<VarT<Real>>& query_distances,
                      const std::vector<int>& query_labels, const std::vector<VarT<Real>>& p1,
                      const std::vector<VarT<Real>>& p2, const LossWeightsT<Real>& lw,
                      Real tau = Real(1)) {
    check(query_distances.size() == query_labels.size(), "total_loss",
          "one truth label per query");
    check(!query_distances.empty(), "total_loss", "no queries");
    lw.validate();
    VarT<Real> ce;
    for (size_t j = 0; j < query_distances.size(); ++j) {
        VarT<Real> c = cross_entropy_from_distances(query_distances[j], query_labels[j], tau);
        ce = j == 0 ? c : add(ce, c);
    }
    ce = affine(ce, Real(1) / static_cast<Real>(query_distances.size()), Real(0));
    VarT<Real> total = affine(ce, lw.l0, Real(0));
    if (lw.l1 != Real(0)) {
        total = add(total, affine(separation_loss(p1), lw.l1, Real(0)));
    }
    if (lw.l2 != Real(0)) {
        total = add(total, affine(separation_loss(p2), lw.l2, Real(0)));
    }
    return total;
}

}  // namespace otter
