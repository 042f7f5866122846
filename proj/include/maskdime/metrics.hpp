#pragma once

// Evaluation metrics over original / counterfactual pairs.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "maskdime/error.hpp"
#include "maskdime/masks.hpp"
#include "maskdime/models.hpp"
#include "maskdime/rng.hpp"
#include "maskdime/tensor.hpp"

namespace maskdime::metrics {

/// Fraction of counterfactuals whose argmax prediction is `target`.
inline double flip_rate(const std::vector<Tensor>& cfs, int target, const Classifier& clf) {
    if (cfs.empty()) throw ArgumentError("flip_rate needs at least one pair");
    int hit = 0;
    for (const Tensor& c : cfs) hit += clf.predict(c) == target;
    return static_cast<double>(hit) / static_cast<double>(cfs.size());
}

/// Insertion curve: pixels ranked by channel-mean |x_cf - x| (descending,
/// ties by raster order) move from x to x_cf in n_batches equal groups; at each
/// of the n_batches + 1 stages record p(target) - p(source). Returns the
/// stage values.
inline std::vector<double> cout_curve(const Tensor& x, const Tensor& x_cf, int source, int target,
                                      const std::function<Tensor(const Tensor&)>& probs, int n_batches = 32) {
    require_same_shape(x, x_cf, "cout");
    if (n_batches < 1) throw ArgumentError("cout needs at least one batch");
    const Tensor diff = abs_diff_map(x_cf, x);
    const std::vector<int> order = rank_desc(diff);
    const std::size_t hw = diff.numel(), c = x.numel() / hw;
    Tensor stages({n_batches + 1, static_cast<int>(c), x.dim(-2), x.dim(-1)});
    Tensor cur = x;
    std::size_t done = 0;
    for (int k = 0; k <= n_batches; ++k) {
        const std::size_t upto = (hw * static_cast<std::size_t>(k) + static_cast<std::size_t>(n_batches) / 2) / n_batches;
        for (; done < upto; ++done) {
            const std::size_t p = static_cast<std::size_t>(order[done]);
            for (std::size_t ch = 0; ch < c; ++ch) cur[ch * hw + p] = x_cf[ch * hw + p];
        }
        std::copy(cur.vec().begin(), cur.vec().end(), stages.data() + static_cast<std::size_t>(k) * x.numel());
    }
    const Tensor p = probs(stages);
    std::vector<double> curve(static_cast<std::size_t>(n_batches) + 1);
    for (int k = 0; k <= n_batches; ++k)
        curve[k] = static_cast<double>(p[2 * k + target]) - static_cast<double>(p[2 * k + source]);
    return curve;
}

/// Trapezoid area of a curve sampled uniformly on [0, 1].
inline double trapezoid_unit(const std::vector<double>& c) {
    if (c.size() < 2) throw ArgumentError("curve needs two points");
    double a = 0;
    for (std::size_t i = 0; i + 1 < c.size(); ++i) a += 0.5 * (c[i] + c[i + 1]);
    return std::clamp(a / static_cast<double>(c.size() - 1), -1.0, 1.0);
}

inline double cout(const Tensor& x, const Tensor& x_cf, int source, int target, const Classifier& clf,
                   int n_batches = 32) {
    return trapezoid_unit(cout_curve(x, x_cf, source, target, [&](const Tensor& b) { return clf.probs(b); }, n_batches));
}

// --- Frechet distance ----------------------------------------------------------

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Rows of a [n, d] tensor as a double matrix.
inline Matrix to_matrix(const Tensor& t) {
    if (t.rank() != 2) throw ShapeError("feature set must be [n, d], got " + to_string(t.shape()));
    Matrix m(t.dim(0), t.dim(1));
    for (int i = 0; i < t.dim(0); ++i)
        for (int j = 0; j < t.dim(1); ++j) m(i, j) = t[static_cast<std::size_t>(i) * t.dim(1) + j];
    return m;
}

inline constexpr double kShrinkage = 1e-6;
inline constexpr double kEigenFloor = 1e-10;

struct Moments {
    Vector mu;
    Matrix cov;
};

inline Moments moments(const Matrix& f) {
    const Eigen::Index n = f.rows(), d = f.cols();
    if (n < 2) throw ArgumentError("frechet needs at least 2 samples per set");
    Moments m;
    m.mu = f.colwise().mean().transpose();
    const Matrix c = f.rowwise() - m.mu.transpose();
    m.cov = (c.transpose() * c) / static_cast<double>(n - 1);
    if (n < d + 1) m.cov.diagonal().array() += kShrinkage;
    return m;
}

/// PSD square root via the symmetric eigendecomposition; eigenvalues below the floor count as 0.
inline Matrix sqrt_psd(const Matrix& a) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a + a.transpose()));
    Vector ev = es.eigenvalues();
    for (Eigen::Index i = 0; i < ev.size(); ++i) ev(i) = ev(i) < kEigenFloor ? 0.0 : std::sqrt(ev(i));
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline double trace_sqrt_psd(const Matrix& a) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a + a.transpose()), Eigen::EigenvaluesOnly);
    double s = 0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        const double v = es.eigenvalues()(i);
        if (v >= kEigenFloor) s += std::sqrt(v);
    }
    return s;
}

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2}).
inline double frechet(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw ShapeError("feature dimensions differ");
    const Moments ma = moments(a), mb = moments(b);
    const Matrix ra = sqrt_psd(ma.cov);
    const double tr = trace_sqrt_psd(ra * mb.cov * ra);
    const double d = (ma.mu - mb.mu).squaredNorm() + ma.cov.trace() + mb.cov.trace() - 2.0 * tr;
    return std::max(0.0, d);
}

inline double frechet(const Tensor& a, const Tensor& b) { return frechet(to_matrix(a), to_matrix(b)); }

struct SfidResult {
    double mean = 0;
    double sd = 0;
    bool sd_defined = true;  // false with a single repeat
    std::vector<double> values;
};

/// Split protocol: per repeat, a random disjoint halving; Frechet distance of
/// counterfactual features on half A against original features on half B.
/// Counterfactuals are per-image, so they are taken from a precomputed set.
inline SfidResult sfid_protocol(const Tensor& orig_feats, const Tensor& cf_feats, int n_repeats, std::uint64_t seed) {
    require_same_shape(orig_feats, cf_feats, "sfid_protocol");
    const int n = orig_feats.dim(0);
    if (n < 40) throw ArgumentError("sfid protocol needs at least 40 samples");
    if (n_repeats < 1) throw ArgumentError("sfid protocol needs at least one repeat");
    const Matrix fo = to_matrix(orig_feats), fc = to_matrix(cf_feats);
    SfidResult r;
    const RngStream root = RngStream(seed).substream({tag(StreamTag::split)});
    for (int rep = 0; rep < n_repeats; ++rep) {
        std::vector<int> perm(static_cast<std::size_t>(n));
        std::iota(perm.begin(), perm.end(), 0);
        RngStream s = root.substream({static_cast<std::uint64_t>(rep)});
        s.shuffle(perm);
        const int half = n / 2;
        Matrix a(half, fo.cols()), b(n - half, fo.cols());
        for (int i = 0; i < half; ++i) a.row(i) = fc.row(perm[i]);
        for (int i = half; i < n; ++i) b.row(i - half) = fo.row(perm[i]);
        r.values.push_back(frechet(a, b));
    }
    r.mean = std::accumulate(r.values.begin(), r.values.end(), 0.0) / n_repeats;
    if (n_repeats == 1) {
        r.sd_defined = false;
    } else {
        double ss = 0;
        for (double v : r.values) ss += (v - r.mean) * (v - r.mean);
        r.sd = std::sqrt(ss / (n_repeats - 1));
    }
    return r;
}

// --- per-pair metrics ------------------------------------------------------------

struct Locality {
    double value = 1.0;
    bool no_edit = false;
};

/// Share of the total edit magnitude that falls inside the causal mask.
inline Locality locality(const Tensor& x, const Tensor& x_cf, const Tensor& causal_mask) {
    if (causal_mask.empty()) throw ArgumentError("locality needs a causal mask");
    require_same_shape(x, x_cf, "locality");
    require_same_shape(x, causal_mask, "locality");
    double in = 0, all = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double d = std::fabs(static_cast<double>(x_cf[i]) - x[i]);
        all += d;
        if (causal_mask[i] != 0.0f) in += d;
    }
    if (all == 0) return {1.0, true};
    return {in / all, false};
}

inline double mean_l1(const Tensor& x, const Tensor& x_cf) {
    return l1_distance(x, x_cf) / static_cast<double>(x.numel());
}

inline double s3_proxy(const Tensor& x, const Tensor& x_cf, const FeatureNet& f) {
    return cosine(f.features(x), f.features(x_cf));
}

/// Mean pairwise feature-space L2 distance between runs.
inline double diversity_sigma(const std::vector<Tensor>& runs, const FeatureNet& f) {
    if (runs.size() < 2) throw ArgumentError("diversity needs at least two runs");
    std::vector<Tensor> feats;
    for (const Tensor& r : runs) feats.push_back(f.features(r));
    double acc = 0;
    int pairs = 0;
    for (std::size_t i = 0; i < feats.size(); ++i)
        for (std::size_t j = i + 1; j < feats.size(); ++j) {
            double d = 0;
            for (std::size_t k = 0; k < feats[i].numel(); ++k) {
                const double e = static_cast<double>(feats[i][k]) - feats[j][k];
                d += e * e;
            }
            acc += std::sqrt(d);
            ++pairs;
        }
    return acc / pairs;
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw ArgumentError("median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace maskdime::metrics
