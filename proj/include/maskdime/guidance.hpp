#pragma once

// Counterfactual loss, its reparameterized noisy-space gradient and the
// class-gradient saliency map. One forward pass serves all three; the class
// term and the remaining terms get separate backward sweeps so that the
// saliency never depends on the perceptual or L1 weights.

#include <cmath>
#include <string>
#include <vector>

#include "maskdime/diffusion.hpp"
#include "maskdime/error.hpp"
#include "maskdime/models.hpp"
#include "maskdime/ndgrad.hpp"
#include "maskdime/tensor.hpp"

namespace maskdime {

struct GuidanceConfig {
    double lambda_c = 8.0;
    double lambda_p = 30.0;
    double lambda_l = 0.05;
    double s = 8.0;
    int y = 1;
    int tau = 60;
    double k = 0.1;
    double rho = 0.5;

    void validate(int T) const {
        if (lambda_c < 0 || lambda_p < 0 || lambda_l < 0) throw ConfigError("loss weights must be nonnegative");
        if (s < 0) throw ConfigError("guidance scale s must be nonnegative");
        if (y != 0 && y != 1) throw ConfigError("target class must be 0 or 1");
        if (tau < 1 || tau > T) throw ConfigError("tau must lie in [1, T]");
        if (!(k > 0 && k <= 1)) throw ConfigError("k must lie in (0, 1]");
        if (!(rho > 0 && rho <= 1)) throw ConfigError("rho must lie in (0, 1]");
    }
};

inline constexpr float kProbFloor = 1e-12f;

struct GuidanceNets {
    const Classifier& clf;
    const FeatureNet& feat;
};

struct LossTerms {
    double total = 0, l_class = 0, l_perc = 0, l_l1 = 0;
    float p_target = 0;
    bool clamped = false;  // p_target fell below the floor
};

struct LossGraph {
    Var x_t, l_class, rest, total;
    LossTerms terms;
};

/// Builds L = lc*L_class + lp*L_perc + ll*L_L1 on `tape` with x_t as the only variable.
/// `feat_x` are the (constant) features of the original image.
inline LossGraph build_joint_loss(Tape& tape, const Tensor& x_t, const Tensor& x, const Tensor& feat_x,
                                  const GuidanceConfig& cfg, const GuidanceNets& nets) {
    using namespace ndgrad;
    require_same_shape(x_t, x, "joint_loss");
    const Tensor xb = nets::as_batch(x_t);
    if (xb.dim(0) != 1) throw ShapeError("joint_loss takes a single image");
    LossGraph g;
    g.x_t = tape.variable(xb);
    const std::vector<Var> cp = nets.clf.params.bind(tape, false);
    const std::vector<Var> fp = nets.feat.params.bind(tape, false);

    Var logits = nets.clf.forward(tape, cp, g.x_t).logits;
    g.terms.p_target = softmax(logits).value()[static_cast<std::size_t>(cfg.y)];
    g.terms.clamped = g.terms.p_target < kProbFloor;
    // -log p through log-softmax: equal to -log max(p, floor) above the floor,
    // and still informative below it.
    g.l_class = scale(pick(log_softmax(logits), {cfg.y}), -1.0f);

    Var f = nets.feat.forward(tape, fp, g.x_t);
    Var l_perc = scale(sum(square(sub(f, tape.constant(feat_x.reshaped(f.shape()))))),
                       1.0f / static_cast<float>(f.value().numel()));
    Var l_l1 = mean(abs(sub(g.x_t, tape.constant(nets::as_batch(x)))));
    g.rest = add(scale(l_perc, static_cast<float>(cfg.lambda_p)), scale(l_l1, static_cast<float>(cfg.lambda_l)));
    g.total = add(scale(g.l_class, static_cast<float>(cfg.lambda_c)), g.rest);

    g.terms.l_class = g.l_class.value()[0];
    g.terms.l_perc = l_perc.value()[0];
    g.terms.l_l1 = l_l1.value()[0];
    g.terms.total = g.total.value()[0];
    return g;
}

inline LossTerms joint_loss(const Tensor& x_t, const Tensor& x, const GuidanceConfig& cfg, const GuidanceNets& nets) {
    Tape tape;
    return build_joint_loss(tape, x_t, x, nets.feat.features(x), cfg, nets).terms;
}

struct GuidanceResult {
    Tensor grad_x;     // dL/dx_t, image shape
    Tensor noisy_grad; // s / sqrt(abar_t) * dL/dx_t
    Tensor saliency;   // |dL_class/dx_t| / sqrt(abar_t), channel mean, [1,H,W]
    LossTerms terms;
};

/// Channel mean of |g| over a [1,C,H,W] or [C,H,W] gradient, scaled by `coef`.
inline Tensor channel_abs_mean(const Tensor& g, double coef) {
    const int c = g.dim(-3), h = g.dim(-2), w = g.dim(-1);
    Tensor out({1, h, w});
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < hw; ++i) {
        double acc = 0;
        for (int ch = 0; ch < c; ++ch) acc += std::fabs(coef * g[ch * hw + i]);
        out[i] = static_cast<float>(acc / c);
    }
    return out;
}

/// Gradient, reparameterized gradient and saliency for one guided step at t.
inline GuidanceResult guidance_pass(const Tensor& x_t, const Tensor& x, const Tensor& feat_x, int t,
                                    const Schedule& sched, const GuidanceConfig& cfg, const GuidanceNets& nets) {
    sched.check_step(t);
    Tape tape;
    LossGraph g = build_joint_loss(tape, x_t, x, feat_x, cfg, nets);
    const Tensor g_class = tape.grad(g.l_class, g.x_t);
    const Tensor g_rest = tape.grad(g.rest, g.x_t);

    GuidanceResult r;
    r.terms = g.terms;
    r.grad_x = Tensor(x_t.shape());
    const float lc = static_cast<float>(cfg.lambda_c);
    for (std::size_t i = 0; i < x_t.numel(); ++i) r.grad_x[i] = lc * g_class[i] + g_rest[i];
    require_finite(r.grad_x, "guidance gradient");

    const double inv_sqrt_ab = 1.0 / std::sqrt(sched.alpha_bar[t]);
    const double coef = cfg.s * inv_sqrt_ab;
    r.noisy_grad = Tensor(x_t.shape());
    for (std::size_t i = 0; i < x_t.numel(); ++i) r.noisy_grad[i] = static_cast<float>(coef * r.grad_x[i]);
    r.saliency = channel_abs_mean(g_class.reshaped(nets::as_batch(x_t).shape()), inv_sqrt_ab);
    return r;
}

inline Tensor noisy_gradient(const Tensor& x_t, const Tensor& x, int t, const Schedule& sched,
                             const GuidanceConfig& cfg, const GuidanceNets& nets) {
    return guidance_pass(x_t, x, nets.feat.features(x), t, sched, cfg, nets).noisy_grad;
}

inline Tensor class_saliency(const Tensor& x_t, int t, const Schedule& sched, const GuidanceConfig& cfg,
                             const GuidanceNets& nets) {
    sched.check_step(t);
    Tape tape;
    Var xv = tape.variable(nets::as_batch(x_t));
    Var logits = nets.clf.forward(tape, nets.clf.params.bind(tape, false), xv).logits;
    Var l_class = ndgrad::scale(ndgrad::pick(ndgrad::log_softmax(logits), {cfg.y}), -1.0f);
    return channel_abs_mean(tape.grad(l_class, xv), 1.0 / std::sqrt(sched.alpha_bar[t]));
}

}  // namespace maskdime
