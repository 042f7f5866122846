#pragma once

// Counterfactual samplers: the masked one-step-estimate loop and its
// baselines. Random streams are keyed by (sample key, attempt, step) and not
// by variant, so every variant run on the same sample sees the same noise.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "maskdime/diffusion.hpp"
#include "maskdime/error.hpp"
#include "maskdime/guidance.hpp"
#include "maskdime/masks.hpp"
#include "maskdime/models.hpp"
#include "maskdime/rng.hpp"
#include "maskdime/tensor.hpp"

namespace maskdime {

enum class Variant { maskdime, no_mask, fixed_mask, pixel_diff_mask, dime_nested };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::maskdime: return "maskdime";
        case Variant::no_mask: return "no_mask";
        case Variant::fixed_mask: return "fixed_mask";
        case Variant::pixel_diff_mask: return "pixel_diff_mask";
        case Variant::dime_nested: return "dime_nested";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    for (Variant v : {Variant::maskdime, Variant::no_mask, Variant::fixed_mask, Variant::pixel_diff_mask,
                      Variant::dime_nested})
        if (s == variant_name(v)) return v;
    throw ConfigError("unknown sampler variant '" + s + "'");
}

struct SamplerConfig {
    Variant variant = Variant::maskdime;
    GuidanceConfig guidance;
    std::vector<double> lambda_c_list{8, 10, 15};
    bool retry = true;  // walk lambda_c_list until the prediction flips
    int dilation = 5;
    bool retain_states = false;
    std::uint64_t seed = 1;
};

struct SampleInput {
    std::string id;
    std::uint64_t key = 0;  // stable per-sample stream key
    Tensor x;               // [1,H,W]
    Tensor causal_mask;     // optional, [1,H,W]
};

struct StepRecord {
    int t = 0;
    float p_target = 0;     // classifier on x_t
    double mz_count = 0, mx_count = 0;
    bool clamped = false;
    // Retained only with retain_states.
    Tensor z_prev, z_next, z_ref, x_next, mz, mx;
};

struct Trajectory {
    std::string id;
    Variant variant = Variant::maskdime;
    bool skipped = false;
    bool flipped = false;
    double lambda_c = 0;
    int attempts = 0;
    float p_before = 0, p_after = 0;
    long eps_evals = 0;        // final attempt
    long eps_evals_total = 0;  // all attempts
    double wall_ms = 0;        // all attempts
    Tensor x, x_cf;
    Tensor z_init;             // z at t = tau of the final attempt
    std::vector<StepRecord> steps;  // final attempt, t = tau .. 1
};

struct SamplerNets {
    const EpsilonNet& eps;
    const Classifier& clf;
    const FeatureNet& feat;
};

namespace sampling {

inline RngStream stream(std::uint64_t seed, StreamTag tg, std::initializer_list<std::uint64_t> rest) {
    RngStream s = RngStream(seed).substream({tag(tg)});
    return s.substream(rest);
}

/// Unguided ancestral denoising from z at step t down to 0; t network evaluations.
inline Tensor inner_denoise(const Schedule& sched, Tensor z, int t, const EpsFn& eps, std::uint64_t seed,
                            std::uint64_t key, std::uint64_t attempt) {
    const Tensor zero = Tensor::zeros_like(z);
    for (int s = t; s >= 1; --s) {
        const Tensor e = eps(z, s);
        RngStream r = stream(seed, StreamTag::inner_loop, {key, attempt, static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(s)});
        const Tensor noise = s > 1 ? r.normal_tensor(z.shape()) : zero;
        z = guided_step_with(sched, z, s, e, zero, noise);
    }
    return z;
}

}  // namespace sampling

/// One full pass from t = tau to 0 at a fixed lambda_c.
inline Trajectory run_attempt(const SampleInput& in, const SamplerConfig& cfg, double lambda_c, int attempt,
                              const SamplerNets& nets, const Schedule& sched) {
    using sampling::stream;
    GuidanceConfig g = cfg.guidance;
    g.lambda_c = lambda_c;
    g.validate(sched.T);
    const GuidanceNets gnets{nets.clf, nets.feat};
    const std::uint64_t key = in.key, att = static_cast<std::uint64_t>(attempt);
    const Tensor& x = in.x;
    const Tensor feat_x = nets.feat.features(x);

    long evals = 0;
    const EpsFn eps = [&](const Tensor& z, int t) {
        ++evals;
        return nets.eps.predict(z, t);
    };

    Trajectory tr;
    tr.id = in.id;
    tr.variant = cfg.variant;
    tr.lambda_c = lambda_c;
    tr.x = x;

    RngStream init = stream(cfg.seed, StreamTag::init_noise, {key, att});
    Tensor z = forward_diffuse(sched, x, g.tau, init).z;
    Tensor xt = x;
    tr.z_init = z;

    const Tensor ones = Tensor::ones(x.shape());
    Tensor frozen;         // fixed_mask
    Tensor prev_x0;        // pixel_diff_mask: previous unblended estimate

    for (int t = g.tau; t >= 1; --t) {
        if (cfg.variant == Variant::dime_nested) xt = sampling::inner_denoise(sched, z, t, eps, cfg.seed, key, att);

        const GuidanceResult gr = guidance_pass(xt, x, feat_x, t, sched, g, gnets);

        Tensor mz, mx;
        switch (cfg.variant) {
            case Variant::maskdime: {
                DualMask dm = build_dual_mask(gr.saliency, g.k, g.rho, cfg.dilation);
                mz = dm.mz.reshaped(x.shape());
                mx = dm.mx.reshaped(x.shape());
                break;
            }
            case Variant::fixed_mask:
                if (t == g.tau) frozen = fixed_mask(gr.saliency, g.k, cfg.dilation).reshaped(x.shape());
                mz = mx = frozen;
                break;
            case Variant::pixel_diff_mask:
                mz = mx = prev_x0.empty() ? ones : pixel_diff_mask(prev_x0, x, g.k, cfg.dilation).reshaped(x.shape());
                break;
            case Variant::no_mask:
            case Variant::dime_nested: mz = mx = ones; break;
        }

        const Tensor e = eps(z, t);
        RngStream step_rng = stream(cfg.seed, StreamTag::step_noise, {key, att, static_cast<std::uint64_t>(t)});
        const Tensor noise = t > 1 ? step_rng.normal_tensor(z.shape()) : Tensor::zeros_like(z);
        const Tensor guided = guided_step_with(sched, z, t, e, gr.noisy_grad, noise);

        RngStream ref_rng = stream(cfg.seed, StreamTag::reference_noise, {key, att, static_cast<std::uint64_t>(t)});
        const Tensor z_ref = forward_diffuse(sched, x, t - 1, ref_rng).z;
        Tensor z_next = select(mz, guided, z_ref);
        require_finite(z_next, "sampler state");

        Tensor x_next;
        if (cfg.variant != Variant::dime_nested) {
            const Tensor x0 = tweedie_estimate(sched, z_next, t - 1, eps);
            prev_x0 = x0;
            x_next = select(mx, x0, x);
        }

        StepRecord rec;
        rec.t = t;
        rec.p_target = gr.terms.p_target;
        rec.clamped = gr.terms.clamped;
        rec.mz_count = popcount(mz);
        rec.mx_count = popcount(mx);
        if (cfg.retain_states) {
            rec.z_prev = z;
            rec.z_next = z_next;
            rec.z_ref = z_ref;
            rec.x_next = x_next;
            rec.mz = mz;
            rec.mx = mx;
        }
        tr.steps.push_back(std::move(rec));
        z = std::move(z_next);
        if (!x_next.empty()) xt = std::move(x_next);
    }

    tr.x_cf = z;
    tr.eps_evals = evals;
    tr.p_after = nets.clf.class_prob(z, g.y);
    tr.flipped = nets.clf.predict(z) == g.y;
    return tr;
}

/// Runs the configured variant with the lambda_c retry schedule. Inputs the
/// classifier already assigns to the target class get a skip record.
inline Trajectory run_sampler(const SampleInput& in, const SamplerConfig& cfg, const SamplerNets& nets,
                              const Schedule& sched) {
    const int y = cfg.guidance.y;
    const float p_before = nets.clf.class_prob(in.x, y);
    if (nets.clf.predict(in.x) == y) {
        Trajectory tr;
        tr.id = in.id;
        tr.variant = cfg.variant;
        tr.skipped = true;
        tr.p_before = tr.p_after = p_before;
        tr.x = tr.x_cf = in.x;
        return tr;
    }
    if (cfg.lambda_c_list.empty()) throw ConfigError("lambda_c list is empty");
    const auto start = std::chrono::steady_clock::now();
    Trajectory tr;
    long total = 0;
    const std::size_t n = cfg.retry ? cfg.lambda_c_list.size() : 1;
    for (std::size_t a = 0; a < n; ++a) {
        tr = run_attempt(in, cfg, cfg.lambda_c_list[a], static_cast<int>(a), nets, sched);
        total += tr.eps_evals;
        tr.attempts = static_cast<int>(a) + 1;
        if (tr.flipped) break;
    }
    tr.p_before = p_before;
    tr.eps_evals_total = total;
    tr.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return tr;
}

/// Per-step |z_{t-1} - z_t|, channel averaged and scaled to [0, 1] by the step maximum.
inline std::vector<Tensor> update_heatmaps(const Trajectory& tr) {
    std::vector<Tensor> out;
    for (const StepRecord& s : tr.steps) {
        if (s.z_prev.empty() || s.z_next.empty())
            throw ArgumentError("heatmaps need a trajectory recorded with state retention");
        Tensor m = abs_diff_map(s.z_next, s.z_prev);
        const float mx = *std::max_element(m.vec().begin(), m.vec().end());
        if (mx > 0)
            for (float& v : m.vec()) v /= mx;
        out.push_back(std::move(m));
    }
    return out;
}

/// Work count for one attempt, in noise-network evaluations.
inline long expected_eps_evals(Variant v, int tau) {
    const long t = tau;
    return v == Variant::dime_nested ? t * (t + 1) / 2 + t : 2 * t;
}

}  // namespace maskdime
