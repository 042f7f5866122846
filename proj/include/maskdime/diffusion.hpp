#pragma once

// Noise schedule, forward corruption, guided ancestral step and the one-step
// clean-image estimate. Index t runs 0..T; t = 0 is the clean image.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "maskdime/error.hpp"
#include "maskdime/rng.hpp"
#include "maskdime/tensor.hpp"

namespace maskdime {

struct Schedule {
    int T = 0;
    std::vector<double> beta;           // beta[0] = 0
    std::vector<double> alpha_bar;      // alpha_bar[0] = 1
    std::vector<double> posterior_var;  // posterior_var[0] = 0

    static Schedule linear(int T = 200, double beta_start = 1e-4, double beta_end = 0.05) {
        if (T < 1) throw ArgumentError("schedule needs T >= 1");
        Schedule s;
        s.T = T;
        s.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
        for (int t = 1; t <= T; ++t)
            s.beta[t] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
        s.finish();
        return s;
    }

    double alpha(int t) const { return 1.0 - beta.at(static_cast<std::size_t>(t)); }

    void check_step(int t, int lo = 0) const {
        if (t < lo || t > T)
            throw ArgumentError("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                                std::to_string(T) + "]");
    }

private:
    void finish() {
        alpha_bar.assign(beta.size(), 1.0);
        posterior_var.assign(beta.size(), 0.0);
        for (int t = 1; t <= T; ++t) {
            if (!(beta[t] > 0.0 && beta[t] < 1.0)) throw ArgumentError("beta must lie in (0, 1)");
            if (beta[t] < beta[t - 1]) throw ArgumentError("beta must be nondecreasing");
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
            posterior_var[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
        }
    }
};

/// Noise predictor: (z [N,1,H,W], t) -> eps estimate of the same shape.
using EpsFn = std::function<Tensor(const Tensor&, int)>;

struct Diffused {
    Tensor z;
    Tensor eps;
};

/// z = sqrt(abar_t) x + sqrt(1 - abar_t) eps with the given noise. t = 0 returns x.
inline Tensor diffuse_with(const Schedule& s, const Tensor& x, int t, const Tensor& eps) {
    s.check_step(t);
    require_same_shape(x, eps, "forward_diffuse");
    const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
    Tensor z(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) z[i] = static_cast<float>(a * x[i] + b * eps[i]);
    return z;
}

inline Diffused forward_diffuse(const Schedule& s, const Tensor& x, int t, RngStream& rng) {
    s.check_step(t);
    Tensor eps = rng.normal_tensor(x.shape());
    Tensor z = diffuse_with(s, x, t, eps);
    return {std::move(z), std::move(eps)};
}

/// DDPM posterior mean from a noise estimate.
inline Tensor posterior_mean(const Schedule& s, const Tensor& z, int t, const Tensor& eps) {
    s.check_step(t, 1);
    require_same_shape(z, eps, "posterior_mean");
    const double c = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
    const double inv = 1.0 / std::sqrt(s.alpha(t));
    Tensor mu(z.shape());
    for (std::size_t i = 0; i < z.numel(); ++i) mu[i] = static_cast<float>(inv * (z[i] - c * eps[i]));
    return mu;
}

/// mu - var_t * grad + sqrt(var_t) * noise; the noise is ignored at t = 1.
inline Tensor guided_step_with(const Schedule& s, const Tensor& z, int t, const Tensor& eps, const Tensor& grad,
                               const Tensor& noise) {
    require_same_shape(z, grad, "guided_reverse_step");
    require_finite(grad, "guided_reverse_step gradient");
    const Tensor mu = posterior_mean(s, z, t, eps);
    require_finite(mu, "guided_reverse_step mean");
    const double var = s.posterior_var[t];
    const double sd = t > 1 ? std::sqrt(var) : 0.0;
    Tensor out(z.shape());
    for (std::size_t i = 0; i < z.numel(); ++i) {
        const double n = t > 1 ? static_cast<double>(noise[i]) : 0.0;
        out[i] = static_cast<float>(mu[i] - var * grad[i] + sd * n);
    }
    return out;
}

inline Tensor guided_reverse_step(const Schedule& s, const Tensor& z, int t, const EpsFn& eps_net, const Tensor& grad,
                                  RngStream& rng) {
    s.check_step(t, 1);
    const Tensor eps = eps_net(z, t);
    const Tensor noise = t > 1 ? rng.normal_tensor(z.shape()) : Tensor::zeros_like(z);
    return guided_step_with(s, z, t, eps, grad, noise);
}

/// x0 = (z - sqrt(1 - abar_t) eps) / sqrt(abar_t). At t = 0 this is z exactly.
inline Tensor tweedie_with(const Schedule& s, const Tensor& z, int t, const Tensor& eps) {
    s.check_step(t);
    require_same_shape(z, eps, "tweedie_estimate");
    const double ab = s.alpha_bar[t];
    if (!(ab > 0.0)) throw ArgumentError("tweedie_estimate needs alpha_bar > 0");
    const double b = std::sqrt(1.0 - ab), a = std::sqrt(ab);
    Tensor x0(z.shape());
    for (std::size_t i = 0; i < z.numel(); ++i) x0[i] = static_cast<float>((z[i] - b * eps[i]) / a);
    return x0;
}

inline Tensor tweedie_estimate(const Schedule& s, const Tensor& z, int t, const EpsFn& eps_net) {
    return tweedie_with(s, z, t, eps_net(z, t));
}

}  // namespace maskdime
