#pragma once

// Forward noising process, epsilon-prediction training loss, deterministic
// DDIM sampling, and classifier-free guidance arithmetic. All randomness
// comes in through explicit Rng parameters; given fixed inputs every routine
// here is a pure function.

#include "repose/ops.hpp"

#include <cmath>
#include <cstdint>
#include <type_traits>
#include <vector>

namespace repose {

// Per-timestep noise tables: beta rises linearly, alpha = 1 - beta, and
// alpha_bar is the running product of alpha computed in a single fixed-order
// pass (so it is reproducible bit for bit). The defaults leave less than 1%
// of the signal variance at the final step, which `validate` enforces.
struct NoiseSchedule {
    int64_t steps = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    static NoiseSchedule linear(int64_t steps = 256, double beta_start = 1e-4,
                                double beta_end = 0.04) {
        require_t<ConfigError>(steps >= 2, "schedule: need at least 2 steps");
        require_t<ConfigError>(beta_start > 0.0 && beta_end < 1.0 && beta_start < beta_end,
                               "schedule: need 0 < beta_start < beta_end < 1");
        NoiseSchedule ns;
        ns.steps = steps;
        ns.beta.resize(size_t(steps));
        ns.alpha.resize(size_t(steps));
        ns.alpha_bar.resize(size_t(steps));
        double prod = 1.0;
        for (int64_t t = 0; t < steps; ++t) {
            const double b = beta_start + (beta_end - beta_start) * double(t) / double(steps - 1);
            ns.beta[size_t(t)] = b;
            ns.alpha[size_t(t)] = 1.0 - b;
            prod *= ns.alpha[size_t(t)];
            ns.alpha_bar[size_t(t)] = prod;
        }
        ns.validate();
        return ns;
    }

    // alpha_bar with the virtual clean endpoint: ab(-1) == 1 exactly.
    double ab(int64_t t) const {
        require_t<ConfigError>(t >= -1 && t < steps, "schedule: timestep out of range");
        return t < 0 ? 1.0 : alpha_bar[size_t(t)];
    }

    void validate() const {
        require_t<ConfigError>(steps >= 2 && int64_t(beta.size()) == steps &&
                                   int64_t(alpha.size()) == steps &&
                                   int64_t(alpha_bar.size()) == steps,
                               "schedule: table sizes do not match step count");
        double prod = 1.0;
        for (int64_t t = 0; t < steps; ++t) {
            const size_t i = size_t(t);
            require_t<ConfigError>(beta[i] > 0.0 && beta[i] < 1.0,
                                   "schedule: beta out of (0,1) at step " + std::to_string(t));
            require_t<ConfigError>(t == 0 || beta[i] > beta[i - 1],
                                   "schedule: beta not strictly increasing at step " +
                                       std::to_string(t));
            require_t<ConfigError>(alpha[i] == 1.0 - beta[i],
                                   "schedule: alpha != 1 - beta at step " + std::to_string(t));
            prod *= alpha[i];
            require_t<ConfigError>(alpha_bar[i] == prod,
                                   "schedule: alpha_bar is not the single-pass running product "
                                   "at step " +
                                       std::to_string(t));
            require_t<ConfigError>(t == 0 || alpha_bar[i] < alpha_bar[i - 1],
                                   "schedule: alpha_bar not strictly decreasing at step " +
                                       std::to_string(t));
        }
        require_t<ConfigError>(alpha_bar.back() < 0.01,
                               "schedule: final alpha_bar " + std::to_string(alpha_bar.back()) +
                                   " leaves too much signal (must be < 0.01)");
    }
};

// Sampling knobs. eta = 0 keeps the reverse process deterministic.
struct SamplerConfig {
    int64_t num_inference_steps = 16;
    double eta = 0.0;
    double cfg_scale = 2.0;
    uint64_t rng_seed = 0;
};

// z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps, one t for all.
template <class T>
Tensor<T> forward_diffuse(const NoiseSchedule& ns, const Tensor<T>& z0, int64_t t,
                          const Tensor<T>& eps) {
    detail::require_same_shape(z0, eps, "forward_diffuse");
    require_t<ConfigError>(t >= 0 && t < ns.steps, "forward_diffuse: timestep out of range");
    const double ab = ns.alpha_bar[size_t(t)];
    return add(scale(z0, T(std::sqrt(ab))), scale(eps, T(std::sqrt(1.0 - ab))));
}

// Per-sample timesteps over the leading dimension.
template <class T>
Tensor<T> forward_diffuse(const NoiseSchedule& ns, const Tensor<T>& z0,
                          const std::vector<int64_t>& ts, const Tensor<T>& eps) {
    detail::require_same_shape(z0, eps, "forward_diffuse");
    require_t<ShapeError>(!z0.shape().empty() && z0.shape()[0] == int64_t(ts.size()),
                          "forward_diffuse: timestep count " + std::to_string(ts.size()) +
                              " vs leading extent of " + shape_str(z0.shape()));
    std::vector<T> a(ts.size()), b(ts.size());
    for (size_t i = 0; i < ts.size(); ++i) {
        require_t<ConfigError>(ts[i] >= 0 && ts[i] < ns.steps,
                               "forward_diffuse: timestep out of range");
        const double ab = ns.alpha_bar[size_t(ts[i])];
        a[i] = T(std::sqrt(ab));
        b[i] = T(std::sqrt(1.0 - ab));
    }
    return add(scale_rows(z0, std::move(a)), scale_rows(eps, std::move(b)));
}

// Draws one timestep per sample and a fresh noise tensor (in that order),
// then scores the model's noise prediction with mean squared error. The
// model sees (z_t, timesteps) and returns its epsilon estimate.
template <class T, class ModelFn>
Tensor<T> denoise_loss(const NoiseSchedule& ns, ModelFn&& model, const Tensor<T>& z0, Rng& rng) {
    require_t<ShapeError>(!z0.shape().empty(), "denoise_loss: z0 must have rank >= 1");
    const int64_t B = z0.shape()[0];
    std::vector<int64_t> ts(static_cast<size_t>(B));
    for (auto& t : ts) t = int64_t(rng.uniform_u64(uint64_t(ns.steps)));
    Tensor<T> eps = randn<T>(z0.shape(), rng);
    Tensor<T> zt = forward_diffuse(ns, z0, ts, eps);
    Tensor<T> pred = model(zt, ts);
    return mse_loss(pred, eps);
}

template <class T>
struct DdimStep {
    Tensor<T> z_prev;
    Tensor<T> z0_pred;  // the intermediate clean-image estimate
};

// One reverse step t -> t_prev. t_prev = -1 is the virtual clean endpoint
// (alpha_bar = 1 exactly), so the final step returns the predicted image.
// With eta = 0 the update is deterministic and `noise` stays unused.
template <class T>
DdimStep<T> ddim_step(const NoiseSchedule& ns, const Tensor<T>& z_t, const Tensor<T>& eps_hat,
                      int64_t t, int64_t t_prev, double eta = 0.0,
                      std::type_identity_t<const Tensor<T>*> noise = nullptr) {
    detail::require_same_shape(z_t, eps_hat, "ddim_step");
    require_t<ConfigError>(t >= 0 && t < ns.steps, "ddim_step: t out of range");
    require_t<ConfigError>(t_prev >= -1 && t_prev < t,
                           "ddim_step: t_prev " + std::to_string(t_prev) +
                               " must lie in [-1, t) with t = " + std::to_string(t));
    require_t<ConfigError>(eta >= 0.0, "ddim_step: eta must be >= 0");

    const double ab_t = ns.alpha_bar[size_t(t)];
    const double ab_p = ns.ab(t_prev);

    Tensor<T> z0_pred = scale(sub(z_t, scale(eps_hat, T(std::sqrt(1.0 - ab_t)))),
                              T(1.0 / std::sqrt(ab_t)));

    double sigma = 0.0;
    if (eta > 0.0 && t_prev >= 0)
        sigma = eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_p - sigma * sigma));

    Tensor<T> z_prev = add(scale(z0_pred, T(std::sqrt(ab_p))), scale(eps_hat, T(dir)));
    if (sigma > 0.0) {
        require_t<ConfigError>(noise != nullptr, "ddim_step: eta > 0 needs a noise tensor");
        detail::require_same_shape(z_t, *noise, "ddim_step noise");
        z_prev = add(z_prev, scale(*noise, T(sigma)));
    }
    return {std::move(z_prev), std::move(z0_pred)};
}

// Strictly decreasing inference timesteps, evenly spaced from total-1 down
// to 0 (a single step starts at total-1 and jumps straight to the clean
// endpoint).
inline std::vector<int64_t> make_timesteps(int64_t num_inference_steps, int64_t total_steps) {
    require_t<ConfigError>(num_inference_steps >= 1 && num_inference_steps <= total_steps,
                           "sampler: num_inference_steps must lie in [1, " +
                               std::to_string(total_steps) + "]");
    std::vector<int64_t> tau(static_cast<size_t>(num_inference_steps));
    if (num_inference_steps == 1) {
        tau[0] = total_steps - 1;
        return tau;
    }
    for (int64_t i = 0; i < num_inference_steps; ++i) {
        const double f = double(num_inference_steps - 1 - i) / double(num_inference_steps - 1);
        tau[size_t(i)] = std::llround(f * double(total_steps - 1));
    }
    return tau;
}

// eps_uncond + s * (eps_cond - eps_uncond). The s = 0 and s = 1 endpoints
// return the corresponding input exactly (no arithmetic applied).
template <class T>
Tensor<T> cfg_combine(const Tensor<T>& eps_uncond, const Tensor<T>& eps_cond, double s) {
    detail::require_same_shape(eps_uncond, eps_cond, "cfg_combine");
    require_t<ConfigError>(s >= 0.0, "cfg_combine: guidance scale must be >= 0");
    if (s == 0.0) return eps_uncond;
    if (s == 1.0) return eps_cond;
    return add(eps_uncond, scale(sub(eps_cond, eps_uncond), T(s)));
}

// Generic reverse-process driver: starts from z_init (pure noise at step
// total-1), calls eps_fn(z, t) at each inference timestep, finishes on the
// virtual clean endpoint, and clamps the result to [-1, 1]. Runs with
// gradient recording disabled. rng is only consulted when eta > 0.
template <class T, class EpsFn>
Tensor<T> ddim_sample(const NoiseSchedule& ns, EpsFn&& eps_fn, const Tensor<T>& z_init,
                      int64_t num_inference_steps, double eta = 0.0, Rng* rng = nullptr) {
    NoGradGuard<T> ng;
    const std::vector<int64_t> tau = make_timesteps(num_inference_steps, ns.steps);
    Tensor<T> z = z_init;
    for (size_t i = 0; i < tau.size(); ++i) {
        const int64_t t = tau[i];
        const int64_t t_prev = (i + 1 < tau.size()) ? tau[i + 1] : -1;
        Tensor<T> eps_hat = eps_fn(z, t);
        if (eta > 0.0 && t_prev >= 0) {
            require_t<ConfigError>(rng != nullptr, "ddim_sample: eta > 0 needs an rng");
            Tensor<T> nz = randn<T>(z.shape(), *rng);
            z = ddim_step(ns, z, eps_hat, t, t_prev, eta, &nz).z_prev;
        } else {
            z = ddim_step(ns, z, eps_hat, t, t_prev).z_prev;
        }
    }
    return clamp(z, T(-1), T(1));
}

}  // namespace repose
