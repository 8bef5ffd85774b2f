#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "anomaly_ddpm/diffusion.hpp"
#include "anomaly_ddpm/rng.hpp"

namespace anomaly_ddpm::sampler {

using diffusion::EpsilonModel;
using diffusion::NoiseSchedule;

enum class ReverseKind { ancestral, ddim };

struct ReverseConfig {
    ReverseKind kind = ReverseKind::ancestral;
    int t_start = 500;
    int num_steps = 500;  // t_start for ancestral, grid size for ddim
    double eta = 0.0;     // only the deterministic DDIM variant is supported
    uint64_t seed = 0;

    void validate(int T) const {
        if (t_start < 1 || t_start > T)
            throw ConfigError("reverse config: t_start outside [1,T]");
        if (num_steps < 1 || num_steps > t_start)
            throw ConfigError("reverse config: need 1 <= num_steps <= t_start");
        if (kind == ReverseKind::ancestral && num_steps != t_start)
            throw ConfigError("ancestral reverse visits every t; num_steps must equal t_start");
        if (eta != 0.0) throw ConfigError("only eta = 0 (deterministic DDIM) is supported");
    }
};

// Timesteps visited by the reverse chain, strictly decreasing, ending at 0.
// Ancestral: t_start, t_start-1, ..., 1, 0. DDIM: num_steps+1 evenly spaced
// grid points from t_start down to 0.
inline std::vector<int> reverse_time_grid(const ReverseConfig& cfg) {
    std::vector<int> ts;
    if (cfg.kind == ReverseKind::ancestral) {
        ts.reserve(static_cast<size_t>(cfg.t_start) + 1);
        for (int t = cfg.t_start; t >= 0; --t) ts.push_back(t);
        return ts;
    }
    ts.reserve(static_cast<size_t>(cfg.num_steps) + 1);
    for (int i = 0; i <= cfg.num_steps; ++i) {
        double pos = static_cast<double>(cfg.t_start) *
                     (static_cast<double>(cfg.num_steps - i) / cfg.num_steps);
        ts.push_back(static_cast<int>(std::lround(pos)));
    }
    for (size_t i = 1; i < ts.size(); ++i)
        if (ts[i] >= ts[i - 1]) throw ConfigError("ddim grid is not strictly decreasing");
    return ts;
}

// z_{t-1} = mu_theta(z_t, t) + sqrt(beta_tilde_t) * noise; deterministic at t=1.
inline Tensor ancestral_step_from_eps(const Tensor& zt, const Tensor& eps_theta, int t,
                                      const NoiseSchedule& s, const Tensor* noise) {
    s.check_t(t);
    Tensor mu = diffusion::predict_mu_from_eps(zt, eps_theta, t, s);
    if (t == 1) return mu;
    const double sigma = std::sqrt(s.posterior_var[static_cast<size_t>(t)]);
    if (noise) {
        if (!noise->same_shape(zt)) throw ShapeError("ancestral_step: noise shape mismatch");
        float* mp = mu.data();
        const float* np = noise->data();
        for (int64_t i = 0; i < mu.numel(); ++i)
            mp[i] = static_cast<float>(mp[i] + sigma * np[i]);
    }
    return mu;
}

inline Tensor ancestral_step(const Tensor& zt, int t, const EpsilonModel& model,
                             const NoiseSchedule& s, const Tensor* noise) {
    std::vector<int> ts(static_cast<size_t>(zt.dim(0)), t);
    Tensor eps = model.predict(zt, ts);
    return ancestral_step_from_eps(zt, eps, t, s, noise);
}

// Deterministic DDIM transition t -> t_prev:
//   z0_hat  = (z_t - sqrt(1-ab_t) eps) / sqrt(ab_t)
//   z_tprev = sqrt(ab_tprev) z0_hat + sqrt(1-ab_tprev) eps
inline Tensor ddim_step_from_eps(const Tensor& zt, const Tensor& eps_theta, int t, int t_prev,
                                 const NoiseSchedule& s) {
    s.check_t(t);
    if (t_prev >= t || t_prev < 0) throw DomainError("ddim_step requires 0 <= t_prev < t");
    if (!zt.same_shape(eps_theta)) throw ShapeError("ddim_step: eps shape mismatch");
    const double sab = s.sqrt_alpha_bar(t);
    const double somab = s.sqrt_one_minus_alpha_bar(t);
    const double sab_p = s.sqrt_alpha_bar(t_prev);
    const double somab_p = s.sqrt_one_minus_alpha_bar(t_prev);
    Tensor out(zt.shape());
    const float* zp = zt.data();
    const float* ep = eps_theta.data();
    float* op = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double z0_hat = (static_cast<double>(zp[i]) - somab * ep[i]) / sab;
        op[i] = static_cast<float>(sab_p * z0_hat + somab_p * ep[i]);
    }
    return out;
}

inline Tensor ddim_step(const Tensor& zt, int t, int t_prev, const EpsilonModel& model,
                        const NoiseSchedule& s) {
    std::vector<int> ts(static_cast<size_t>(zt.dim(0)), t);
    Tensor eps = model.predict(zt, ts);
    return ddim_step_from_eps(zt, eps, t, t_prev, s);
}

// Binary spatial mask over latent cells, broadcast across channels.
struct LatentMask {
    Tensor values;  // [h, w], entries in {0,1}

    void validate() const {
        if (values.ndim() != 2) throw ShapeError("latent mask must be 2-D");
        for (int64_t i = 0; i < values.numel(); ++i)
            if (values[i] != 0.0f && values[i] != 1.0f)
                throw ShapeError("latent mask entries must be 0 or 1");
    }

    bool any() const {
        for (int64_t i = 0; i < values.numel(); ++i)
            if (values[i] != 0.0f) return true;
        return false;
    }
};

namespace detail {

// out = m*a + (1-m)*b per latent cell, mask broadcast over channels
inline void compose_masked(Tensor& a, const Tensor& b, const Tensor& masks /*[N,h,w]*/) {
    const int N = a.dim(0), C = a.dim(1), hw = a.dim(2) * a.dim(3);
    for (int n = 0; n < N; ++n) {
        const float* m = masks.data() + static_cast<size_t>(n) * hw;
        for (int c = 0; c < C; ++c) {
            float* ap = a.data() + (static_cast<size_t>(n) * C + c) * hw;
            const float* bp = b.data() + (static_cast<size_t>(n) * C + c) * hw;
            for (int i = 0; i < hw; ++i)
                if (m[i] == 0.0f) ap[i] = bp[i];
        }
    }
}

inline Tensor batch_forward_sample(const Tensor& z0, int t, const NoiseSchedule& s, Rng& rng) {
    Tensor eps(z0.shape());
    rng.fill_normal(eps.data(), eps.numel());
    return diffusion::forward_sample(z0, t, eps, s);
}

}  // namespace detail

// Masked-inpainting reverse diffusion over a batch. Masked latent cells are
// resampled by the model; unmasked cells are re-imposed from the
// forward-diffused original before every reverse step (fresh noise each
// time) and restored bit-exactly from z0 at the end.
inline Tensor heal_inpaint_batch(const Tensor& z0, const Tensor& masks, const ReverseConfig& cfg,
                                 const EpsilonModel& model, const NoiseSchedule& s) {
    if (z0.ndim() != 4) throw ShapeError("heal_inpaint expects [N,C,h,w] latents");
    if (masks.ndim() != 3 || masks.dim(0) != z0.dim(0) || masks.dim(1) != z0.dim(2) ||
        masks.dim(2) != z0.dim(3))
        throw ShapeError("heal_inpaint: masks must be [N,h,w] matching the latents");
    cfg.validate(s.T);
    for (int64_t i = 0; i < masks.numel(); ++i)
        if (masks[i] != 0.0f && masks[i] != 1.0f)
            throw ShapeError("heal_inpaint: mask entries must be 0 or 1");

    Rng rng = Rng::keyed(cfg.seed, {0x6865616cULL, static_cast<uint64_t>(cfg.t_start)});
    const std::vector<int> grid = reverse_time_grid(cfg);

    // grid.front() == t_start, grid.back() == 0
    Tensor z = detail::batch_forward_sample(z0, cfg.t_start, s, rng);
    for (size_t i = 0; i + 1 < grid.size(); ++i) {
        const int t = grid[i];
        const int t_prev = grid[i + 1];
        if (i > 0) {
            Tensor zt_orig = detail::batch_forward_sample(z0, t, s, rng);
            detail::compose_masked(z, zt_orig, masks);
        }
        if (cfg.kind == ReverseKind::ancestral) {
            Tensor noise(z.shape());
            rng.fill_normal(noise.data(), noise.numel());
            z = ancestral_step(z, t, model, s, t > 1 ? &noise : nullptr);
        } else {
            z = ddim_step(z, t, t_prev, model, s);
        }
    }
    detail::compose_masked(z, z0, masks);
    return z;
}

// Single-latent wrapper; z0 is [C,h,w].
inline Tensor heal_inpaint(const Tensor& z0, const LatentMask& mask, const ReverseConfig& cfg,
                           const EpsilonModel& model, const NoiseSchedule& s) {
    mask.validate();
    Tensor zb = z0.reshaped({1, z0.dim(0), z0.dim(1), z0.dim(2)});
    Tensor mb = mask.values.reshaped({1, mask.values.dim(0), mask.values.dim(1)});
    Tensor healed = heal_inpaint_batch(zb, mb, cfg, model, s);
    return healed.reshaped({z0.dim(0), z0.dim(1), z0.dim(2)});
}

// Unconditional generation from pure noise at t = T.
inline Tensor generate(const std::vector<int>& latent_shape /*[C,h,w]*/, int n, ReverseKind kind,
                       int num_steps, const EpsilonModel& model, const NoiseSchedule& s,
                       uint64_t seed) {
    ReverseConfig cfg;
    cfg.kind = kind;
    cfg.t_start = s.T;
    cfg.num_steps = kind == ReverseKind::ancestral ? s.T : num_steps;
    cfg.seed = seed;
    cfg.validate(s.T);

    Rng rng = Rng::keyed(seed, {0x67656e65ULL});
    Tensor z({n, latent_shape[0], latent_shape[1], latent_shape[2]});
    rng.fill_normal(z.data(), z.numel());
    const std::vector<int> grid = reverse_time_grid(cfg);
    for (size_t i = 0; i + 1 < grid.size(); ++i) {
        const int t = grid[i];
        const int t_prev = grid[i + 1];
        if (cfg.kind == ReverseKind::ancestral) {
            Tensor noise(z.shape());
            rng.fill_normal(noise.data(), noise.numel());
            z = ancestral_step(z, t, model, s, t > 1 ? &noise : nullptr);
        } else {
            z = ddim_step(z, t, t_prev, model, s);
        }
    }
    return z;
}

}  // namespace anomaly_ddpm::sampler
