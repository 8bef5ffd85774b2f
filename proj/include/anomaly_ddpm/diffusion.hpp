#pragma once

#include <cmath>
#include <vector>

#include "anomaly_ddpm/errors.hpp"
#include "anomaly_ddpm/rng.hpp"
#include "anomaly_ddpm/schedule.hpp"
#include "anomaly_ddpm/serialize.hpp"
#include "anomaly_ddpm/tensor.hpp"

namespace anomaly_ddpm::diffusion {

// Noise-prediction contract. Implemented by the U-Net and by test oracles.
// Input and output are batched latents [N, n_z, h, w]; t holds one timestep
// per batch element. Implementations must be deterministic in eval mode.
struct EpsilonModel {
    virtual Tensor predict(const Tensor& zt, const std::vector<int>& t) const = 0;
    virtual ~EpsilonModel() = default;
};

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps
inline Tensor forward_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& s) {
    s.check_t(t);
    if (!z0.same_shape(eps)) throw ShapeError("forward_sample: z0 and eps shapes differ");
    const float a = static_cast<float>(s.sqrt_alpha_bar(t));
    const float b = static_cast<float>(s.sqrt_one_minus_alpha_bar(t));
    Tensor zt(z0.shape());
    const float* z0p = z0.data();
    const float* ep = eps.data();
    float* zp = zt.data();
    const int64_t n = z0.numel();
    for (int64_t i = 0; i < n; ++i) zp[i] = a * z0p[i] + b * ep[i];
    return zt;
}

struct PosteriorParams {
    Tensor mu;        // same shape as z
    double variance;  // beta_tilde_t, shared across elements
};

// Coefficients of the true posterior q(z_{t-1} | z_t, z0).
inline void posterior_coeffs(int t, const NoiseSchedule& s, double& coef_z0, double& coef_zt) {
    s.check_t(t);
    const double ab_prev = s.alpha_bar[static_cast<size_t>(t) - 1];
    const double ab = s.alpha_bar[static_cast<size_t>(t)];
    const double beta = s.beta[static_cast<size_t>(t)];
    const double alpha = s.alpha[static_cast<size_t>(t)];
    coef_z0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    coef_zt = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
}

inline PosteriorParams posterior_params(const Tensor& z0, const Tensor& zt, int t,
                                        const NoiseSchedule& s) {
    if (!z0.same_shape(zt)) throw ShapeError("posterior_params: z0 and zt shapes differ");
    double c0 = 0.0, ct = 0.0;
    posterior_coeffs(t, s, c0, ct);
    PosteriorParams out;
    out.mu = Tensor(z0.shape());
    out.variance = s.posterior_var[static_cast<size_t>(t)];
    const float* z0p = z0.data();
    const float* ztp = zt.data();
    float* mp = out.mu.data();
    const int64_t n = z0.numel();
    for (int64_t i = 0; i < n; ++i)
        mp[i] = static_cast<float>(c0 * z0p[i] + ct * ztp[i]);
    return out;
}

// mu_theta = (z_t - beta_t / sqrt(1 - alpha_bar_t) * eps_theta) / sqrt(alpha_t)
inline Tensor predict_mu_from_eps(const Tensor& zt, const Tensor& eps_theta, int t,
                                  const NoiseSchedule& s) {
    s.check_t(t);
    if (!zt.same_shape(eps_theta)) throw ShapeError("predict_mu: eps shape mismatch");
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[static_cast<size_t>(t)]);
    const double eps_coef = s.beta[static_cast<size_t>(t)] / s.sqrt_one_minus_alpha_bar(t);
    Tensor mu(zt.shape());
    const float* zp = zt.data();
    const float* ep = eps_theta.data();
    float* mp = mu.data();
    const int64_t n = zt.numel();
    for (int64_t i = 0; i < n; ++i)
        mp[i] = static_cast<float>(inv_sqrt_alpha * (zp[i] - eps_coef * ep[i]));
    return mu;
}

inline Tensor predict_mu(const Tensor& zt, int t, const EpsilonModel& model,
                         const NoiseSchedule& s) {
    Tensor eps = model.predict(zt, std::vector<int>{t});
    return predict_mu_from_eps(zt, eps, t, s);
}

// Element-wise KL(q(z_{t-1}|z_t,z0) || p_theta(z_{t-1}|z_t)) with both
// variances fixed to beta_tilde_t: KL = (mu_tilde - mu_theta)^2 / (2 beta_tilde).
// Requires t >= 2; beta_tilde_1 is zero and the KL degenerates.
inline Tensor kl_per_element_from_mus(const Tensor& mu_tilde, const Tensor& mu_theta, int t,
                                      const NoiseSchedule& s) {
    if (t < 2) throw DomainError("kl_per_element requires t >= 2");
    s.check_t(t);
    if (!mu_tilde.same_shape(mu_theta)) throw ShapeError("kl_per_element: mu shape mismatch");
    const double var = s.posterior_var[static_cast<size_t>(t)];
    if (!(var > 0.0)) throw DomainError("kl_per_element: posterior variance is zero at t=" + std::to_string(t));
    Tensor kl(mu_tilde.shape());
    const float* a = mu_tilde.data();
    const float* b = mu_theta.data();
    float* k = kl.data();
    const int64_t n = kl.numel();
    const double inv2v = 1.0 / (2.0 * var);
    for (int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        k[i] = static_cast<float>(d * d * inv2v);
    }
    return kl;
}

inline Tensor kl_per_element(const Tensor& z0, const Tensor& zt, int t, const EpsilonModel& model,
                             const NoiseSchedule& s) {
    PosteriorParams post = posterior_params(z0, zt, t, s);
    Tensor eps = model.predict(zt, std::vector<int>{t});
    Tensor mu_theta = predict_mu_from_eps(zt, eps, t, s);
    return kl_per_element_from_mus(post.mu, mu_theta, t, s);
}

// Per-channel affine map that makes training latents zero-mean/unit-std so
// they match the unit-variance noise assumption of the forward process.
struct LatentStandardizer {
    std::vector<double> mean;  // per channel
    std::vector<double> std;   // per channel, > 0

    // latents: [N, C, h, w]
    static LatentStandardizer fit(const Tensor& latents) {
        if (latents.ndim() != 4) throw ShapeError("standardizer expects 4-D latents");
        const int N = latents.dim(0), C = latents.dim(1);
        const int64_t hw = static_cast<int64_t>(latents.dim(2)) * latents.dim(3);
        LatentStandardizer st;
        st.mean.assign(static_cast<size_t>(C), 0.0);
        st.std.assign(static_cast<size_t>(C), 0.0);
        const int64_t per_c = static_cast<int64_t>(N) * hw;
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = latents.data() + (static_cast<size_t>(n) * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) s += p[i];
            }
            st.mean[static_cast<size_t>(c)] = s / static_cast<double>(per_c);
            double v = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = latents.data() + (static_cast<size_t>(n) * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    double d = p[i] - st.mean[static_cast<size_t>(c)];
                    v += d * d;
                }
            }
            st.std[static_cast<size_t>(c)] = std::sqrt(v / static_cast<double>(per_c));
            if (!(st.std[static_cast<size_t>(c)] > 0.0))
                throw DomainError("standardizer: channel " + std::to_string(c) +
                                  " has zero variance");
        }
        return st;
    }

    Tensor standardize(const Tensor& z) const { return apply(z, false); }
    Tensor destandardize(const Tensor& z) const { return apply(z, true); }

    nlohmann::json to_json() const { return {{"mean", mean}, {"std", std}}; }

    static LatentStandardizer from_json(const nlohmann::json& j) {
        LatentStandardizer st;
        st.mean = j.at("mean").get<std::vector<double>>();
        st.std = j.at("std").get<std::vector<double>>();
        for (double s : st.std)
            if (!(s > 0.0)) throw IoError("standardizer with non-positive std");
        return st;
    }

  private:
    Tensor apply(const Tensor& z, bool inverse) const {
        if (z.ndim() != 4 || z.dim(1) != static_cast<int>(mean.size()))
            throw ShapeError("standardizer channel mismatch");
        const int N = z.dim(0), C = z.dim(1);
        const int64_t hw = static_cast<int64_t>(z.dim(2)) * z.dim(3);
        Tensor out(z.shape());
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const float* src = z.data() + (static_cast<size_t>(n) * C + c) * hw;
                float* dst = out.data() + (static_cast<size_t>(n) * C + c) * hw;
                const double mu = mean[static_cast<size_t>(c)];
                const double sd = std[static_cast<size_t>(c)];
                if (inverse)
                    for (int64_t i = 0; i < hw; ++i) dst[i] = static_cast<float>(src[i] * sd + mu);
                else
                    for (int64_t i = 0; i < hw; ++i) dst[i] = static_cast<float>((src[i] - mu) / sd);
            }
        return out;
    }
};

}  // namespace anomaly_ddpm::diffusion
