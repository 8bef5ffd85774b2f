#pragma once

#include <cmath>
#include <vector>

#include "anomaly_ddpm/errors.hpp"
#include "anomaly_ddpm/serialize.hpp"

namespace anomaly_ddpm::diffusion {

// Precomputed variance schedule. Arrays are indexed by timestep t in [0, T];
// slot 0 holds the conventions beta_0 = 0 and alpha_bar_0 = 1 so the t = 1
// posterior collapses to a point mass.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;           // beta_t
    std::vector<double> alpha;          // 1 - beta_t
    std::vector<double> alpha_bar;      // prod_{s<=t} alpha_s
    std::vector<double> posterior_var;  // beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)

    double sqrt_alpha_bar(int t) const { return std::sqrt(alpha_bar[static_cast<size_t>(t)]); }
    double sqrt_one_minus_alpha_bar(int t) const {
        return std::sqrt(1.0 - alpha_bar[static_cast<size_t>(t)]);
    }

    void check_t(int t, int lo = 1) const {
        if (t < lo || t > T)
            throw DomainError("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) +
                              "," + std::to_string(T) + "]");
    }
};

// Linear beta interpolation between beta_start and beta_end over T steps.
inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 2) throw ConfigError("schedule needs T >= 2");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("schedule requires 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.T = T;
    s.beta.assign(static_cast<size_t>(T) + 1, 0.0);
    s.alpha.assign(static_cast<size_t>(T) + 1, 1.0);
    s.alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0);
    s.posterior_var.assign(static_cast<size_t>(T) + 1, 0.0);
    for (int t = 1; t <= T; ++t) {
        double frac = static_cast<double>(t - 1) / static_cast<double>(T - 1);
        s.beta[static_cast<size_t>(t)] = beta_start + (beta_end - beta_start) * frac;
        s.alpha[static_cast<size_t>(t)] = 1.0 - s.beta[static_cast<size_t>(t)];
        s.alpha_bar[static_cast<size_t>(t)] =
            s.alpha_bar[static_cast<size_t>(t) - 1] * s.alpha[static_cast<size_t>(t)];
        s.posterior_var[static_cast<size_t>(t)] =
            s.beta[static_cast<size_t>(t)] * (1.0 - s.alpha_bar[static_cast<size_t>(t) - 1]) /
            (1.0 - s.alpha_bar[static_cast<size_t>(t)]);
    }
    return s;
}

inline nlohmann::json schedule_to_json(const NoiseSchedule& s) {
    return {{"T", s.T},
            {"beta_start", s.beta[1]},
            {"beta_end", s.beta[static_cast<size_t>(s.T)]},
            {"kind", "linear"}};
}

// Schedules are persisted inside checkpoints so inference never recomputes
// them from possibly changed defaults.
inline NoiseSchedule schedule_from_json(const nlohmann::json& j) {
    if (j.value("kind", "linear") != std::string("linear"))
        throw IoError("unsupported schedule kind in checkpoint");
    return make_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(),
                         j.at("beta_end").get<double>());
}

}  // namespace anomaly_ddpm::diffusion
