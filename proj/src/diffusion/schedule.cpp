// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include "tara/diffusion/schedule.hpp"

#include <cmath>
#include <string>

#include "tara/error.hpp"

namespace tara::diffusion {

NoiseSchedule::NoiseSchedule(int steps, double beta_start, double beta_end) : steps_(steps) {
    if (steps < 1) {
        throw ConfigError("noise schedule needs at least one step");
    }
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || (steps > 1 && !(beta_start < beta_end))) {
        throw ConfigError("noise schedule requires 0 < beta_start < beta_end < 1");
    }
    betas_.assign(static_cast<std::size_t>(steps) + 1, 0.0);
    alpha_bar_.assign(static_cast<std::size_t>(steps) + 1, 1.0);
    for (int t = 1; t <= steps; ++t) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(steps - 1);
        betas_[t] = beta_start + frac * (beta_end - beta_start);
        alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - betas_[t]);
    }
}

void NoiseSchedule::check(int t) const {
    if (t < 0 || t > steps_) {
        throw ConfigError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps_) + "]");
    }
}

double NoiseSchedule::beta(int t) const {
    check(t);
    return betas_[t];
}

double NoiseSchedule::alpha_bar(int t) const {
    check(t);
    return alpha_bar_[t];
}

double NoiseSchedule::signal(int t) const { return std::sqrt(alpha_bar(t)); }

double NoiseSchedule::noise_level(int t) const { return std::sqrt(1.0 - alpha_bar(t)); }

num::Matrix noise(const NoiseSchedule& schedule, const num::Matrix& z0, int t, const num::Matrix& eps) {
    if (t < 1 || t > schedule.steps()) {
        throw ConfigError("noise: timestep " + std::to_string(t) + " outside [1, " + std::to_string(schedule.steps()) +
                          "]");
    }
    num::require_same_shape(z0, eps, "noise");
    const double a = schedule.signal(t);
    const double s = schedule.noise_level(t);
    num::Matrix out(z0.rows(), z0.cols());
    auto o = out.data();
    const auto x = z0.data();
    const auto e = eps.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = a * x[i] + s * e[i];
    }
    return out;
}

}  // namespace tara::diffusion
