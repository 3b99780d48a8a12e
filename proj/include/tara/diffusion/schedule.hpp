// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "tara/numerics/matrix.hpp"

namespace tara::diffusion {

/// Linear-beta forward noising schedule. Index 0 is the clean sample (alpha_bar = 1).
class NoiseSchedule {
public:
    NoiseSchedule(int steps, double beta_start, double beta_end);

    int steps() const noexcept { return steps_; }
    double beta(int t) const;
    double alpha_bar(int t) const;
    /// sqrt(alpha_bar_t)
    double signal(int t) const;
    /// sqrt(1 - alpha_bar_t)
    double noise_level(int t) const;

private:
    void check(int t) const;

    int steps_;
    std::vector<double> betas_;
    std::vector<double> alpha_bar_;
};

/// z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps, for 1 <= t <= T.
num::Matrix noise(const NoiseSchedule& schedule, const num::Matrix& z0, int t, const num::Matrix& eps);

}  // namespace tara::diffusion
