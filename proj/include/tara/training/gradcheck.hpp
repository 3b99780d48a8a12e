// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>

#include <json.hpp>

#include "tara/diffusion/denoiser.hpp"
#include "tara/numerics/fd_check.hpp"

namespace tara::train {

/// Finite-difference check of the training objective on a freshly initialized model
/// and a token-focused K/V adapter with nonzero B.
struct GradcheckConfig {
    diffusion::ModelConfig model;
    double lambda = 1.0;
    std::size_t rank = 8;
    std::uint64_t seed = 0;
    /// Central-difference step relative to max(1, |w|).
    double step = 1e-5;
    /// Also check the denoiser's own weight blocks (slow at the default size).
    bool base_blocks = false;

    void validate() const;
    nlohmann::json to_json() const;
    static GradcheckConfig from_json(const nlohmann::json& j);
};

num::FdReport gradient_check(const GradcheckConfig& config);

}  // namespace tara::train
