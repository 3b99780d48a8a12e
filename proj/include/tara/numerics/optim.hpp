// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "tara/numerics/matrix.hpp"

namespace tara::num {

enum class OptimizerKind { Sgd, Adam };

std::string_view to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(std::string_view s);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Sgd;
    double lr = 1e-5;
    /// Heavy-ball momentum for SGD; 0 is plain gradient descent.
    double momentum = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First-order optimizer over a fixed list of parameter matrices.
class Optimizer {
public:
    Optimizer(OptimizerConfig config, std::vector<Matrix*> params);

    /// Applies one update; `grads[i]` must match the shape of `params[i]`.
    void step(const std::vector<const Matrix*>& grads);
    std::size_t steps_taken() const noexcept { return t_; }
    void set_lr(double lr) noexcept { config_.lr = lr; }
    double lr() const noexcept { return config_.lr; }

private:
    OptimizerConfig config_;
    std::vector<Matrix*> params_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    std::size_t t_ = 0;
};

}  // namespace tara::num
