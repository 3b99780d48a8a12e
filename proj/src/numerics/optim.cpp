// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include "tara/numerics/optim.hpp"

#include <cmath>
#include <string>

#include "tara/error.hpp"

namespace tara::num {

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from_string(std::string_view s) {
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "adam") return OptimizerKind::Adam;
    throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<Matrix*> params)
    : config_(config), params_(std::move(params)) {
    if (!(config_.lr >= 0.0) || !std::isfinite(config_.lr)) {
        throw ConfigError("learning rate must be finite and non-negative");
    }
    if (config_.momentum < 0.0 || config_.momentum >= 1.0) {
        throw ConfigError("momentum must lie in [0, 1)");
    }
    for (Matrix* p : params_) {
        m_.emplace_back(p->rows(), p->cols());
        if (config_.kind == OptimizerKind::Adam) {
            v_.emplace_back(p->rows(), p->cols());
        }
    }
}

void Optimizer::step(const std::vector<const Matrix*>& grads) {
    if (grads.size() != params_.size()) {
        throw ShapeError("Optimizer::step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params_.size()) + " parameters");
    }
    ++t_;
    const double lr = config_.lr;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        require_same_shape(*params_[i], *grads[i], "Optimizer::step");
        auto p = params_[i]->data();
        const auto g = grads[i]->data();
        auto m = m_[i].data();
        if (config_.kind == OptimizerKind::Sgd) {
            if (config_.momentum == 0.0) {
                for (std::size_t k = 0; k < p.size(); ++k) {
                    p[k] -= lr * g[k];
                }
            } else {
                for (std::size_t k = 0; k < p.size(); ++k) {
                    m[k] = config_.momentum * m[k] + g[k];
                    p[k] -= lr * m[k];
                }
            }
            continue;
        }
        auto v = v_[i].data();
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
            v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
            p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
        }
    }
}

}  // namespace tara::num
