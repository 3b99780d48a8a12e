// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include "tara/numerics/fd_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tara/error.hpp"

namespace tara::num {

namespace {

double evaluate(const TapedScalarFn& f, const std::vector<Matrix>& params) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Matrix& p : params) {
        vars.push_back(tape.constant(p));
    }
    return f(tape, vars).value().item();
}

}  // namespace

double FdReport::max_relative_error() const {
    double worst_error = 0.0;
    for (const BlockCheck& b : blocks) {
        if (b.aborted) {
            return std::numeric_limits<double>::infinity();
        }
        worst_error = std::max(worst_error, b.relative_error);
    }
    return worst_error;
}

const BlockCheck* FdReport::worst() const {
    const BlockCheck* best = nullptr;
    for (const BlockCheck& b : blocks) {
        if (best == nullptr || (b.aborted && !best->aborted) ||
            (b.aborted == best->aborted && b.relative_error > best->relative_error)) {
            best = &b;
        }
    }
    return best;
}

FdReport fd_check(const TapedScalarFn& f, const std::vector<Matrix>& params, double step,
                  const std::vector<std::string>& names) {
    if (!(step > 0.0)) {
        throw ConfigError("fd_check: step must be positive");
    }
    if (!names.empty() && names.size() != params.size()) {
        throw ConfigError("fd_check: names must match parameter count");
    }

    std::vector<Matrix> analytic;
    {
        Tape tape;
        std::vector<Var> vars;
        for (const Matrix& p : params) {
            vars.push_back(tape.leaf(p));
        }
        const Var loss = f(tape, vars);
        const Gradients grads = tape.grad(loss);
        for (const Var& v : vars) {
            analytic.push_back(grads[v]);
        }
    }

    FdReport report;
    std::vector<Matrix> work = params;
    for (std::size_t b = 0; b < params.size(); ++b) {
        BlockCheck check;
        check.name = names.empty() ? "p" + std::to_string(b) : names[b];
        Matrix numeric(params[b].rows(), params[b].cols());
        for (std::size_t i = 0; i < params[b].size() && !check.aborted; ++i) {
            const double w = params[b].data()[i];
            const double h = step * std::max(1.0, std::abs(w));
            double plus = 0.0;
            double minus = 0.0;
            try {
                work[b].data()[i] = w + h;
                plus = evaluate(f, work);
                work[b].data()[i] = w - h;
                minus = evaluate(f, work);
            } catch (const NonFiniteError& e) {
                plus = std::numeric_limits<double>::quiet_NaN();
                check.note = e.what();
            }
            work[b].data()[i] = w;
            if (!std::isfinite(plus) || !std::isfinite(minus)) {
                check.aborted = true;
                if (check.note.empty()) {
                    check.note = "non-finite function value at entry " + std::to_string(i);
                }
                break;
            }
            numeric.data()[i] = (plus - minus) / (2.0 * h);
        }
        if (!check.aborted) {
            check.analytic_norm = frobenius_norm(analytic[b]);
            check.numeric_norm = frobenius_norm(numeric);
            const double denom = std::max(check.analytic_norm, check.numeric_norm);
            check.relative_error = denom == 0.0 ? 0.0 : frobenius_norm(numeric - analytic[b]) / denom;
        }
        report.blocks.push_back(std::move(check));
    }
    return report;
}

}  // namespace tara::num
