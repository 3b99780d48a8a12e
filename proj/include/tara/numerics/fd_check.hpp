// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tara/numerics/matrix.hpp"
#include "tara/numerics/tape.hpp"

namespace tara::num {

/// Scalar function of a list of parameter blocks, recorded on `tape`.
using TapedScalarFn = std::function<Var(Tape& tape, const std::vector<Var>& params)>;

struct BlockCheck {
    std::string name;
    /// ||fd - analytic||_2 / max(||fd||_2, ||analytic||_2); 0 when both vanish.
    double relative_error = 0.0;
    double analytic_norm = 0.0;
    double numeric_norm = 0.0;
    bool aborted = false;
    std::string note;
};

struct FdReport {
    std::vector<BlockCheck> blocks;

    /// Largest relative error; +inf when any block was aborted.
    double max_relative_error() const;
    /// Block with the largest error (aborted blocks rank first). Null when empty.
    const BlockCheck* worst() const;
    bool passed(double tolerance) const { return max_relative_error() < tolerance; }
};

/// Compares the tape gradient of `f` against central differences.
///
/// Each entry w_i is perturbed by h_i = step * max(1, |w_i|). A non-finite function value
/// aborts the check for that block only. `names` labels the blocks (defaults to "p<k>").
FdReport fd_check(const TapedScalarFn& f, const std::vector<Matrix>& params, double step,
                  const std::vector<std::string>& names = {});

}  // namespace tara::num
