// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <vector>

#include "tara/numerics/matrix.hpp"

namespace tara::num {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Matrix& value() const;
    std::size_t id() const noexcept { return id_; }
    Tape* tape() const noexcept { return tape_; }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Adjoints of every leaf, keyed by leaf id.
class Gradients {
public:
    /// Gradient for `leaf`; throws if `leaf` is not a leaf of the differentiated tape.
    const Matrix& operator[](const Var& leaf) const;
    const Matrix& at(std::size_t leaf_id) const;
    const std::map<std::size_t, Matrix>& by_leaf() const noexcept { return grads_; }

private:
    friend class Tape;
    std::map<std::size_t, Matrix> grads_;
};

/// Linear record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended as operations execute, so node order is already a topological
/// order; `grad` walks it backwards once. Adjoints of a value used several times are
/// summed. A tape is single-threaded and meant to be rebuilt for every step.
class Tape {
public:
    /// Accumulates parent adjoints during the backward sweep.
    class Sink {
    public:
        void add(const Var& parent, Matrix contribution);
        bool wants(const Var& parent) const;

    private:
        friend class Tape;
        Sink(const Tape& tape, std::vector<Matrix>& adjoints) : tape_(tape), adjoints_(adjoints) {}
        const Tape& tape_;
        std::vector<Matrix>& adjoints_;
    };

    using Backward = std::function<void(const Matrix& adjoint, Sink& sink)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Parameter requiring a gradient.
    Var leaf(Matrix value);
    /// Value that never receives a gradient.
    Var constant(Matrix value);

    /// Reverse sweep from a scalar `loss`; returns the adjoint of every leaf
    /// (zero matrices for leaves the loss does not depend on).
    Gradients grad(const Var& loss) const;

    /// Records the result of a primitive. `backward` is dropped when no parent needs a gradient.
    Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);
    Var record(Matrix value, std::span<const Var> parents, Backward backward);

    const Matrix& value(std::size_t id) const { return nodes_[id].value; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    std::size_t node_count() const noexcept { return nodes_.size(); }
    const std::vector<std::size_t>& leaf_ids() const noexcept { return leaves_; }

private:
    struct Node {
        Matrix value;
        bool needs_grad = false;
        Backward backward;
    };

    std::vector<Node> nodes_;
    std::vector<std::size_t> leaves_;
};

// Differentiable primitives. Every operand must live on the same tape.

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// Adds the 1xC row vector `row` to every row of the RxC matrix `a`.
Var add_row(const Var& a, const Var& row);
Var silu(const Var& a);
Var square(const Var& a);
Var softmax_rows(const Var& a);
/// Scalar sum of all entries.
Var sum(const Var& a);
/// Scalar mean of all entries.
Var mean(const Var& a);
/// Scalar sum of absolute values. The subgradient at an exact zero is taken as 0.
Var l1_norm(const Var& a);
/// Columns of `a` at `cols`, in that order.
Var gather_cols(const Var& a, std::span<const std::size_t> cols);
/// Copy of `base` with `values` column k added to column cols[k]. Other columns are untouched.
Var add_to_cols(const Var& base, std::span<const std::size_t> cols, const Var& values);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
Var hconcat(std::span<const Var> parts);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }

namespace testing {
/// Negative-control hook: when enabled, the softmax adjoint is scaled by 1.5 so that
/// gradient checks must fail. Off by default.
void set_adjoint_fault(bool enabled);
bool adjoint_fault();
}  // namespace testing

}  // namespace tara::num
