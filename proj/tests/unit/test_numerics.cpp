// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <functional>

#include "../oracles.hpp"
#include "tara/error.hpp"
#include "tara/numerics/fd_check.hpp"
#include "tara/numerics/optim.hpp"
#include "tara/numerics/rng.hpp"
#include "tara/numerics/tape.hpp"

using namespace tara;
using num::Matrix;
using num::Tape;
using num::Var;

TEST_CASE("matmul: identity, hand example and zero operand") {
    const Matrix b = Matrix::from_rows({{3, 4}, {5, 6}});
    CHECK(num::matmul(Matrix::identity(2), b).bitwise_equal(b));

    const Matrix l = Matrix::from_rows({{1, 0}, {2, 0}});
    const Matrix r = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
    const Matrix expected = Matrix::from_rows({{1, 2, 3}, {2, 4, 6}});
    CHECK(num::matmul(l, r).bitwise_equal(expected));
    CHECK(oracle::matmul(l, r).bitwise_equal(expected));

    const Matrix z = num::matmul(Matrix(4, 2), r);
    CHECK(z.rows() == 4);
    CHECK(z.cols() == 3);
    CHECK(num::max_abs(z) == 0.0);
}

TEST_CASE("matmul: mismatched shapes name both operands") {
    try {
        static_cast<void>(num::matmul(Matrix(2, 3), Matrix(2, 3)));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2x3") != std::string::npos);
        CHECK(msg.find("2x3", msg.find("2x3") + 1) != std::string::npos);
    }
}

TEST_CASE("matmul agrees with the dense oracle and is associative") {
    num::Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.below(6), k = 1 + rng.below(6), m = 1 + rng.below(6), p = 1 + rng.below(6);
        const Matrix a = rng.normal_matrix(n, k);
        const Matrix b = rng.normal_matrix(k, m);
        const Matrix c = rng.normal_matrix(m, p);
        CHECK(oracle::max_abs_diff(num::matmul(a, b), oracle::matmul(a, b)) < 1e-12);
        const Matrix left = num::matmul(num::matmul(a, b), c);
        const Matrix right = num::matmul(a, num::matmul(b, c));
        CHECK(oracle::max_abs_diff(left, right) <= 1e-9 * std::max(1.0, oracle::max_abs(left)));
    }
}

TEST_CASE("softmax_rows: uniform, large equal logits and [0, ln 3]") {
    const Matrix u = num::softmax_rows(Matrix(1, 4));
    for (double v : u.data()) {
        CHECK(v == 0.25);
    }
    const Matrix big = num::softmax_rows(Matrix::from_rows({{1000, 1000}}));
    CHECK(big(0, 0) == 0.5);
    CHECK(big(0, 1) == 0.5);

    const Matrix s = num::softmax_rows(Matrix::from_rows({{0.0, std::log(3.0)}}));
    // e^0 / (e^0 + e^ln3) = 1/4
    CHECK(s(0, 0) == doctest::Approx(1.0 / (1.0 + 3.0)).epsilon(1e-15));
    CHECK(s(0, 1) == doctest::Approx(3.0 / (1.0 + 3.0)).epsilon(1e-15));
}

TEST_CASE("softmax_rows: rows are distributions for random finite inputs") {
    num::Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const Matrix a = rng.normal_matrix(1 + rng.below(5), 1 + rng.below(9), 1.0 + 50.0 * rng.uniform());
        const Matrix s = num::softmax_rows(a);
        CHECK(oracle::max_abs_diff(s, oracle::softmax_rows(a)) < 1e-12);
        for (std::size_t i = 0; i < s.rows(); ++i) {
            double total = 0.0;
            for (double v : s.row(i)) {
                CHECK(v >= 0.0);
                total += v;
            }
            CHECK(std::abs(total - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("public operations reject non-finite results") {
    const Matrix huge = Matrix::from_rows({{1e308, 1e308}});
    CHECK_THROWS_AS(static_cast<void>(huge + huge), NonFiniteError);
    CHECK_THROWS_AS(static_cast<void>(10.0 * huge), NonFiniteError);
}

TEST_CASE("grad: sum(A x) with fixed x gives outer(1, x)") {
    num::Rng rng(3);
    const Matrix a0 = rng.normal_matrix(3, 4);
    const Matrix x = rng.normal_matrix(4, 1);
    Tape tape;
    const Var a = tape.leaf(a0);
    const Var loss = num::sum(num::matmul(a, tape.constant(x)));
    const Matrix g = tape.grad(loss)[a];
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(g(i, j) == doctest::Approx(x(j, 0)).epsilon(1e-14));
        }
    }
    // Independent central difference on one entry.
    auto f = [&](double da) {
        Matrix ap = a0;
        ap(1, 2) += da;
        return num::sum(oracle::matmul(ap, x));
    };
    const double h = 1e-6;
    CHECK(g(1, 2) == doctest::Approx((f(h) - f(-h)) / (2 * h)).epsilon(1e-8));
}

TEST_CASE("grad: unused leaf gets zeros, non-scalar loss is rejected") {
    Tape tape;
    const Var a = tape.leaf(Matrix::from_rows({{1, 2}}));
    const Var b = tape.leaf(Matrix::from_rows({{3, 4}}));
    const Var loss = num::sum(num::square(a));
    const num::Gradients g = tape.grad(loss);
    CHECK(num::max_abs(g[b]) == 0.0);
    CHECK(g[b].rows() == 1);
    CHECK(g[b].cols() == 2);
    CHECK_THROWS_AS(static_cast<void>(tape.grad(a)), ShapeError);
}

TEST_CASE("grad: L1 norm is sign(v) away from zero and 0 at zero") {
    Tape tape;
    const Var v = tape.leaf(Matrix::from_rows({{1.5, -2.0, 0.0, 3.0}}));
    const Matrix g = tape.grad(num::l1_norm(v))[v];
    CHECK(g.bitwise_equal(Matrix::from_rows({{1.0, -1.0, 0.0, 1.0}})));
}

TEST_CASE("fd_check: quadratic and constant functions") {
    const num::TapedScalarFn quad = [](Tape&, const std::vector<Var>& p) { return num::sum(num::square(p[0])); };
    const num::FdReport r = num::fd_check(quad, {Matrix::from_rows({{1, 2}})}, 1e-5);
    CHECK(r.max_relative_error() < 1e-8);
    CHECK(r.blocks[0].analytic_norm == doctest::Approx(std::sqrt(2.0 * 2.0 + 4.0 * 4.0)));

    const num::TapedScalarFn constant = [](Tape& tape, const std::vector<Var>&) {
        return tape.constant(Matrix::scalar(3.0));
    };
    const num::FdReport c = num::fd_check(constant, {Matrix::from_rows({{1, 2}})}, 1e-5);
    CHECK(c.blocks[0].relative_error == 0.0);
    CHECK(c.passed(1e-12));
}

TEST_CASE("fd_check: a non-finite value aborts only that block") {
    // (1e4 w)^2 and its gradient are finite at w = 1.34077e150; the value overflows at w + 1e-5 w.
    const num::TapedScalarFn f = [](Tape&, const std::vector<Var>& p) {
        return num::add(num::sum(num::square(p[0])), num::sum(num::square(num::scale(p[1], 1e4))));
    };
    const num::FdReport r =
        num::fd_check(f, {Matrix::from_rows({{1.0}}), Matrix::from_rows({{1.34077e150}})}, 1e-5, {"ok", "bad"});
    REQUIRE(r.blocks.size() == 2);
    CHECK_FALSE(r.blocks[0].aborted);
    CHECK(r.blocks[1].aborted);
    CHECK(r.worst()->name == "bad");
    CHECK_FALSE(r.passed(1e-4));
}

namespace {

/// Scalarizes a matrix-valued primitive with fixed random weights.
num::TapedScalarFn weighted(std::function<Var(Tape&, const std::vector<Var>&)> op, std::uint64_t seed) {
    return [op, seed](Tape& tape, const std::vector<Var>& p) {
        const Var y = op(tape, p);
        num::Rng rng(seed);
        const Var w = tape.constant(rng.normal_matrix(y.rows(), y.cols()));
        return num::sum(num::mul(w, y));
    };
}

}  // namespace

TEST_CASE("every differentiable primitive matches central differences") {
    num::Rng rng(21);
    const Matrix a = rng.normal_matrix(3, 4);
    const Matrix b = rng.normal_matrix(3, 4);
    const Matrix c = rng.normal_matrix(4, 2);
    const Matrix row = rng.normal_matrix(1, 4);
    Matrix away_from_zero = rng.normal_matrix(3, 4);
    for (double& v : away_from_zero.data()) {
        v += v >= 0 ? 0.5 : -0.5;
    }
    const std::vector<std::size_t> cols{2, 0};

    struct Case {
        const char* name;
        std::function<Var(Tape&, const std::vector<Var>&)> op;
        std::vector<Matrix> params;
    };
    const std::vector<Case> cases{
        {"matmul", [](Tape&, auto& p) { return num::matmul(p[0], p[1]); }, {a, c}},
        {"transpose", [](Tape&, auto& p) { return num::transpose(p[0]); }, {a}},
        {"add", [](Tape&, auto& p) { return num::add(p[0], p[1]); }, {a, b}},
        {"sub", [](Tape&, auto& p) { return num::sub(p[0], p[1]); }, {a, b}},
        {"mul", [](Tape&, auto& p) { return num::mul(p[0], p[1]); }, {a, b}},
        {"scale", [](Tape&, auto& p) { return num::scale(p[0], -1.7); }, {a}},
        {"add_row", [](Tape&, auto& p) { return num::add_row(p[0], p[1]); }, {a, row}},
        {"silu", [](Tape&, auto& p) { return num::silu(p[0]); }, {a}},
        {"square", [](Tape&, auto& p) { return num::square(p[0]); }, {a}},
        {"softmax_rows", [](Tape&, auto& p) { return num::softmax_rows(p[0]); }, {a}},
        {"sum", [](Tape&, auto& p) { return num::sum(p[0]); }, {a}},
        {"mean", [](Tape&, auto& p) { return num::mean(p[0]); }, {a}},
        {"l1_norm", [](Tape&, auto& p) { return num::l1_norm(p[0]); }, {away_from_zero}},
        {"gather_cols", [&](Tape&, auto& p) { return num::gather_cols(p[0], cols); }, {a}},
        {"add_to_cols", [&](Tape&, auto& p) { return num::add_to_cols(p[0], cols, p[1]); },
         {a, rng.normal_matrix(3, 2)}},
        {"slice_cols", [](Tape&, auto& p) { return num::slice_cols(p[0], 1, 2); }, {a}},
        {"hconcat", [](Tape&, auto& p) { return num::hconcat(std::vector<Var>{p[0], p[1]}); }, {a, b}},
    };
    std::uint64_t seed = 100;
    for (const Case& k : cases) {
        CAPTURE(k.name);
        const num::FdReport r = num::fd_check(weighted(k.op, seed++), k.params, 1e-5);
        CHECK(r.max_relative_error() < 1e-6);
    }
}

TEST_CASE("tape replay is deterministic bitwise") {
    num::Rng rng(8);
    const Matrix a0 = rng.normal_matrix(5, 5);
    const Matrix x0 = rng.normal_matrix(5, 3);
    auto run = [&] {
        Tape tape;
        const Var a = tape.leaf(a0);
        const Var y = num::softmax_rows(num::matmul(a, num::matmul(a, tape.constant(x0))));
        return tape.grad(num::sum(num::square(num::silu(y))))[a];
    };
    CHECK(run().bitwise_equal(run()));
}

TEST_CASE("gradient accumulation is additive across multiple uses") {
    Tape tape;
    const Var a = tape.leaf(Matrix::from_rows({{2.0, -1.0}}));
    const Var loss = num::sum(num::add(num::add(a, a), num::scale(a, 3.0)));
    CHECK(tape.grad(loss)[a].bitwise_equal(Matrix::from_rows({{5.0, 5.0}})));
}

TEST_CASE("optimizers: SGD, momentum and Adam updates") {
    Matrix w = Matrix::from_rows({{1.0, -2.0}});
    const Matrix g = Matrix::from_rows({{0.5, -0.25}});
    num::OptimizerConfig sgd;
    sgd.lr = 0.1;
    num::Optimizer plain(sgd, {&w});
    plain.step({&g});
    CHECK(w(0, 0) == doctest::Approx(1.0 - 0.05));
    CHECK(w(0, 1) == doctest::Approx(-2.0 + 0.025));

    Matrix wm = Matrix::from_rows({{0.0}});
    const Matrix gm = Matrix::from_rows({{1.0}});
    sgd.momentum = 0.9;
    num::Optimizer heavy(sgd, {&wm});
    heavy.step({&gm});
    heavy.step({&gm});
    // v1 = 1, v2 = 0.9 + 1 = 1.9; w = -0.1 * (1 + 1.9)
    CHECK(wm(0, 0) == doctest::Approx(-0.29));

    Matrix wa = Matrix::from_rows({{0.0, 0.0}});
    const Matrix ga = Matrix::from_rows({{3.0, -0.01}});
    num::OptimizerConfig adam;
    adam.kind = num::OptimizerKind::Adam;
    adam.lr = 0.01;
    num::Optimizer opt(adam, {&wa});
    opt.step({&ga});
    // Bias-corrected first step is lr * g / (|g| + eps').
    CHECK(wa(0, 0) == doctest::Approx(-0.01).epsilon(1e-6));
    CHECK(wa(0, 1) == doctest::Approx(0.01).epsilon(1e-4));

    Matrix zero_lr = Matrix::from_rows({{1.0}});
    sgd.lr = 0.0;
    sgd.momentum = 0.0;
    num::Optimizer frozen(sgd, {&zero_lr});
    frozen.step({&gm});
    CHECK(zero_lr(0, 0) == 1.0);
}
