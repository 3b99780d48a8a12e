// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#include "tara/numerics/tape.hpp"

#include <atomic>
#include <cmath>
#include <string>

#include "tara/error.hpp"

namespace tara::num {

namespace {

std::atomic<bool> g_adjoint_fault{false};

Tape& same_tape(const Var& a, const Var& b, const char* op) {
    if (!a.valid() || !b.valid()) {
        throw Error(std::string(op) + ": invalid Var");
    }
    if (a.tape() != b.tape()) {
        throw Error(std::string(op) + ": operands recorded on different tapes");
    }
    return *a.tape();
}

Tape& tape_of(const Var& a, const char* op) {
    if (!a.valid()) {
        throw Error(std::string(op) + ": invalid Var");
    }
    return *a.tape();
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

namespace testing {
void set_adjoint_fault(bool enabled) { g_adjoint_fault.store(enabled); }
bool adjoint_fault() { return g_adjoint_fault.load(); }
}  // namespace testing

const Matrix& Var::value() const {
    if (tape_ == nullptr) {
        throw Error("Var::value: invalid Var");
    }
    return tape_->value(id_);
}

const Matrix& Gradients::operator[](const Var& leaf) const { return at(leaf.id()); }

const Matrix& Gradients::at(std::size_t leaf_id) const {
    auto it = grads_.find(leaf_id);
    if (it == grads_.end()) {
        throw Error("Gradients: node " + std::to_string(leaf_id) + " is not a leaf");
    }
    return it->second;
}

void Tape::Sink::add(const Var& parent, Matrix contribution) {
    if (!tape_.needs_grad(parent.id())) {
        return;
    }
    Matrix& slot = adjoints_[parent.id()];
    if (slot.empty()) {
        slot = std::move(contribution);
    } else {
        slot += contribution;
    }
}

bool Tape::Sink::wants(const Var& parent) const { return tape_.needs_grad(parent.id()); }

Var Tape::leaf(Matrix value) {
    require_finite(value, "Tape::leaf");
    nodes_.push_back(Node{std::move(value), true, {}});
    leaves_.push_back(nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
    require_finite(value, "Tape::constant");
    nodes_.push_back(Node{std::move(value), false, {}});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> parents, Backward backward) {
    bool needs = false;
    for (const Var& p : parents) {
        needs = needs || nodes_[p.id()].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), needs, needs ? std::move(backward) : Backward{}});
    return Var(this, nodes_.size() - 1);
}

Gradients Tape::grad(const Var& loss) const {
    if (loss.tape() != this) {
        throw Error("Tape::grad: loss recorded on a different tape");
    }
    const Matrix& lv = nodes_[loss.id()].value;
    if (!lv.is_scalar()) {
        throw ShapeError("Tape::grad: loss must be 1x1, got " + lv.shape_string());
    }
    std::vector<Matrix> adjoints(nodes_.size());
    adjoints[loss.id()] = Matrix::scalar(1.0);
    Sink sink(*this, adjoints);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        const Node& node = nodes_[i];
        if (!node.needs_grad || !node.backward || adjoints[i].empty()) {
            continue;
        }
        node.backward(adjoints[i], sink);
    }
    Gradients out;
    for (std::size_t id : leaves_) {
        if (adjoints[id].empty()) {
            out.grads_.emplace(id, Matrix(nodes_[id].value.rows(), nodes_[id].value.cols()));
        } else {
            out.grads_.emplace(id, std::move(adjoints[id]));
        }
    }
    return out;
}

Var matmul(const Var& a, const Var& b) {
    Tape& t = same_tape(a, b, "matmul");
    return t.record(matmul(a.value(), b.value()), {a, b}, [a, b](const Matrix& g, Tape::Sink& s) {
        if (s.wants(a)) {
            s.add(a, matmul(g, transpose(b.value())));
        }
        if (s.wants(b)) {
            s.add(b, matmul(transpose(a.value()), g));
        }
    });
}

Var transpose(const Var& a) {
    Tape& t = tape_of(a, "transpose");
    return t.record(transpose(a.value()), {a}, [a](const Matrix& g, Tape::Sink& s) { s.add(a, transpose(g)); });
}

Var add(const Var& a, const Var& b) {
    Tape& t = same_tape(a, b, "add");
    return t.record(a.value() + b.value(), {a, b}, [a, b](const Matrix& g, Tape::Sink& s) {
        s.add(a, g);
        s.add(b, g);
    });
}

Var sub(const Var& a, const Var& b) {
    Tape& t = same_tape(a, b, "sub");
    return t.record(a.value() - b.value(), {a, b}, [a, b](const Matrix& g, Tape::Sink& s) {
        s.add(a, g);
        s.add(b, -1.0 * g);
    });
}

Var mul(const Var& a, const Var& b) {
    Tape& t = same_tape(a, b, "mul");
    Matrix out = hadamard(a.value(), b.value());
    require_finite(out, "mul");
    return t.record(std::move(out), {a, b}, [a, b](const Matrix& g, Tape::Sink& s) {
        if (s.wants(a)) {
            s.add(a, hadamard(g, b.value()));
        }
        if (s.wants(b)) {
            s.add(b, hadamard(g, a.value()));
        }
    });
}

Var scale(const Var& a, double k) {
    Tape& t = tape_of(a, "scale");
    Matrix out = k * a.value();
    require_finite(out, "scale");
    return t.record(std::move(out), {a}, [a, k](const Matrix& g, Tape::Sink& s) { s.add(a, k * g); });
}

Var add_row(const Var& a, const Var& row) {
    Tape& t = same_tape(a, row, "add_row");
    const Matrix& av = a.value();
    const Matrix& rv = row.value();
    if (rv.rows() != 1 || rv.cols() != av.cols()) {
        throw ShapeError("add_row: cannot broadcast " + rv.shape_string() + " over " + av.shape_string());
    }
    Matrix out = av;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto dst = out.row(r);
        for (std::size_t c = 0; c < dst.size(); ++c) {
            dst[c] += rv(0, c);
        }
    }
    return t.record(std::move(out), {a, row}, [a, row](const Matrix& g, Tape::Sink& s) {
        s.add(a, g);
        if (s.wants(row)) {
            Matrix acc(1, g.cols());
            for (std::size_t r = 0; r < g.rows(); ++r) {
                for (std::size_t c = 0; c < g.cols(); ++c) {
                    acc(0, c) += g(r, c);
                }
            }
            s.add(row, std::move(acc));
        }
    });
}

Var silu(const Var& a) {
    Tape& t = tape_of(a, "silu");
    Matrix out = a.value();
    for (double& v : out.data()) {
        v = v * sigmoid(v);
    }
    return t.record(std::move(out), {a}, [a](const Matrix& g, Tape::Sink& s) {
        Matrix d = g;
        const auto x = a.value().data();
        auto dd = d.data();
        for (std::size_t i = 0; i < dd.size(); ++i) {
            const double sg = sigmoid(x[i]);
            dd[i] *= sg * (1.0 + x[i] * (1.0 - sg));
        }
        s.add(a, std::move(d));
    });
}

Var square(const Var& a) {
    Tape& t = tape_of(a, "square");
    Matrix out = hadamard(a.value(), a.value());
    require_finite(out, "square");
    return t.record(std::move(out), {a}, [a](const Matrix& g, Tape::Sink& s) { s.add(a, 2.0 * hadamard(g, a.value())); });
}

Var softmax_rows(const Var& a) {
    Tape& t = tape_of(a, "softmax_rows");
    Matrix out = softmax_rows(a.value());
    Matrix y = out;
    return t.record(std::move(out), {a}, [a, y = std::move(y)](const Matrix& g, Tape::Sink& s) {
        Matrix d(y.rows(), y.cols());
        for (std::size_t r = 0; r < y.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < y.cols(); ++c) {
                dot += g(r, c) * y(r, c);
            }
            for (std::size_t c = 0; c < y.cols(); ++c) {
                d(r, c) = y(r, c) * (g(r, c) - dot);
            }
        }
        if (testing::adjoint_fault()) {
            d *= 1.5;
        }
        s.add(a, std::move(d));
    });
}

Var sum(const Var& a) {
    Tape& t = tape_of(a, "sum");
    return t.record(Matrix::scalar(sum(a.value())), {a}, [a](const Matrix& g, Tape::Sink& s) {
        s.add(a, Matrix(a.rows(), a.cols(), g.item()));
    });
}

Var mean(const Var& a) {
    Tape& t = tape_of(a, "mean");
    const double n = static_cast<double>(a.value().size());
    if (n == 0.0) {
        throw ShapeError("mean: empty matrix");
    }
    return t.record(Matrix::scalar(sum(a.value()) / n), {a}, [a, n](const Matrix& g, Tape::Sink& s) {
        s.add(a, Matrix(a.rows(), a.cols(), g.item() / n));
    });
}

Var l1_norm(const Var& a) {
    Tape& t = tape_of(a, "l1_norm");
    double total = 0.0;
    for (double v : a.value().data()) {
        total += std::abs(v);
    }
    return t.record(Matrix::scalar(total), {a}, [a](const Matrix& g, Tape::Sink& s) {
        Matrix d(a.rows(), a.cols());
        const auto x = a.value().data();
        auto dd = d.data();
        const double gv = g.item();
        for (std::size_t i = 0; i < dd.size(); ++i) {
            dd[i] = x[i] > 0.0 ? gv : (x[i] < 0.0 ? -gv : 0.0);
        }
        s.add(a, std::move(d));
    });
}

Var gather_cols(const Var& a, std::span<const std::size_t> cols) {
    Tape& t = tape_of(a, "gather_cols");
    const Matrix& av = a.value();
    Matrix out(av.rows(), cols.size());
    for (std::size_t k = 0; k < cols.size(); ++k) {
        if (cols[k] >= av.cols()) {
            throw ShapeError("gather_cols: column " + std::to_string(cols[k]) + " out of range for " + av.shape_string());
        }
        for (std::size_t r = 0; r < av.rows(); ++r) {
            out(r, k) = av(r, cols[k]);
        }
    }
    std::vector<std::size_t> idx(cols.begin(), cols.end());
    return t.record(std::move(out), {a}, [a, idx](const Matrix& g, Tape::Sink& s) {
        Matrix d(a.rows(), a.cols());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            for (std::size_t r = 0; r < d.rows(); ++r) {
                d(r, idx[k]) += g(r, k);
            }
        }
        s.add(a, std::move(d));
    });
}

Var add_to_cols(const Var& base, std::span<const std::size_t> cols, const Var& values) {
    Tape& t = same_tape(base, values, "add_to_cols");
    const Matrix& bv = base.value();
    const Matrix& vv = values.value();
    if (vv.rows() != bv.rows() || vv.cols() != cols.size()) {
        throw ShapeError("add_to_cols: values " + vv.shape_string() + " do not fit " + std::to_string(cols.size()) +
                         " columns of " + bv.shape_string());
    }
    Matrix out = bv;
    for (std::size_t k = 0; k < cols.size(); ++k) {
        if (cols[k] >= bv.cols()) {
            throw ShapeError("add_to_cols: column " + std::to_string(cols[k]) + " out of range for " + bv.shape_string());
        }
        for (std::size_t r = 0; r < bv.rows(); ++r) {
            out(r, cols[k]) += vv(r, k);
        }
    }
    require_finite(out, "add_to_cols");
    std::vector<std::size_t> idx(cols.begin(), cols.end());
    return t.record(std::move(out), {base, values}, [base, values, idx](const Matrix& g, Tape::Sink& s) {
        s.add(base, g);
        if (s.wants(values)) {
            Matrix d(g.rows(), idx.size());
            for (std::size_t k = 0; k < idx.size(); ++k) {
                for (std::size_t r = 0; r < g.rows(); ++r) {
                    d(r, k) = g(r, idx[k]);
                }
            }
            s.add(values, std::move(d));
        }
    });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
    Tape& t = tape_of(a, "slice_cols");
    const Matrix& av = a.value();
    if (begin + count > av.cols()) {
        throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + av.shape_string());
    }
    Matrix out(av.rows(), count);
    for (std::size_t r = 0; r < av.rows(); ++r) {
        for (std::size_t c = 0; c < count; ++c) {
            out(r, c) = av(r, begin + c);
        }
    }
    return t.record(std::move(out), {a}, [a, begin, count](const Matrix& g, Tape::Sink& s) {
        Matrix d(a.rows(), a.cols());
        for (std::size_t r = 0; r < d.rows(); ++r) {
            for (std::size_t c = 0; c < count; ++c) {
                d(r, begin + c) = g(r, c);
            }
        }
        s.add(a, std::move(d));
    });
}

Var hconcat(std::span<const Var> parts) {
    if (parts.empty()) {
        throw ShapeError("hconcat: no operands");
    }
    Tape& t = tape_of(parts.front(), "hconcat");
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    for (const Var& p : parts) {
        if (p.tape() != &t) {
            throw Error("hconcat: operands recorded on different tapes");
        }
        if (p.rows() != rows) {
            throw ShapeError("hconcat: row mismatch " + parts.front().value().shape_string() + " vs " +
                             p.value().shape_string());
        }
        cols += p.cols();
    }
    Matrix out(rows, cols);
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const Matrix& pv = p.value();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < pv.cols(); ++c) {
                out(r, offset + c) = pv(r, c);
            }
        }
        offset += pv.cols();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return t.record(std::move(out), parts, [ps](const Matrix& g, Tape::Sink& s) {
        std::size_t off = 0;
        for (const Var& p : ps) {
            const std::size_t c = p.cols();
            if (s.wants(p)) {
                Matrix d(g.rows(), c);
                for (std::size_t r = 0; r < g.rows(); ++r) {
                    for (std::size_t k = 0; k < c; ++k) {
                        d(r, k) = g(r, off + k);
                    }
                }
                s.add(p, std::move(d));
            }
            off += c;
        }
    });
}

}  // namespace tara::num
