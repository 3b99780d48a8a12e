// Copyright (C) 2026 The TARA authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace tara::num {

/// Dense row-major matrix of doubles.
///
/// A Matrix is a plain value: copies are deep and there is no shared storage, so
/// a const Matrix may be read from any number of threads.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix identity(std::size_t n);
    static Matrix scalar(double value) { return Matrix(1, 1, value); }
    static Matrix row_vector(std::span<const double> values);
    static Matrix column_vector(std::span<const double> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    bool is_scalar() const noexcept { return rows_ == 1 && cols_ == 1; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    std::vector<double> column(std::size_t c) const;

    /// Value of a 1x1 matrix.
    double item() const;

    std::string shape_string() const;

    /// Exact element-wise comparison of shapes and bit patterns.
    bool bitwise_equal(const Matrix& other) const noexcept;

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double s);

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix softmax_rows(const Matrix& m);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& m);
Matrix hadamard(const Matrix& a, const Matrix& b);

double sum(const Matrix& m);
double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& m) noexcept;

/// Throws NonFiniteError naming `what` if any entry is NaN or Inf.
void require_finite(const Matrix& m, const char* what);

/// Throws ShapeError unless `a` and `b` have identical shapes.
void require_same_shape(const Matrix& a, const Matrix& b, const char* what);

/// 64-bit FNV-1a digest of the shape and raw bytes.
std::uint64_t checksum(const Matrix& m, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace tara::num
