// Copyright (C) 2026 uniprefill authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cstdint>
#include <vector>

namespace uniprefill {

/// Dense row-major float32 matrix. Hidden states are (num_tokens x hidden_dim)
/// with row i holding token i's state.
struct Matrix {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(int64_t r, int64_t c) : rows(r), cols(c), data(static_cast<size_t>(r * c), 0.0f) {}

    float* row(int64_t i) { return data.data() + i * cols; }
    const float* row(int64_t i) const { return data.data() + i * cols; }

    float& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols + c)]; }
    float at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols + c)]; }

    bool all_finite() const;
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

using HiddenStates = Matrix;

/// Dot product with double accumulation.
double dot_f32(const float* a, const float* b, int64_t n);

/// Max absolute elementwise difference; shapes must match.
double max_abs_diff(const Matrix& a, const Matrix& b);

/// Euclidean norm of a float row, accumulated in double.
double row_norm(const float* a, int64_t n);

} // namespace uniprefill
