// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace m2r2 {

// Dense row-major matrix of doubles used for preprocessed data.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}
    Matrix(int r, int c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {}

    double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    std::span<const double> row(int r) const {
        return std::span<const double>(data).subspan(static_cast<std::size_t>(r) * cols, cols);
    }

    bool operator==(const Matrix&) const = default;
};

}  // namespace m2r2
