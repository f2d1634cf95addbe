// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "m2r2/autograd.hpp"
#include "m2r2/nn.hpp"

namespace m2r2::testing {

struct GradCheckResult {
    double worst_relative = 0.0;
    std::string worst_where;
    int checked = 0;
};

// Central differences (step h) against reverse-mode gradients for every
// element of every input. The error for one element is
// |analytic - numeric| / max(|analytic|, |numeric|, floor), so elements whose
// true gradient is essentially zero are compared absolutely against `floor`.
inline GradCheckResult gradcheck(const std::function<ag::Tensor()>& loss_fn, std::vector<ag::Tensor> inputs,
                                 double h = 1e-5, double floor = 1e-6) {
    for (auto& t : inputs) t.zero_grad();
    ag::Tensor loss = loss_fn();
    ag::backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

    GradCheckResult result;
    ag::NoGradGuard no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto data = inputs[k].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + h;
            const double up = loss_fn().item();
            data[i] = orig - h;
            const double down = loss_fn().item();
            data[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[k].empty() ? 0.0 : analytic[k][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            const double rel = std::abs(a - numeric) / denom;
            ++result.checked;
            if (rel > result.worst_relative) {
                result.worst_relative = rel;
                result.worst_where = "input " + std::to_string(k) + " element " + std::to_string(i) +
                                     " analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
            }
        }
    }
    return result;
}

inline ag::Tensor random_param(int rows, int cols, nn::Rng& rng, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(rows) * cols);
    for (auto& x : v) x = scale * nn::normal(rng);
    return ag::parameter(rows, cols, std::move(v));
}

}  // namespace m2r2::testing
