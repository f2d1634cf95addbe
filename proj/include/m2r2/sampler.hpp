// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2r2/dataset.hpp"
#include "m2r2/nn.hpp"

namespace m2r2 {

struct SamplerConfig {
    int padding = 30;       // frames added on each side of the central action
    int window_size = 100;  // sampled frames per window
    double sigma = 2.0;     // boundary smoothing, in sample positions
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static SamplerConfig from_json(const nlohmann::json& doc);
};

struct FrameRange {
    int lo = 0;
    int hi = 0;  // exclusive
};

struct WindowSample {
    std::string recording_id;
    int segment_index = 0;
    std::vector<int> frame_indices;     // ascending, window_size entries
    std::vector<int> boundary;          // 0/1 per sampled position
    std::vector<double> soft_boundary;  // Gaussian-smoothed boundary in [0, 1]
    std::vector<std::string> ordered_labels;
    std::string sentence;

    nlohmann::json to_json() const;
};

// [max(0, i_b - p), min(T, i_e + p)).
FrameRange window_bounds(const ActionAnnotation& segment, int padding, int frame_count);

// Largest-remainder apportionment of `total` over the sections; every
// non-empty section receives at least one sample.
std::array<int, 3> allocate_counts(const std::array<int, 3>& section_lengths, int total);

// Peak-normalized Gaussian bumps at every mark, combined by element-wise max.
std::vector<double> smooth_boundaries(const std::vector<int>& boundary, double sigma);

// Frames at which the fine label changes (label[i] != label[i-1]).
std::vector<int> label_transitions(const Recording& recording);

std::uint64_t window_seed(std::uint64_t global_seed, const std::string& recording_id, int segment_index);

// Draws one pretraining window around annotation `segment_index`.
WindowSample sample_window(const Recording& recording, int segment_index, const SamplerConfig& config, nn::Rng& rng);

// Convenience overload seeding the generator with window_seed(config.seed, ...).
WindowSample sample_window(const Recording& recording, int segment_index, const SamplerConfig& config);

std::string order_sentence(const std::vector<std::string>& ordered_labels);

// A reordering of the labels whose sequence differs from the input, or
// nullopt when no such order exists (single label or all labels equal).
std::optional<std::vector<std::string>> shuffled_order(const std::vector<std::string>& ordered_labels, nn::Rng& rng);

}  // namespace m2r2
