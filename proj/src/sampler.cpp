// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "m2r2/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace m2r2 {

using nlohmann::json;

void SamplerConfig::validate() const {
    if (padding < 0) throw std::invalid_argument("sampler: padding must be >= 0");
    if (window_size < 3) throw std::invalid_argument("sampler: window_size must be >= 3");
    if (!(sigma > 0.0)) throw std::invalid_argument("sampler: sigma must be > 0");
}

json SamplerConfig::to_json() const {
    return json{{"padding", padding}, {"window_size", window_size}, {"sigma", sigma}, {"seed", seed}};
}

SamplerConfig SamplerConfig::from_json(const json& doc) {
    SamplerConfig c;
    c.padding = doc.value("padding", c.padding);
    c.window_size = doc.value("window_size", c.window_size);
    c.sigma = doc.value("sigma", c.sigma);
    c.seed = doc.value("seed", c.seed);
    return c;
}

json WindowSample::to_json() const {
    return json{{"recording_id", recording_id}, {"segment_index", segment_index}, {"frame_indices", frame_indices},
                {"boundary", boundary},         {"soft_boundary", soft_boundary}, {"ordered_labels", ordered_labels},
                {"sentence", sentence}};
}

FrameRange window_bounds(const ActionAnnotation& segment, int padding, int frame_count) {
    return {std::max(0, segment.start_frame - padding), std::min(frame_count, segment.end_frame + padding)};
}

std::array<int, 3> allocate_counts(const std::array<int, 3>& section_lengths, int total) {
    long long length_sum = 0;
    for (int len : section_lengths) {
        if (len < 0) throw std::invalid_argument("allocate_counts: negative section length");
        length_sum += len;
    }
    if (length_sum == 0) throw std::invalid_argument("allocate_counts: all sections are empty");
    if (total < 0) throw std::invalid_argument("allocate_counts: negative total");

    std::array<int, 3> counts{};
    std::array<double, 3> remainder{};
    int assigned = 0;
    for (int j = 0; j < 3; ++j) {
        const double quota = static_cast<double>(total) * section_lengths[j] / static_cast<double>(length_sum);
        counts[j] = static_cast<int>(std::floor(quota));
        remainder[j] = quota - counts[j];
        assigned += counts[j];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainder[a] > remainder[b]; });
    for (int k = 0; assigned < total; k = (k + 1) % 3) {
        counts[order[k]] += 1;
        ++assigned;
    }
    // Non-empty sections get at least one sample, borrowed from the largest.
    for (int j = 0; j < 3; ++j) {
        if (section_lengths[j] == 0 || counts[j] > 0) continue;
        const int donor = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
        if (counts[donor] <= 1) break;
        --counts[donor];
        ++counts[j];
    }
    return counts;
}

std::vector<double> smooth_boundaries(const std::vector<int>& boundary, double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("smooth_boundaries: sigma must be > 0");
    const int n = static_cast<int>(boundary.size());
    std::vector<double> out(n, 0.0);
    for (int m = 0; m < n; ++m) {
        if (boundary[m] == 0) continue;
        for (int j = 0; j < n; ++j) {
            const double d = j - m;
            out[j] = std::max(out[j], std::exp(-d * d / (2.0 * sigma * sigma)));
        }
    }
    return out;
}

std::vector<int> label_transitions(const Recording& recording) {
    const auto labels = recording.frame_labels(Granularity::kFine);
    std::vector<int> out;
    for (std::size_t i = 1; i < labels.size(); ++i)
        if (labels[i] != labels[i - 1]) out.push_back(static_cast<int>(i));
    return out;
}

std::uint64_t window_seed(std::uint64_t global_seed, const std::string& recording_id, int segment_index) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : recording_id) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return nn::mix_seed(nn::mix_seed(global_seed, h), static_cast<std::uint64_t>(segment_index));
}

namespace {

// `count` draws from [lo, hi). Distinct when count <= hi - lo; otherwise every
// frame is repeated floor(count / len) times and the rest drawn distinct.
void draw_section(int lo, int hi, int count, nn::Rng& rng, std::vector<int>& out) {
    const int len = hi - lo;
    if (count <= 0 || len <= 0) return;
    for (int rep = 0; rep < count / len; ++rep)
        for (int f = lo; f < hi; ++f) out.push_back(f);
    const int extra = count % len;
    if (extra == 0) return;
    // Partial Fisher-Yates over the section.
    std::vector<int> pool(len);
    std::iota(pool.begin(), pool.end(), lo);
    for (int k = 0; k < extra; ++k) {
        const int j = k + static_cast<int>(nn::uniform01(rng) * (len - k));
        std::swap(pool[k], pool[std::min(j, len - 1)]);
        out.push_back(pool[k]);
    }
}

}  // namespace

WindowSample sample_window(const Recording& recording, int segment_index, const SamplerConfig& config, nn::Rng& rng) {
    config.validate();
    if (recording.annotations.empty()) throw DataError("sample_window: recording " + recording.id + " has no annotations");
    if (segment_index < 0 || segment_index >= static_cast<int>(recording.annotations.size()))
        throw std::out_of_range("sample_window: segment index " + std::to_string(segment_index) + " out of range");

    const auto& seg = recording.annotations[segment_index];
    const int n_frames = static_cast<int>(recording.frame_count());
    const FrameRange range = window_bounds(seg, config.padding, n_frames);
    const std::array<int, 3> bounds{range.lo, seg.start_frame, seg.end_frame};
    const std::array<int, 3> lengths{seg.start_frame - range.lo, seg.end_frame - seg.start_frame,
                                     range.hi - seg.end_frame};
    std::array<int, 3> counts = allocate_counts(lengths, config.window_size);
    const int total_frames = lengths[0] + lengths[1] + lengths[2];

    // With enough frames, sections shorter than their count hand the deficit
    // to the central section (and, failing that, to any section with room).
    if (total_frames >= config.window_size) {
        int deficit = 0;
        for (int j = 0; j < 3; ++j)
            if (counts[j] > lengths[j]) {
                deficit += counts[j] - lengths[j];
                counts[j] = lengths[j];
            }
        for (int j : {1, 0, 2}) {
            const int room = lengths[j] - counts[j];
            const int take = std::min(room, deficit);
            counts[j] += take;
            deficit -= take;
        }
    }

    WindowSample out;
    out.recording_id = recording.id;
    out.segment_index = segment_index;
    for (int j = 0; j < 3; ++j) draw_section(bounds[j], bounds[j] + lengths[j], counts[j], rng, out.frame_indices);
    std::sort(out.frame_indices.begin(), out.frame_indices.end());

    const int n = static_cast<int>(out.frame_indices.size());
    out.boundary.assign(n, 0);
    const int first = out.frame_indices.front();
    const int last = out.frame_indices.back();
    for (int b : label_transitions(recording)) {
        if (b <= first || b > last) continue;
        const auto it = std::lower_bound(out.frame_indices.begin(), out.frame_indices.end(), b);
        out.boundary[static_cast<std::size_t>(it - out.frame_indices.begin())] = 1;
    }
    out.soft_boundary = smooth_boundaries(out.boundary, config.sigma);

    auto sampled_in = [&](const ActionAnnotation& a) {
        auto it = std::lower_bound(out.frame_indices.begin(), out.frame_indices.end(), a.start_frame);
        return it != out.frame_indices.end() && *it < a.end_frame;
    };
    if (segment_index > 0 && sampled_in(recording.annotations[segment_index - 1]))
        out.ordered_labels.push_back(recording.annotations[segment_index - 1].fine_label());
    out.ordered_labels.push_back(seg.fine_label());
    if (segment_index + 1 < static_cast<int>(recording.annotations.size()) &&
        sampled_in(recording.annotations[segment_index + 1]))
        out.ordered_labels.push_back(recording.annotations[segment_index + 1].fine_label());
    out.sentence = order_sentence(out.ordered_labels);
    return out;
}

WindowSample sample_window(const Recording& recording, int segment_index, const SamplerConfig& config) {
    nn::Rng rng(window_seed(config.seed, recording.id, segment_index));
    return sample_window(recording, segment_index, config, rng);
}

std::string order_sentence(const std::vector<std::string>& labels) {
    switch (labels.size()) {
        case 1: return "The robot does " + labels[0] + ".";
        case 2: return "First, the robot does " + labels[0] + ". Finally, the machine executes " + labels[1] + ".";
        case 3:
            return "First, the robot does " + labels[0] + ". Next, it performs " + labels[1] +
                   ". Finally, the machine executes " + labels[2] + ".";
        default:
            throw std::invalid_argument("order_sentence: expected 1 to 3 labels, got " + std::to_string(labels.size()));
    }
}

std::optional<std::vector<std::string>> shuffled_order(const std::vector<std::string>& labels, nn::Rng& rng) {
    std::vector<std::vector<std::string>> candidates;
    std::vector<std::string> perm = labels;
    std::sort(perm.begin(), perm.end());
    do {
        if (perm != labels) candidates.push_back(perm);
    } while (std::next_permutation(perm.begin(), perm.end()));
    if (candidates.empty()) return std::nullopt;
    const auto pick = std::min(candidates.size() - 1, static_cast<std::size_t>(nn::uniform01(rng) * candidates.size()));
    return candidates[pick];
}

}  // namespace m2r2
