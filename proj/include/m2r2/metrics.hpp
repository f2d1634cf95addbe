// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace m2r2::metrics {

struct Segment {
    int label = 0;
    int start = 0;  // inclusive frame index
    int end = 0;    // exclusive

    int length() const { return end - start; }
    bool operator==(const Segment&) const = default;
};

// Maximal runs of equal labels, in order.
std::vector<Segment> segments_from_framewise(std::span<const int> labels);

// Percent of frames where pred == gt.
double frame_accuracy(std::span<const int> pred, std::span<const int> gt);

// Unit-cost edit distance between two label sequences.
int levenshtein(std::span<const int> a, std::span<const int> b);

// 100 * (1 - distance / max length) over the segment label sequences.
double edit_score(std::span<const int> pred, std::span<const int> gt);

struct MatchCounts {
    int tp = 0;
    int fp = 0;
    int fn = 0;

    // 2TP / (2TP + FP + FN) in percent; 100 when all counts are zero.
    double f1() const;
};

// Greedy matching in predicted-segment order: each prediction takes the
// unmatched same-label ground-truth segment with the highest IoU, if that IoU
// is at least `overlap`. Ties go to the earlier ground-truth segment.
MatchCounts segmental_matches(std::span<const int> pred, std::span<const int> gt, double overlap);
double segmental_f1(std::span<const int> pred, std::span<const int> gt, double overlap);

// Start of every segment except the first.
std::vector<int> boundaries_from_segments(std::span<const Segment> segments);

// Each prediction joins the nearest ground-truth window [b - t_e, b + t_e]
// that contains it (ties to the earlier boundary). A window with k >= 1
// predictions yields one TP and k - 1 FPs; predictions outside every window
// are FPs and empty windows FNs.
MatchCounts detection_matches(std::span<const int> pred_boundaries, std::span<const int> gt_boundaries, int t_e);
double detection_rate(std::span<const int> pred_boundaries, std::span<const int> gt_boundaries, int t_e);

struct Report {
    double accuracy = 0.0;
    double edit = 0.0;
    double f1_10 = 0.0;
    double f1_25 = 0.0;
    double f1_50 = 0.0;
    double detection_rate = 0.0;
    int t_e = 10;
    int n_frames = 0;
    int n_segments_pred = 0;
    int n_segments_gt = 0;

    nlohmann::json to_json() const;
};

Report evaluate(std::span<const int> pred, std::span<const int> gt, int t_e = 10);

// Several recordings: accuracy over all frames, F1 and detection rate from
// summed counts, edit score averaged per recording.
Report evaluate_many(const std::vector<std::vector<int>>& preds, const std::vector<std::vector<int>>& gts,
                     int t_e = 10);

}  // namespace m2r2::metrics
