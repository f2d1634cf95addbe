// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "m2r2/metrics.hpp"

#include <algorithm>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace m2r2::metrics {

namespace {

void require_same_length(std::span<const int> pred, std::span<const int> gt, const char* what) {
    if (pred.size() != gt.size())
        throw std::invalid_argument(std::string(what) + ": prediction has " + std::to_string(pred.size()) +
                                    " frames, ground truth " + std::to_string(gt.size()));
    if (gt.empty()) throw std::invalid_argument(std::string(what) + ": empty sequences");
}

std::vector<int> segment_labels(std::span<const int> frames) {
    std::vector<int> out;
    for (const auto& s : segments_from_framewise(frames)) out.push_back(s.label);
    return out;
}

void require_sorted(std::span<const int> v, const char* which) {
    if (!std::is_sorted(v.begin(), v.end()))
        throw std::invalid_argument(std::string("detection_rate: ") + which + " boundaries are not sorted");
}

}  // namespace

std::vector<Segment> segments_from_framewise(std::span<const int> labels) {
    if (labels.empty()) throw std::invalid_argument("segments_from_framewise: empty label sequence");
    std::vector<Segment> out;
    int start = 0;
    const int n = static_cast<int>(labels.size());
    for (int i = 1; i <= n; ++i)
        if (i == n || labels[i] != labels[start]) {
            out.push_back({labels[start], start, i});
            start = i;
        }
    return out;
}

double frame_accuracy(std::span<const int> pred, std::span<const int> gt) {
    require_same_length(pred, gt, "frame_accuracy");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) hit += pred[i] == gt[i];
    return 100.0 * static_cast<double>(hit) / static_cast<double>(gt.size());
}

int levenshtein(std::span<const int> a, std::span<const int> b) {
    std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double edit_score(std::span<const int> pred, std::span<const int> gt) {
    require_same_length(pred, gt, "edit_score");
    const auto p = segment_labels(pred);
    const auto g = segment_labels(gt);
    const auto longest = static_cast<double>(std::max(p.size(), g.size()));
    return 100.0 * (1.0 - levenshtein(p, g) / longest);
}

double MatchCounts::f1() const {
    const int denom = 2 * tp + fp + fn;
    return denom == 0 ? 100.0 : 100.0 * 2.0 * tp / denom;
}

MatchCounts segmental_matches(std::span<const int> pred, std::span<const int> gt, double overlap) {
    require_same_length(pred, gt, "segmental_f1");
    if (!(overlap > 0.0 && overlap <= 1.0))
        throw std::invalid_argument("segmental_f1: overlap threshold must be in (0, 1], got " + std::to_string(overlap));
    const auto ps = segments_from_framewise(pred);
    const auto gs = segments_from_framewise(gt);
    std::vector<bool> used(gs.size(), false);
    MatchCounts c;
    for (const auto& p : ps) {
        int best = -1;
        double best_iou = -1.0;
        for (std::size_t j = 0; j < gs.size(); ++j) {
            const auto& g = gs[j];
            if (used[j] || g.label != p.label) continue;
            const int inter = std::min(p.end, g.end) - std::max(p.start, g.start);
            if (inter <= 0) continue;
            const int uni = std::max(p.end, g.end) - std::min(p.start, g.start);
            const double iou = static_cast<double>(inter) / uni;
            if (iou > best_iou) {
                best_iou = iou;
                best = static_cast<int>(j);
            }
        }
        if (best >= 0 && best_iou >= overlap) {
            used[best] = true;
            ++c.tp;
        } else {
            ++c.fp;
        }
    }
    c.fn = static_cast<int>(std::count(used.begin(), used.end(), false));
    return c;
}

double segmental_f1(std::span<const int> pred, std::span<const int> gt, double overlap) {
    return segmental_matches(pred, gt, overlap).f1();
}

std::vector<int> boundaries_from_segments(std::span<const Segment> segments) {
    std::vector<int> out;
    for (std::size_t i = 1; i < segments.size(); ++i) out.push_back(segments[i].start);
    return out;
}

MatchCounts detection_matches(std::span<const int> pred, std::span<const int> gt, int t_e) {
    if (t_e < 0) throw std::invalid_argument("detection_rate: t_e must be >= 0");
    require_sorted(pred, "predicted");
    require_sorted(gt, "ground-truth");
    std::vector<int> hits(gt.size(), 0);
    MatchCounts c;
    for (int p : pred) {
        int owner = -1;
        int best = 0;
        for (std::size_t j = 0; j < gt.size(); ++j) {
            const int d = std::abs(p - gt[j]);
            if (d <= t_e && (owner < 0 || d < best)) {
                owner = static_cast<int>(j);
                best = d;
            }
        }
        if (owner < 0)
            ++c.fp;
        else
            ++hits[owner];
    }
    for (int h : hits) {
        if (h == 0) {
            ++c.fn;
        } else {
            ++c.tp;
            c.fp += h - 1;
        }
    }
    return c;
}

double detection_rate(std::span<const int> pred, std::span<const int> gt, int t_e) {
    return detection_matches(pred, gt, t_e).f1();
}

nlohmann::json Report::to_json() const {
    return nlohmann::json{{"accuracy", accuracy},
                          {"edit", edit},
                          {"f1_10", f1_10},
                          {"f1_25", f1_25},
                          {"f1_50", f1_50},
                          {"detection_rate", detection_rate},
                          {"t_e", t_e},
                          {"n_frames", n_frames},
                          {"n_segments_pred", n_segments_pred},
                          {"n_segments_gt", n_segments_gt}};
}

Report evaluate(std::span<const int> pred, std::span<const int> gt, int t_e) {
    const std::vector<std::vector<int>> p{{pred.begin(), pred.end()}};
    const std::vector<std::vector<int>> g{{gt.begin(), gt.end()}};
    return evaluate_many(p, g, t_e);
}

Report evaluate_many(const std::vector<std::vector<int>>& preds, const std::vector<std::vector<int>>& gts, int t_e) {
    if (preds.size() != gts.size())
        throw std::invalid_argument("evaluate: " + std::to_string(preds.size()) + " predictions for " +
                                    std::to_string(gts.size()) + " ground-truth sequences");
    if (gts.empty()) throw std::invalid_argument("evaluate: nothing to evaluate");
    Report r;
    r.t_e = t_e;
    MatchCounts f10, f25, f50, dr;
    std::size_t hit = 0;
    double edit_sum = 0.0;
    auto add = [](MatchCounts& a, const MatchCounts& b) {
        a.tp += b.tp;
        a.fp += b.fp;
        a.fn += b.fn;
    };
    for (std::size_t k = 0; k < gts.size(); ++k) {
        const auto& p = preds[k];
        const auto& g = gts[k];
        require_same_length(p, g, "evaluate");
        for (std::size_t i = 0; i < g.size(); ++i) hit += p[i] == g[i];
        r.n_frames += static_cast<int>(g.size());
        edit_sum += edit_score(p, g);
        add(f10, segmental_matches(p, g, 0.10));
        add(f25, segmental_matches(p, g, 0.25));
        add(f50, segmental_matches(p, g, 0.50));
        const auto ps = segments_from_framewise(p);
        const auto gs = segments_from_framewise(g);
        r.n_segments_pred += static_cast<int>(ps.size());
        r.n_segments_gt += static_cast<int>(gs.size());
        add(dr, detection_matches(boundaries_from_segments(ps), boundaries_from_segments(gs), t_e));
    }
    r.accuracy = 100.0 * static_cast<double>(hit) / r.n_frames;
    r.edit = edit_sum / static_cast<double>(gts.size());
    r.f1_10 = f10.f1();
    r.f1_25 = f25.f1();
    r.f1_50 = f50.f1();
    r.detection_rate = dr.f1();
    return r;
}

}  // namespace m2r2::metrics
