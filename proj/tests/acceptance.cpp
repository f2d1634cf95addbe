// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "m2r2/cli.hpp"
#include "m2r2/metrics.hpp"
#include "metrics_oracle.hpp"
#include "test_util.hpp"

using namespace m2r2;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// --- 1 --------------------------------------------------------------------

// Walks the samples for each grid point separately.
double oracle_interp(const SensorStream& s, int col, double t) {
    for (std::size_t k = 0; k + 1 < s.length(); ++k) {
        const double t0 = s.timestamps[k], t1 = s.timestamps[k + 1];
        if (t >= t0 && t <= t1) {
            const double w = (t - t0) / (t1 - t0);
            return s.at(k, col) * (1.0 - w) + s.at(k + 1, col) * w;
        }
    }
    throw std::logic_error("oracle: time outside the stream");
}

Outcome criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    nn::Rng rng(101);
    double worst = 0.0, worst_linear = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const bool linear = trial % 2 == 1;
        SensorStream s;
        s.name = "s";
        s.dim = 1 + static_cast<int>(nn::uniform01(rng) * 7);
        const int n = 3 + static_cast<int>(nn::uniform01(rng) * 200);
        double t = nn::uniform(rng, -5.0, 5.0);
        std::vector<double> slope(s.dim), offset(s.dim);
        for (int c = 0; c < s.dim; ++c) {
            slope[c] = nn::uniform(rng, -50.0, 50.0);
            offset[c] = nn::uniform(rng, -10.0, 10.0);
        }
        for (int k = 0; k < n; ++k) {
            s.timestamps.push_back(t);
            for (int c = 0; c < s.dim; ++c)
                s.values.push_back(linear ? offset[c] + slope[c] * t : 20.0 * nn::normal(rng));
            t += nn::uniform(rng, 1e-4, 0.05);
        }
        const double span = s.end_time() - s.start_time();
        const double a = s.start_time() + nn::uniform01(rng) * 0.5 * span;
        const double b = a + nn::uniform(rng, 0.05, 0.5) * (s.end_time() - a);
        const int samples = 1 + static_cast<int>(nn::uniform01(rng) * 60);
        const Matrix m = resample_window(s, {a, b}, samples);
        for (int j = 0; j < samples; ++j) {
            const double tj = a + j * (b - a) / samples;
            for (int c = 0; c < s.dim; ++c) {
                const double want = linear ? offset[c] + slope[c] * tj : oracle_interp(s, c, tj);
                const double err = std::abs(m(j, c) - want) / std::max(std::abs(want), 1.0);
                (linear ? worst_linear : worst) = std::max(linear ? worst_linear : worst, err);
            }
        }
    }
    const double secs = seconds_since(t0);
    const bool ok = worst <= 1e-9 && worst_linear <= 1e-12 && secs < 30.0;
    return {ok, fmt("1000 pairs: max rel err %.2e (<= 1e-9), linear %.2e (<= 1e-12), %.1f s (< 30 s)", worst,
                    worst_linear, secs)};
}

// --- 2 --------------------------------------------------------------------

Outcome criterion2() {
    PreprocessConfig pc;
    SensorStream audio;
    audio.name = "audio";
    audio.dim = 1;
    for (int i = -800; i <= 3200; ++i) {
        const double t = i / 16000.0;
        audio.timestamps.push_back(t);
        audio.values.push_back(0.5 * std::sin(2.0 * std::numbers::pi * 1000.0 * t));
    }
    NormalizationStats stats;
    stats.spectrogram_log_min = -100.0;
    stats.spectrogram_log_max = 30.0;
    const int samples = pc.audio_samples(10.0);
    const Matrix spec = audio_logmel(audio, {0.0, 0.1}, samples, pc, stats);
    bool in_range = true;
    for (double v : spec.data) in_range = in_range && v >= -1.0 && v <= 1.0;

    const MelFilterbank fb(pc.mel_window, pc.audio_rate, pc.n_mels, pc.mel_fmin, pc.mel_fmax);
    int nearest = 0;
    for (int m = 1; m < fb.n_mels(); ++m)
        if (std::abs(fb.centers()[m] - 1000.0) < std::abs(fb.centers()[nearest] - 1000.0)) nearest = m;
    const Matrix raw = log_mel_db(audio, {0.0, 0.1}, samples, pc);
    int peak_hits = 0;
    for (int f = 0; f < raw.cols; ++f) {
        int best = 0;
        for (int m = 1; m < raw.rows; ++m)
            if (raw(m, f) > raw(best, f)) best = m;
        peak_hits += best == nearest;
    }
    const bool ok = pc.mel_window == 400 && pc.mel_hop == 160 && spec.rows == 64 && spec.cols == 8 && in_range &&
                    peak_hits == raw.cols;
    return {ok, fmt("shape %dx%d (64x8), values in [-1,1]: %s, 1 kHz peak in mel bin %d on %d/%d frames", spec.rows,
                    spec.cols, in_range ? "yes" : "no", nearest, peak_hits, raw.cols)};
}

// --- 3 --------------------------------------------------------------------

// Frames where the fine label changes, read off annotation edges (gaps are
// unlabeled, so both edges of a gap count).
std::set<int> annotation_transitions(const Recording& rec) {
    const int frames = static_cast<int>(rec.frame_count());
    std::set<int> out;
    const auto& a = rec.annotations;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const bool joined_prev = k > 0 && a[k - 1].end_frame == a[k].start_frame;
        const bool joined_next = k + 1 < a.size() && a[k + 1].start_frame == a[k].end_frame;
        if (a[k].start_frame > 0 && !(joined_prev && a[k - 1].fine_label() == a[k].fine_label()))
            out.insert(a[k].start_frame);
        if (a[k].end_frame < frames && !(joined_next && a[k + 1].fine_label() == a[k].fine_label()))
            out.insert(a[k].end_frame);
    }
    return out;
}

Outcome criterion3() {
    SynthConfig sc;
    SamplerConfig cfg;  // N_w = 100, padding 30
    int segments = 0, sum_bad = 0, marks_bad = 0;
    double worst_quota = 0.0;
    for (int r = 0; segments < 500; ++r) {
        const Recording rec = synthesize_recording(sc, 303, r);
        const int frames = static_cast<int>(rec.frame_count());
        for (int k = 0; k < static_cast<int>(rec.annotations.size()) && segments < 500; ++k, ++segments) {
            const auto& seg = rec.annotations[k];
            const auto range = window_bounds(seg, cfg.padding, frames);
            const std::array<int, 3> len{seg.start_frame - range.lo, seg.end_frame - seg.start_frame,
                                         range.hi - seg.end_frame};
            const auto counts = allocate_counts(len, cfg.window_size);
            const int total_len = len[0] + len[1] + len[2];
            sum_bad += counts[0] + counts[1] + counts[2] != cfg.window_size;
            for (int j = 0; j < 3; ++j)
                worst_quota = std::max(worst_quota,
                                       std::abs(counts[j] - static_cast<double>(cfg.window_size) * len[j] / total_len));

            // Marks: sampled positions reached by an annotation change
            // between consecutive sampled frames.
            const auto w = sample_window(rec, k, cfg);
            std::set<int> expected;
            for (int tr : annotation_transitions(rec))
                for (std::size_t p = 1; p < w.frame_indices.size(); ++p)
                    if (w.frame_indices[p - 1] < tr && tr <= w.frame_indices[p]) {
                        expected.insert(static_cast<int>(p));
                        break;
                    }
            int ones = 0;
            for (int v : w.boundary) ones += v;
            bool same = ones == static_cast<int>(expected.size());
            for (int p : expected) same = same && w.boundary[p] == 1;
            marks_bad += !same;
        }
    }
    const auto smooth = smooth_boundaries({0, 0, 1, 0, 0}, 1.0);
    const double want[] = {0.1353, 0.6065, 1.0, 0.6065, 0.1353};
    double smooth_err = 0.0;
    for (int i = 0; i < 5; ++i) smooth_err = std::max(smooth_err, std::abs(smooth[i] - want[i]));
    const bool ok = sum_bad == 0 && worst_quota < 1.0 && marks_bad == 0 && smooth_err <= 1e-4;
    return {ok, fmt("%d segments: sum != 100 in %d, max quota error %.3f (< 1), mark mismatches %d; "
                    "smoothed example max err %.1e (<= 1e-4)",
                    segments, sum_bad, worst_quota, marks_bad, smooth_err)};
}

// --- 4 --------------------------------------------------------------------

ag::Tensor probe(const ag::Tensor& y, std::uint64_t seed) {
    nn::Rng rng(seed);
    std::vector<double> w(y.size());
    for (auto& x : w) x = nn::normal(rng);
    return ag::sum_all(ag::mul(y, ag::constant(y.rows(), y.cols(), w)));
}

Outcome criterion4() {
    using testing::gradcheck;
    using testing::random_param;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::pair<std::string, double>> results;
    double key_bias_grad = 0.0;
    {
        nn::Rng rng(3);
        ProprioEncoder p;
        p.dim = 3;
        p.samples = 4;
        p.projection = random_param(3, 8, rng);
        p.temporal = random_param(4, 8, rng);
        auto x = random_param(8, 3, rng);
        results.emplace_back("encode_proprio",
                             gradcheck([&] { return probe(encode_proprio(x, p), 17); }, {x, p.projection, p.temporal})
                                 .worst_relative);
    }
    {
        nn::ParamStore store;
        nn::Rng rng(5);
        ModalityFusion f(store, "fusion", 3, 8, 2, 16, rng);
        std::vector<ag::Tensor> tokens;
        for (int i = 0; i < 3; ++i) tokens.push_back(random_param(3, 8, rng));
        std::vector<ag::Tensor> inputs = tokens;
        for (auto& [name, t] : store.all()) inputs.push_back(t);
        results.emplace_back("fuse_modalities",
                             gradcheck([&] { return probe(fuse_modalities(tokens, f), 17); }, inputs).worst_relative);
    }
    nn::ParamStore store;
    nn::Rng rng(51);
    TemporalHeads heads(store, 8, 2, 2, 16, 0.07, rng);
    auto x = random_param(18, 8, rng);  // B_s = 3 windows of T = 6
    {
        // Key biases get an exactly zero gradient (softmax shift invariance);
        // they are checked for that instead of by finite differences.
        std::vector<ag::Tensor> inputs{x}, key_bias;
        for (auto& [name, t] : store.all()) {
            if (name.rfind("temporal.layer", 0) != 0) continue;
            (name.ends_with(".key.bias") ? key_bias : inputs).push_back(t);
        }
        results.emplace_back("fusion_transformer",
                             gradcheck([&] { return probe(fusion_transformer(x, 6, heads.layers), 23); }, inputs)
                                 .worst_relative);
        store.zero_grad();
        ag::backward(probe(fusion_transformer(x, 6, heads.layers), 23));
        for (const auto& b : key_bias)
            for (double g : b.grad()) key_bias_grad = std::max(key_bias_grad, std::abs(g));
    }
    results.emplace_back("boundary_head",
                         gradcheck([&] { return probe(boundary_head(x, heads), 23); },
                                   {x, heads.boundary_in.weight, heads.boundary_in.bias, heads.boundary_out.weight,
                                    heads.boundary_out.bias})
                             .worst_relative);
    {
        auto ew = random_param(3, 8, rng);
        auto es = random_param(5, 8, rng);
        auto tau = ag::parameter(1, 1, {0.3});
        const auto targets = soft_targets({"a", "b", "a"}, {"a", "b", "a", "c", "d"});
        results.emplace_back("loss_action",
                             gradcheck([&] { return loss_action(ew, es, targets, tau); }, {ew, es, tau}).worst_relative);
    }
    {
        auto pred = random_param(18, 1, rng);
        auto target = random_param(3, 6, rng);
        results.emplace_back("loss_boundary",
                             gradcheck([&] { return loss_boundary(pred, target); }, {pred}).worst_relative);
    }
    const double secs = seconds_since(t0);
    bool ok = secs < 120.0 && key_bias_grad < 1e-12;
    std::string detail;
    for (const auto& [name, err] : results) {
        ok = ok && err < 1e-4;
        detail += fmt("%s %.1e, ", name.c_str(), err);
    }
    detail += fmt("(all < 1e-4), %.1f s (< 120 s)", secs);
    return {ok, detail};
}

// --- 5 --------------------------------------------------------------------

Outcome criterion5() {
    const auto smooth = smooth_boundaries({0, 0, 1, 0, 0}, 1.0);
    const auto b = ag::constant(1, 5, smooth);
    const double self = loss_boundary(b, b).item();
    const auto e = ag::constant(2, 2, {1, 0, 0, 1});
    const double action =
        loss_action(e, e, soft_targets({"a", "b"}, {"a", "b"}), ag::constant(1, 1, std::vector<double>{1.0})).item();
    const bool ok = self == 0.0 && std::abs(action - 0.3133) <= 1e-3;
    return {ok, fmt("loss_boundary(B,B) = %g (exactly 0), orthogonal loss_action = %.6f (0.3133 +- 1e-3)", self,
                    action)};
}

// --- 6 --------------------------------------------------------------------

Outcome criterion6() {
    const auto t0 = std::chrono::steady_clock::now();
    SynthConfig sc;
    sc.num_recordings = 8;
    std::vector<Recording> recs;
    for (int i = 0; i < 8; ++i) recs.push_back(synthesize_recording(sc, 7, i));
    const PreprocessConfig pre;
    const auto stats = compute_normalization_stats(recs, pre);
    const auto data = build_pretrain_data(recs, pre, stats, SamplerConfig{});
    ModelConfig mc;
    mc.embed_dim = 64;
    mc = model_config_for(recs[0], pre, mc);
    PretrainConfig pc;
    pc.layers = 2;
    pc.batch_size = 8;
    pc.steps = 200;
    pc.learning_rate = 1e-3;
    pc.schedule = "cosine";
    pc.warmup_steps = 10;
    M2R2Network net(mc, pc);
    const double before = evaluate_losses(net, data, 1).total;
    pretrain(net, data);
    const double after = evaluate_losses(net, data, 1).total;
    const double ranking = order_ranking_accuracy(net, data, 3);
    const double secs = seconds_since(t0);
    const double ratio = after / before;
    const bool ok = ratio <= 0.2 && ranking >= 0.95 && secs < 600.0;
    return {ok, fmt("L_total %.4f -> %.4f (%.1f%% of initial, <= 20%%), order ranking %.3f (>= 0.95), %.0f s (< 600 s)",
                    before, after, 100.0 * ratio, ranking, secs)};
}

// --- 7 --------------------------------------------------------------------

int run_cli(std::vector<std::string> args, std::string* out = nullptr) {
    args.insert(args.begin(), "m2r2");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream o, e;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), o, e);
    if (code != 0) std::fprintf(stderr, "%s", e.str().c_str());
    if (out) *out = o.str();
    return code;
}

Outcome criterion7() {
    const auto t0 = std::chrono::steady_clock::now();
    testing::TempDir dir("acceptance_e2e");
    const fs::path config = dir.path() / "config.json";
    io::write_json_atomic(config, json{{"synth", {{"num_recordings", 25}}},
                                       {"data", {{"test_count", 5}}},
                                       {"model", {{"embed_dim", 64}}},
                                       {"pretrain",
                                        {{"steps", 200},
                                         {"batch_size", 8},
                                         {"layers", 2},
                                         {"learning_rate", 1e-3},
                                         {"schedule", "cosine"},
                                         {"warmup_steps", 10}}}});
    const std::vector<std::string> common{"--config", config.string(), "--out", (dir.path() / "run").string(),
                                          "--seed", "2026"};
    auto with = [&](std::vector<std::string> a) {
        a.insert(a.end(), common.begin(), common.end());
        return a;
    };
    for (const std::string stage : {"synth", "stats", "pretrain", "extract", "train-head", "eval"})
        if (run_cli(with({stage})) != 0) return {false, "pipeline stage '" + stage + "' failed"};
    const auto fine = io::read_json(dir.path() / "run" / "eval" / "metrics.json");
    if (run_cli(with({"train-head", "--head.granularity=coarse"})) != 0 ||
        run_cli(with({"eval", "--head.granularity=coarse"})) != 0)
        return {false, "coarse head stage failed"};
    const auto coarse = io::read_json(dir.path() / "run" / "eval" / "metrics.json");
    const double secs = seconds_since(t0);

    const auto& f = fine.at("overall");
    const double acc = f.at("accuracy"), f50 = f.at("f1_50"), dr = f.at("detection_rate");
    const double coarse_acc = coarse.at("overall").at("accuracy");
    const double projected_acc = fine.at("projected_coarse").at("accuracy");
    const bool ok = acc >= 90.0 && f50 >= 80.0 && dr >= 85.0 && coarse_acc >= acc && coarse_acc >= projected_acc &&
                    secs < 1800.0;
    return {ok, fmt("fine: acc %.2f (>= 90), F1@50 %.2f (>= 80), DR %.2f (>= 85); coarse acc %.2f >= fine %.2f and "
                    ">= projected fine %.2f; %.0f s (< 1800 s)",
                    acc, f50, dr, coarse_acc, acc, projected_acc, secs)};
}

// --- 8 --------------------------------------------------------------------

Outcome criterion8() {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> len(1, 20);
    int mismatches = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = len(rng);
        const auto g = oracle::random_labels(rng, n, 4, 8);
        const auto p = oracle::random_labels(rng, n, 4, 8);
        const auto r = metrics::evaluate(p, g, 2);
        const bool same = r.accuracy == oracle::accuracy(p, g) && r.edit == oracle::edit(p, g) &&
                          r.f1_10 == oracle::greedy_f1(p, g, 0.10).f1() &&
                          r.f1_25 == oracle::greedy_f1(p, g, 0.25).f1() &&
                          r.f1_50 == oracle::greedy_f1(p, g, 0.50).f1() &&
                          r.detection_rate ==
                              oracle::detection(oracle::boundaries(p), oracle::boundaries(g), 2).f1();
        mismatches += !same;
    }
    const double dr = metrics::detection_rate(std::vector<int>{105, 300}, std::vector<int>{100, 200}, 10);
    // [A, C] vs [A, B, C] as frame-wise labels.
    const double edit = metrics::edit_score(std::vector<int>{0, 0, 0, 2, 2, 2}, std::vector<int>{0, 0, 1, 1, 2, 2});
    auto r2 = [](double v) { return std::round(v * 100.0) / 100.0; };
    const bool ok = mismatches == 0 && r2(dr) == 50.0 && r2(edit) == 66.67;
    return {ok, fmt("100 random pairs: %d oracle mismatches; DR example %.2f (50.00), EDIT example %.2f (66.67)",
                    mismatches, dr, edit)};
}

// --- 9 --------------------------------------------------------------------

std::map<std::string, std::vector<std::uint8_t>> tree(const fs::path& dir) {
    std::map<std::string, std::vector<std::uint8_t>> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files[fs::relative(e.path(), dir).generic_string()] = io::read_bytes(e.path());
    return files;
}

Outcome criterion9() {
    testing::TempDir dir("acceptance_det");
    const fs::path config = dir.path() / "config.json";
    io::write_json_atomic(config,
                          json{{"synth", {{"num_recordings", 4}, {"actions_per_recording", 4}}},
                               {"data", {{"test_count", 1}}},
                               {"sampler", {{"window_size", 12}, {"padding", 4}}},
                               {"model", {{"embed_dim", 8}, {"heads", 2}, {"text_buckets", 128}}},
                               {"pretrain", {{"steps", 3}, {"batch_size", 3}, {"boundary_hidden", 8}, {"layers", 1}}},
                               {"head", {{"epochs", 2}, {"channels", 8}, {"layers", 2}}}});
    const std::vector<std::string> stages{"synth", "stats", "pretrain", "extract", "train-head", "eval", "report"};
    for (const char* run : {"a", "b"})
        for (const auto& stage : stages)
            if (run_cli({stage, "--config", config.string(), "--out", (dir.path() / run).string(), "--seed", "9",
                         "--workers", "2"}) != 0)
                return {false, "stage '" + stage + "' failed"};
    const auto a = tree(dir.path() / "a");
    const auto b = tree(dir.path() / "b");
    int differing = 0;
    for (const auto& [path, bytes] : a) differing += !b.count(path) || b.at(path) != bytes;
    // In-place reruns of every stage.
    const auto before = tree(dir.path() / "a");
    for (const auto& stage : stages)
        if (run_cli({stage, "--config", config.string(), "--out", (dir.path() / "a").string(), "--seed", "9"}) != 0)
            return {false, "rerun of '" + stage + "' failed"};
    int rerun_diff = 0;
    const auto after = tree(dir.path() / "a");
    for (const auto& [path, bytes] : before) rerun_diff += !after.count(path) || after.at(path) != bytes;
    const bool ok = differing == 0 && a.size() == b.size() && rerun_diff == 0 && before.size() == after.size();
    return {ok, fmt("%zu artifacts over 7 stages: %d differ between two runs, %d differ after in-place reruns",
                    a.size(), differing, rerun_diff)};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"preprocessing oracle", criterion1}, {"spectrogram contract", criterion2},
        {"sampler properties", criterion3},   {"gradient checks", criterion4},
        {"loss sanity", criterion5},          {"pretraining overfit", criterion6},
        {"end-to-end segmentation", criterion7}, {"metrics oracle", criterion8},
        {"determinism", criterion9}};
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    int failed = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const int id = static_cast<int>(k) + 1;
        if (!only.empty() && !only.count(id)) continue;
        Outcome o;
        try {
            o = criteria[k].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("criterion %d [%s] %s: %s\n", id, o.pass ? "PASS" : "FAIL", criteria[k].first.c_str(),
                    o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
