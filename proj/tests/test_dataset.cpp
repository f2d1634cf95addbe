// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "m2r2/dataset.hpp"
#include "m2r2/preprocessing.hpp"
#include "test_util.hpp"

using namespace m2r2;
using testing::TempDir;
using testing::tree_hashes;

namespace {

SynthConfig small_config() {
    SynthConfig cfg;
    cfg.num_recordings = 2;
    cfg.actions_per_recording = 4;
    return cfg;
}

void replace_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    out << text;
}

}  // namespace

TEST_CASE("label set ordering and projections") {
    LabelSet ls({"pick", "insert"}, {"USB", "peg", "gear"});
    CHECK(ls.size(Granularity::kFine) == 6);
    CHECK(ls.size(Granularity::kCoarse) == 2);
    CHECK(ls.fine_labels()[0] == "pick USB");
    CHECK(ls.fine_labels()[4] == "insert peg");
    CHECK(ls.fine_index("insert peg") == 4);
    CHECK(ls.fine_to_coarse(4) == 1);
    for (int i = 0; i < 6; ++i) CHECK(ls.fine_index(ls.fine_labels()[i]) == i);
    CHECK(LabelSet::from_json(ls.to_json()) == ls);
    CHECK_THROWS_AS(ls.fine_index("place nut"), DataError);
}

TEST_CASE("annotation labels") {
    ActionAnnotation a{0, 5, "insert", "USB"};
    CHECK(a.fine_label() == "insert USB");
    CHECK(a.coarse_label() == "insert");
}

TEST_CASE("generator is deterministic and seed sensitive") {
    SynthConfig cfg;  // 5 recordings, 12 actions each
    TempDir a("synth_a"), b("synth_b"), c("synth_c");
    auto recs = generate_synthetic_dataset(cfg, 7, a.path());
    generate_synthetic_dataset(cfg, 7, b.path());
    generate_synthetic_dataset(cfg, 8, c.path());
    CHECK(recs.size() == 5);
    const auto ha = tree_hashes(a.path());
    CHECK(ha == tree_hashes(b.path()));
    CHECK(ha != tree_hashes(c.path()));
    for (const auto& r : recs) {
        CHECK(r.annotations.size() == 12);
        CHECK(r.frames.size() == r.frame_count());
        CHECK_NOTHROW(r.validate());
    }
}

TEST_CASE("generated recordings round-trip through load_recording") {
    TempDir dir("roundtrip");
    auto recs = generate_synthetic_dataset(small_config(), 3, dir.path());
    for (const auto& r : recs) {
        auto loaded = load_recording(dir.path() / r.id);
        CHECK(loaded.id == r.id);
        CHECK(loaded.frame_count() == r.frame_count());
        CHECK(loaded.annotations.size() == r.annotations.size());
        CHECK(loaded.proprio.size() == default_sensor_schema().size());
        // Annotations cover every frame.
        for (int l : loaded.frame_labels(Granularity::kFine)) CHECK(l >= 0);
    }
}

TEST_CASE("synthetic recordings follow the assembly grammar") {
    auto rec = synthesize_recording(small_config(), 11, 0);
    REQUIRE(rec.annotations.size() == 4);
    CHECK(rec.annotations[0].activity == "pick");
    CHECK((rec.annotations[1].activity == "insert" || rec.annotations[1].activity == "screw"));
    CHECK(rec.annotations[2].activity == "remove");
    CHECK(rec.annotations[3].activity == "place");
    for (std::size_t k = 1; k < rec.annotations.size(); ++k)
        CHECK(rec.annotations[k].start_frame == rec.annotations[k - 1].end_frame);
}

TEST_CASE("load_recording diagnostics") {
    TempDir dir("bad");
    auto recs = generate_synthetic_dataset(small_config(), 5, dir.path());
    const fs::path rec_dir = dir.path() / recs[0].id;

    SUBCASE("annotation end before start") {
        replace_file(rec_dir / "annotations.csv", "start_frame,end_frame,activity,object\n10,5,pick,USB\n");
        CHECK_THROWS_WITH_AS(load_recording(rec_dir), doctest::Contains("annotation end before start"), DataError);
    }
    SUBCASE("overlapping annotations") {
        replace_file(rec_dir / "annotations.csv",
                     "start_frame,end_frame,activity,object\n0,10,pick,USB\n5,12,insert,USB\n");
        CHECK_THROWS_WITH_AS(load_recording(rec_dir), doctest::Contains("overlapping annotations"), DataError);
    }
    SUBCASE("missing audio names the stream") {
        fs::remove(rec_dir / "audio.wav");
        CHECK_THROWS_WITH_AS(load_recording(rec_dir), doctest::Contains("audio.wav"), DataError);
    }
    SUBCASE("non-monotonic camera timestamps") {
        replace_file(rec_dir / "camera_timestamps.csv", "0.0\n0.2\n0.1\n");
        CHECK_THROWS_WITH_AS(load_recording(rec_dir), doctest::Contains("non-monotonic timestamps"), DataError);
    }
    SUBCASE("audio below 16 kHz") {
        auto wav = io::read_wav(rec_dir / "audio.wav");
        wav.sample_rate = 8000;
        io::write_atomic(rec_dir / "audio.wav", io::encode_wav(wav));
        auto meta = io::read_json(rec_dir / "meta.json");
        meta["audio_rate"] = 8000;
        io::write_json_atomic(rec_dir / "meta.json", meta);
        CHECK_THROWS_WITH_AS(load_recording(rec_dir), doctest::Contains("below the 16000 Hz minimum"), DataError);
    }
}

TEST_CASE("quaternion continuity flips sign jumps") {
    SensorStream pose;
    pose.name = "pose";
    pose.dim = 7;
    pose.timestamps = {0.0, 0.1};
    pose.values = {0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, -1};
    enforce_quaternion_continuity(pose);
    CHECK(pose.at(1, 6) == 1.0);
}

TEST_CASE("normalization stats match a direct population computation") {
    auto cfg = small_config();
    std::vector<Recording> recs{synthesize_recording(cfg, 21, 0), synthesize_recording(cfg, 21, 1)};
    PreprocessConfig pc;
    auto stats = compute_normalization_stats(recs, pc);
    REQUIRE(stats.sensors.size() == recs[0].proprio.size());
    for (std::size_t s = 0; s < stats.sensors.size(); ++s) {
        const int dim = recs[0].proprio[s].dim;
        for (int d = 0; d < dim; ++d) {
            long double sum = 0, sq = 0;
            std::size_t n = 0;
            for (const auto& r : recs)
                for (std::size_t i = 0; i < r.proprio[s].length(); ++i) {
                    sum += r.proprio[s].at(i, d);
                    ++n;
                }
            const long double mean = sum / n;
            for (const auto& r : recs)
                for (std::size_t i = 0; i < r.proprio[s].length(); ++i) {
                    const long double dv = r.proprio[s].at(i, d) - mean;
                    sq += dv * dv;
                }
            CHECK(stats.sensors[s].mean[d] == doctest::Approx(static_cast<double>(mean)).epsilon(1e-10));
            CHECK(stats.sensors[s].std[d] == doctest::Approx(std::sqrt(static_cast<double>(sq / n))).epsilon(1e-10));
            CHECK(stats.sensors[s].std[d] >= 0.0);
        }
    }
    CHECK(stats.spectrogram_log_min < stats.spectrogram_log_max);

    // Input order does not matter.
    std::vector<Recording> reversed{recs[1], recs[0]};
    CHECK(compute_normalization_stats(reversed, pc).to_json() == stats.to_json());

    TempDir dir("stats");
    save_stats(stats, dir.path() / "stats.json");
    CHECK(load_stats(dir.path() / "stats.json").to_json() == stats.to_json());
}

TEST_CASE("normalization stats reject empty input and schema mismatch") {
    PreprocessConfig pc;
    CHECK_THROWS_AS(compute_normalization_stats({}, pc), DataError);
    auto cfg = small_config();
    auto a = synthesize_recording(cfg, 1, 0);
    auto b = synthesize_recording(cfg, 1, 1);
    b.proprio.pop_back();
    CHECK_THROWS_WITH_AS(compute_normalization_stats({a, b}, pc), doctest::Contains("schema mismatch"), DataError);
}

TEST_CASE("synth config validation") {
    SynthConfig cfg;
    cfg.actions_per_recording = 0;
    CHECK_THROWS(cfg.validate());
    cfg = SynthConfig{};
    cfg.camera_rate = 0;
    CHECK_THROWS(cfg.validate());
    CHECK(SynthConfig::from_json(SynthConfig{}.to_json()).to_json() == SynthConfig{}.to_json());
}
