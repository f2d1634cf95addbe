// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "m2r2/cli.hpp"
#include "test_util.hpp"

using namespace m2r2;
using nlohmann::json;

namespace {

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "m2r2");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

const json kTiny = {{"synth", {{"num_recordings", 4}, {"actions_per_recording", 4}}},
                    {"data", {{"test_count", 1}}},
                    {"sampler", {{"window_size", 12}, {"padding", 4}}},
                    {"model", {{"embed_dim", 8}, {"heads", 2}, {"text_buckets", 128}}},
                    {"pretrain", {{"steps", 3}, {"batch_size", 3}, {"boundary_hidden", 8}, {"layers", 1}}},
                    {"head", {{"epochs", 2}, {"channels", 8}, {"layers", 2}}}};

const std::vector<std::string> kStages{"synth", "stats", "pretrain", "extract", "train-head", "eval", "report"};

void run_pipeline(const fs::path& config, const fs::path& out, const std::string& seed) {
    for (const auto& stage : kStages) {
        const auto r = run({stage, "--config", config.string(), "--out", out.string(), "--seed", seed});
        INFO(stage << ": " << r.err);
        REQUIRE(r.code == 0);
    }
}

std::map<std::string, std::vector<std::uint8_t>> tree(const fs::path& dir) {
    std::map<std::string, std::vector<std::uint8_t>> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files[fs::relative(e.path(), dir).generic_string()] = io::read_bytes(e.path());
    return files;
}

}  // namespace

TEST_CASE("overrides and config merging") {
    json doc = cli::default_config();
    cli::apply_override(doc, "pretrain.steps", "200");
    CHECK(doc["pretrain"]["steps"] == 200);
    cli::apply_override(doc, "pretrain.learning_rate", "0.001");
    CHECK(doc["pretrain"]["learning_rate"] == 0.001);
    cli::apply_override(doc, "pretrain.schedule", "cosine");
    CHECK(doc["pretrain"]["schedule"] == "cosine");
    cli::apply_override(doc, "data.dir", "123");
    CHECK(doc["data"]["dir"] == "123");
    cli::apply_override(doc, "data.test", R"(["rec_004"])");
    CHECK(doc["data"]["test"] == json::array({"rec_004"}));
    CHECK_THROWS_AS(cli::apply_override(doc, "pretrain.stepz", "1"), cli::ConfigError);
    CHECK_THROWS_AS(cli::apply_override(doc, "pretrain.steps", "1.5"), cli::ConfigError);
    CHECK_THROWS_AS(cli::apply_override(doc, "pretrain.steps", "many"), cli::ConfigError);
    CHECK_THROWS_AS(cli::apply_override(doc, "pretrain..steps", "1"), cli::ConfigError);
    // Per-section seeds are derived from the global one, not settable.
    CHECK_THROWS_AS(cli::apply_override(doc, "pretrain.seed", "1"), cli::ConfigError);

    json base = cli::default_config();
    CHECK_THROWS_AS(cli::merge_checked(base, json{{"model", {{"embed", 4}}}}), cli::ConfigError);
    CHECK_THROWS_AS(cli::merge_checked(base, json{{"model", 4}}), cli::ConfigError);
}

TEST_CASE("run config: seed propagation and validation") {
    const fs::path out = "unused";
    const auto a = cli::load_run_config({}, {}, 1, {}, out);
    const auto b = cli::load_run_config({}, {}, 1, {}, out);
    const auto c = cli::load_run_config({}, {}, 2, {}, out);
    CHECK(a.pretrain.seed == b.pretrain.seed);
    CHECK(a.head.seed == b.head.seed);
    CHECK(a.sampler.seed == b.sampler.seed);
    CHECK(a.pretrain.seed != c.pretrain.seed);
    CHECK(a.head.seed != c.head.seed);
    CHECK(a.sampler.seed != c.sampler.seed);
    CHECK(a.data_dir == out / "data");

    const auto d = cli::load_run_config({}, {"--pretrain.steps=7", "--head.epochs", "3"}, {}, 2, out);
    CHECK(d.pretrain.steps == 7);
    CHECK(d.head.epochs == 3);
    CHECK(d.workers == 2);
    CHECK_THROWS_AS(cli::load_run_config({}, {"--head.epochs"}, {}, {}, out), cli::ConfigError);
    CHECK_THROWS_AS(cli::load_run_config({}, {"stray"}, {}, {}, out), cli::ConfigError);
    CHECK_THROWS_AS(cli::load_run_config({}, {"--model.heads=3"}, {}, {}, out), cli::ConfigError);
    CHECK_THROWS_AS(cli::load_run_config({}, {"--features.mode=both"}, {}, {}, out), cli::ConfigError);
    CHECK_THROWS_AS(cli::load_run_config({}, {"--pretrain.schedule=linear"}, {}, {}, out), cli::ConfigError);

    // Stage hashes chain: a head setting leaves upstream hashes alone.
    const auto e = cli::load_run_config({}, {"--head.epochs=9"}, 1, {}, out);
    CHECK(cli::stage_config_hash(a, "extract") == cli::stage_config_hash(e, "extract"));
    CHECK(cli::stage_config_hash(a, "train-head") != cli::stage_config_hash(e, "train-head"));
    CHECK(cli::stage_config_hash(a, "report") != cli::stage_config_hash(e, "report"));
    CHECK(cli::stage_config_hash(a, "pretrain") != cli::stage_config_hash(c, "pretrain"));
}

TEST_CASE("split of recordings") {
    auto cfg = cli::load_run_config({}, {"--data.test_count=2"}, {}, {}, "o");
    const auto s = cli::split_recordings(cfg, {"rec_002", "rec_000", "rec_001", "rec_003"});
    CHECK(s.train == std::vector<std::string>{"rec_000", "rec_001"});
    CHECK(s.test == std::vector<std::string>{"rec_002", "rec_003"});
    cfg = cli::load_run_config({}, {R"(--data.test=["rec_000"])"}, {}, {}, "o");
    const auto t = cli::split_recordings(cfg, {"rec_000", "rec_001", "rec_002"});
    CHECK(t.train == std::vector<std::string>{"rec_001", "rec_002"});
    CHECK(t.test == std::vector<std::string>{"rec_000"});
    cfg = cli::load_run_config({}, {R"(--data.test=["rec_009"])"}, {}, {}, "o");
    CHECK_THROWS_AS(cli::split_recordings(cfg, {"rec_000"}), cli::ConfigError);
    cfg = cli::load_run_config({}, {}, {}, {}, "o");
    CHECK_THROWS_AS(cli::split_recordings(cfg, {"rec_000", "rec_001"}), cli::ConfigError);
}

TEST_CASE("timeline image") {
    const auto img = cli::timeline_image({0, 0, 1}, {0, 1, 1}, 2, 5);
    CHECK(img.width == 6);
    CHECK(img.height == 2 * 5 + 2 * 4 + 6);
    CHECK(img.pixels.size() == static_cast<std::size_t>(img.width * img.height * 3));
    // Top bar is ground truth, middle bar the prediction.
    CHECK(img.at(0, 2, 0) == img.at(0, 4, 0));
    CHECK(img.at(0, 0, 1) != img.at(0, 2, 1));
    CHECK(img.at(9, 2, 1) == img.at(0, 0, 1));
    // Error strip only under the wrong frame.
    const int y = img.height - 1;
    CHECK(img.at(y, 0, 0) == 255);
    CHECK(img.at(y, 2, 0) == 200);
    CHECK(img.at(y, 2, 1) == 30);
    CHECK_THROWS_AS(cli::timeline_image({0}, {0, 1}), std::invalid_argument);
}

TEST_CASE("exit codes for usage errors") {
    CHECK(run({}).code == 1);
    CHECK(run({"--help"}).code == 0);
    CHECK(run({"fly"}).code == 1);
    CHECK(run({"stats", "--workers", "0"}).code == 1);
    CHECK(run({"stats", "--config", "/nonexistent/config.json"}).code == 1);
    const auto r = run({"stats", "--out", "x", "--nope.key=1"});
    CHECK(r.code == 1);
    CHECK(r.err.find("unknown config key 'nope'") != std::string::npos);
}

TEST_CASE("missing stage inputs fail with a diagnostic") {
    testing::TempDir dir("cli_missing");
    auto r = run({"eval", "--out", dir.path().string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("run 'train-head' first") != std::string::npos);
    r = run({"stats", "--out", dir.path().string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("dataset directory") != std::string::npos);
    r = run({"extract", "--out", dir.path().string(), "--checkpoint", (dir.path() / "none.ckpt").string()});
    CHECK(r.code == 2);
}

TEST_CASE("full pipeline is deterministic and stages check each other") {
    testing::TempDir dir("cli_pipeline");
    const fs::path config = dir.path() / "tiny.json";
    io::write_json_atomic(config, kTiny);
    const fs::path a = dir.path() / "a", b = dir.path() / "b";
    run_pipeline(config, a, "7");
    run_pipeline(config, b, "7");

    const auto metrics = io::read_json(a / "eval" / "metrics.json");
    for (const char* key : {"accuracy", "edit", "f1_10", "f1_25", "f1_50", "detection_rate", "t_e", "n_frames",
                            "n_segments_pred", "n_segments_gt"})
        CHECK(metrics.at("overall").contains(key));
    CHECK(metrics.at("granularity") == "fine");
    CHECK(metrics.contains("projected_coarse"));
    CHECK(metrics.at("recordings").contains("rec_003"));
    CHECK(fs::exists(a / "report" / "rec_003_timeline.png"));
    CHECK(io::read_bytes(a / "report" / "metrics.json") == io::read_bytes(a / "eval" / "metrics.json"));
    const auto manifest = io::read_json(a / "pretrain" / "manifest.json");
    CHECK(manifest.at("outputs").contains("pretrain/checkpoint.m2r2"));
    CHECK(manifest.at("inputs").contains("stats"));

    // Same seed, separate directory: every artifact byte-identical.
    const auto ta = tree(a), tb = tree(b);
    REQUIRE(ta.size() == tb.size());
    for (const auto& [path, bytes] : ta) {
        INFO(path);
        REQUIRE(tb.count(path) == 1);
        CHECK(bytes == tb.at(path));
    }

    // Re-running a stage in place rewrites identical bytes.
    const auto before = io::read_bytes(a / "eval" / "metrics.json");
    const auto r = run({"eval", "--config", config.string(), "--out", a.string(), "--seed", "7"});
    CHECK(r.code == 0);
    CHECK(io::read_bytes(a / "eval" / "metrics.json") == before);

    // Downstream stage with a different seed or head config is refused.
    auto bad = run({"eval", "--config", config.string(), "--out", a.string(), "--seed", "8"});
    CHECK(bad.code == 2);
    CHECK(bad.err.find("config hash mismatch") != std::string::npos);
    bad = run({"extract", "--config", config.string(), "--out", a.string(), "--seed", "7", "--pretrain.steps=4"});
    CHECK(bad.code == 2);
    CHECK(bad.err.find("rerun 'pretrain'") != std::string::npos);

    // Another seed gives another checkpoint.
    const fs::path c = dir.path() / "c";
    for (const std::string stage : {"synth", "stats", "pretrain"})
        REQUIRE(run({stage, "--config", config.string(), "--out", c.string(), "--seed", "8"}).code == 0);
    CHECK(io::read_bytes(c / "pretrain" / "checkpoint.m2r2") != io::read_bytes(a / "pretrain" / "checkpoint.m2r2"));

    // The debug window dump.
    const auto s = run({"sample", "--config", config.string(), "--out", a.string(), "--recording", "rec_001",
                        "--segment", "2"});
    CHECK(s.code == 0);
    const auto w = json::parse(s.out);
    CHECK(w.at("recording_id") == "rec_001");
    CHECK(w.at("frame_indices").size() == 12);
    CHECK(run({"sample", "--config", config.string(), "--out", a.string(), "--recording", "rec_001", "--segment",
               "40"})
              .code == 1);

    // A checkpoint built for a different sensor layout.
    const auto cfg = cli::load_run_config(config, {}, 7, {}, a);
    const auto rec = load_recording(a / "data" / "rec_000");
    ModelConfig model = model_config_for(rec, cfg.preprocess, cfg.model);
    model.sensors.back().dim += 1;
    M2R2Network wrong(model, cfg.pretrain);
    save_network(dir.path() / "wrong.ckpt", wrong, cfg.preprocess, compute_normalization_stats({rec}, cfg.preprocess));
    const auto m = run({"extract", "--config", config.string(), "--out", a.string(), "--seed", "7", "--checkpoint",
                        (dir.path() / "wrong.ckpt").string()});
    CHECK(m.code == 2);
    CHECK(m.err.find("checkpoint/dataset schema mismatch") != std::string::npos);
}
