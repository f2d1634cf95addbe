// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2r2/features_head.hpp"

namespace m2r2::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// Bad flags, unknown keys, invalid values: exit code 1.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Every key a config file or override may set, with its default.
nlohmann::json default_config();

// Applies "section.key" = value. The value is parsed as JSON when possible,
// otherwise taken as a string. Unknown keys throw ConfigError.
void apply_override(nlohmann::json& doc, const std::string& dotted_key, const std::string& value);

// Recursive merge that rejects keys absent from `base`.
void merge_checked(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "");

struct RunConfig {
    nlohmann::json doc;
    std::uint64_t seed = 0;
    int workers = 1;
    fs::path out;
    fs::path data_dir;
    std::vector<std::string> train_ids;  // explicit split; empty means derived
    std::vector<std::string> test_ids;
    int test_count = 5;
    SynthConfig synth;
    PreprocessConfig preprocess;
    SamplerConfig sampler;
    ModelConfig model;
    PretrainConfig pretrain;
    FeatureMode feature_mode = FeatureMode::kFused;
    HeadConfig head;
    int t_e = 10;

    // Typed view of a merged document; throws ConfigError on invalid values.
    static RunConfig from_json(const nlohmann::json& doc, const fs::path& out);
};

// Defaults, then the config file, then --seed/--workers, then overrides.
RunConfig load_run_config(const std::optional<fs::path>& config_file, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed, std::optional<int> workers, const fs::path& out);

// Hash of the configuration that determines a stage's artifacts; each stage
// folds in the hash of the stage it consumes.
std::string stage_config_hash(const RunConfig& config, const std::string& stage);

// Recordings sorted by id, split into train and test.
struct Split {
    std::vector<std::string> train;
    std::vector<std::string> test;
};
Split split_recordings(const RunConfig& config, const std::vector<std::string>& ids);

// Two stacked label bars per recording, ground truth on top.
io::RgbImage timeline_image(const std::vector<int>& predicted, const std::vector<int>& ground_truth,
                            int frame_width = 4, int bar_height = 24);

// Full command line; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace m2r2::cli
