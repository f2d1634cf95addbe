// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2r2/io.hpp"

namespace m2r2 {

namespace fs = std::filesystem;

// Raised for malformed or inconsistent recordings.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kMinAudioRate = 16000;

struct SensorStream {
    std::string name;
    int dim = 0;
    std::vector<double> timestamps;
    std::vector<double> values;  // row-major [timestamps.size(), dim]

    std::size_t length() const { return timestamps.size(); }
    double at(std::size_t row, int col) const { return values[row * dim + col]; }
    double start_time() const { return timestamps.front(); }
    double end_time() const { return timestamps.back(); }

    // Throws DataError naming the stream when an invariant is violated.
    void validate() const;
};

struct ActionAnnotation {
    int start_frame = 0;
    int end_frame = 0;  // exclusive
    std::string activity;
    std::string object;

    std::string fine_label() const { return activity + " " + object; }
    const std::string& coarse_label() const { return activity; }
};

enum class Granularity { kFine, kCoarse };

Granularity parse_granularity(const std::string& name);
std::string to_string(Granularity g);

class LabelSet {
public:
    LabelSet() = default;
    // Fine labels are the activity x object product in activity-major order.
    LabelSet(std::vector<std::string> activities, std::vector<std::string> objects);

    const std::vector<std::string>& activities() const { return activities_; }
    const std::vector<std::string>& objects() const { return objects_; }
    const std::vector<std::string>& fine_labels() const { return fine_; }
    const std::vector<std::string>& coarse_labels() const { return activities_; }
    const std::vector<std::string>& labels(Granularity g) const { return g == Granularity::kFine ? fine_ : activities_; }

    int fine_index(const std::string& label) const;
    int coarse_index(const std::string& activity) const;
    int index_of(const ActionAnnotation& a, Granularity g) const;
    int fine_to_coarse(int fine) const;
    std::size_t size(Granularity g) const { return labels(g).size(); }

    nlohmann::json to_json() const;
    static LabelSet from_json(const nlohmann::json& doc);

    bool operator==(const LabelSet& other) const = default;

private:
    std::vector<std::string> activities_;
    std::vector<std::string> objects_;
    std::vector<std::string> fine_;
    std::map<std::string, int> fine_index_;
    std::map<std::string, int> coarse_index_;
};

struct Recording {
    std::string id;
    double camera_rate_nominal = 10.0;
    std::vector<double> camera_timestamps;
    std::vector<io::RgbImage> frames;
    int audio_rate = kMinAudioRate;
    SensorStream audio;  // dim 1
    std::vector<SensorStream> proprio;
    std::vector<ActionAnnotation> annotations;
    LabelSet labels;

    std::size_t frame_count() const { return camera_timestamps.size(); }
    const SensorStream& sensor(const std::string& name) const;

    // Per-frame label indices; frames outside every annotation get -1.
    std::vector<int> frame_labels(Granularity g) const;

    void validate() const;
};

// Fixed proprioceptive schema: name and dimension of each stream, in order.
struct SensorSpec {
    std::string name;
    int dim;
};
const std::vector<SensorSpec>& default_sensor_schema();

Recording load_recording(const fs::path& dir);
void save_recording(const Recording& rec, const fs::path& dir);

// Flips quaternion signs (columns 3..6 of the pose stream) so consecutive
// samples have a non-negative dot product.
void enforce_quaternion_continuity(SensorStream& pose);

struct SynthConfig {
    int num_recordings = 5;
    int actions_per_recording = 12;
    double camera_rate = 10.0;
    // Grammar roles: [0] pick, [1] insert, [2] remove, [3] place; any extra
    // activity is an alternative to insert in assembly cycles.
    std::vector<std::string> activities{"pick", "insert", "remove", "place", "screw"};
    std::vector<std::string> objects{"USB", "peg", "gear", "nut"};
    int image_size = 32;
    int audio_rate = 16000;
    double ft_rate = 1000.0;
    double pose_rate = 500.0;
    double twist_rate = 500.0;
    double gripper_rate = 400.0;
    double timestamp_jitter = 0.003;  // seconds, std of camera jitter
    double noise_scale = 1.0;

    void validate() const;
    nlohmann::json to_json() const;
    static SynthConfig from_json(const nlohmann::json& doc);
};

// Writes one directory per recording (rec_000, rec_001, ...) under out_dir
// and returns the recordings as they would be loaded back.
std::vector<Recording> generate_synthetic_dataset(const SynthConfig& config, std::uint64_t seed, const fs::path& out_dir);

// In-memory synthesis of a single recording (used by the generator).
Recording synthesize_recording(const SynthConfig& config, std::uint64_t seed, int index);

struct SensorStats {
    std::string name;
    std::vector<double> mean;
    std::vector<double> std;
};

struct NormalizationStats {
    std::vector<SensorStats> sensors;
    double spectrogram_log_min = 0.0;
    double spectrogram_log_max = 0.0;

    const SensorStats& sensor(const std::string& name) const;
    nlohmann::json to_json() const;
    static NormalizationStats from_json(const nlohmann::json& doc);
    std::string fingerprint() const;
};

struct PreprocessConfig;

// Population mean/std over all raw proprioceptive samples, plus log-mel
// min/max over all per-frame spectrograms (computed before normalization).
NormalizationStats compute_normalization_stats(const std::vector<Recording>& recordings, const PreprocessConfig& config);

void save_stats(const NormalizationStats& stats, const fs::path& path);
NormalizationStats load_stats(const fs::path& path);

}  // namespace m2r2
