// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2r2/pretraining.hpp"

namespace m2r2 {

// Which representation is exported per frame.
enum class FeatureMode {
    kFused,     // x_i, after modality fusion
    kTemporal,  // X-hat, after the Fusion Transformer over the whole recording
};
FeatureMode parse_feature_mode(const std::string& name);
std::string to_string(FeatureMode mode);

struct FeatureSequence {
    std::string recording_id;
    Matrix x;  // [frames, D_e]
    std::string checkpoint_fingerprint;
    FeatureMode mode = FeatureMode::kFused;
};

// Loaded extractor checkpoint plus the hash of its file bytes.
struct ExtractionContext {
    LoadedNetwork network;
    std::string fingerprint;

    static ExtractionContext load(const fs::path& checkpoint);
    const PreprocessConfig& preprocess() const { return network.checkpoint.preprocess; }
    const NormalizationStats& stats() const { return network.checkpoint.stats; }
};

// Features for already aligned frames, encoded in chunks of `chunk` frames.
Matrix extract_features(const M2R2Network& net, const std::vector<AlignedFrame>& frames,
                        FeatureMode mode = FeatureMode::kFused, int chunk = 64);

// Schema check, preprocessing with the checkpoint's config and stats, then
// extraction. Throws SchemaMismatch when the recording does not fit.
FeatureSequence extract_recording(const ExtractionContext& ctx, const Recording& recording,
                                  FeatureMode mode = FeatureMode::kFused, int workers = 1);

// <dir>/<id>.f32 (row-major float32 little-endian) and <id>.json sidecar.
void write_features(const fs::path& dir, const FeatureSequence& features, const std::string& config_hash);
FeatureSequence read_features(const fs::path& dir, const std::string& recording_id);

struct HeadConfig {
    int stages = 2;
    int layers = 6;  // dilations 1, 2, 4, ...
    int channels = 64;
    double smoothing_weight = 0.15;
    double smoothing_clamp = 16.0;
    double learning_rate = 5e-4;
    double weight_decay = 0.0;
    int epochs = 50;
    Granularity granularity = Granularity::kFine;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static HeadConfig from_json(const nlohmann::json& doc);
};

// Multi-stage dilated temporal convolution head over [T, D_in] features.
class SegmentationHead {
public:
    SegmentationHead(const HeadConfig& config, int input_dim, int classes);

    const HeadConfig& config() const { return config_; }
    int input_dim() const { return input_dim_; }
    int classes() const { return classes_; }
    nn::ParamStore& store() { return store_; }
    const nn::ParamStore& store() const { return store_; }

    // Per-stage logits, each [T, classes].
    std::vector<ag::Tensor> forward(const ag::Tensor& features) const;

private:
    struct Layer {
        int dilation = 1;
        nn::Linear conv;  // [3*C, C], taps at t-d, t, t+d
        nn::Linear mix;   // 1x1
    };
    struct Stage {
        nn::Linear input;
        std::vector<Layer> layers;
        nn::Linear output;
    };

    HeadConfig config_;
    int input_dim_ = 0;
    int classes_ = 0;
    nn::ParamStore store_;
    std::vector<Stage> stages_;
};

struct HeadExample {
    std::string recording_id;
    Matrix features;
    std::vector<int> labels;  // -1 frames are ignored
};

// Summed over stages: masked cross-entropy plus weighted truncated smoothing.
ag::Tensor head_loss(const std::vector<ag::Tensor>& stage_logits, const std::vector<int>& labels,
                     const HeadConfig& config);

struct HeadEpoch {
    int epoch = 0;
    double loss = 0.0;  // mean over recordings
};

// One recording per step, recordings visited in a seeded order each epoch.
std::vector<HeadEpoch> train_head(SegmentationHead& head, const std::vector<HeadExample>& examples,
                                  const std::function<void(const HeadEpoch&)>& on_epoch = {});

// Row-wise argmax; ties go to the lowest index.
std::vector<int> argmax_rows(const Matrix& scores);

// Final-stage logits and labels.
Matrix head_logits(const SegmentationHead& head, const Matrix& features);
std::vector<int> predict(const SegmentationHead& head, const Matrix& features);

void save_head(const fs::path& path, const SegmentationHead& head, const LabelSet& labels,
               const nlohmann::json& extra = nlohmann::json::object());

struct LoadedHead {
    std::unique_ptr<SegmentationHead> head;
    LabelSet labels;
    nlohmann::json extra;
};
LoadedHead load_head(const fs::path& path);

// "frame,label" with label names.
std::string predictions_csv(const std::vector<int>& labels, const std::vector<std::string>& names);
std::vector<int> parse_predictions_csv(const std::string& text, const std::vector<std::string>& names);

}  // namespace m2r2
