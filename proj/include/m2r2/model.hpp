// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2r2/autograd.hpp"
#include "m2r2/dataset.hpp"
#include "m2r2/nn.hpp"
#include "m2r2/preprocessing.hpp"

namespace m2r2 {

// Raised when a checkpoint does not fit the data it is applied to.
class SchemaMismatch : public std::runtime_error {
public:
    explicit SchemaMismatch(const std::string& detail)
        : std::runtime_error("checkpoint/dataset schema mismatch: " + detail) {}
};

struct SensorShape {
    std::string name;
    int dim = 0;      // D_s
    int samples = 0;  // T_s

    bool operator==(const SensorShape&) const = default;
};

struct ModelConfig {
    int embed_dim = 512;  // D_e
    int heads = 8;
    int fusion_mlp_hidden = 0;  // 0 means 2 * embed_dim
    std::vector<SensorShape> sensors;
    int image_height = 32;
    int image_width = 32;
    int n_mels = 64;
    int audio_frames = 8;
    int text_buckets = 4096;

    int mlp_hidden() const { return fusion_mlp_hidden > 0 ? fusion_mlp_hidden : 2 * embed_dim; }
    int token_count() const { return static_cast<int>(sensors.size()) + 2; }
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& doc);
    bool operator==(const ModelConfig&) const = default;
};

// Data-dependent shapes (sensors, image size, spectrogram size) taken from a
// recording; the rest copied from `base`.
ModelConfig model_config_for(const Recording& recording, const PreprocessConfig& preprocess, ModelConfig base);

// Per-sensor projection W_p [D_s, D_e] and temporal embedding, stored
// transposed as [T_s, D_e] so that row t weights time step t.
struct ProprioEncoder {
    ProprioEncoder() = default;
    ProprioEncoder(nn::ParamStore& store, const std::string& name, int dim, int samples, int embed_dim, nn::Rng& rng);

    int dim = 0;
    int samples = 0;
    ag::Tensor projection;
    ag::Tensor temporal;
};

// windows: [n * T_s, D_s], n windows stacked in time order. Returns [n, D_e].
ag::Tensor encode_proprio(const ag::Tensor& windows, const ProprioEncoder& params);

// One pre-norm encoder layer over the modality tokens, then a two-layer GELU
// MLP over their concatenation.
struct ModalityFusion {
    ModalityFusion() = default;
    ModalityFusion(nn::ParamStore& store, const std::string& name, int tokens, int embed_dim, int heads, int hidden,
                   nn::Rng& rng);

    int tokens = 0;
    int embed_dim = 0;
    nn::TransformerLayer layer;
    nn::Linear mlp_in;
    nn::Linear mlp_out;
};

// tokens: [I, A, S^1 .. S^Ns], each [n, D_e]. Returns [n, D_e].
ag::Tensor fuse_modalities(const std::vector<ag::Tensor>& tokens, const ModalityFusion& params);

struct ImageEncoder {
    ImageEncoder() = default;
    ImageEncoder(nn::ParamStore& store, const std::string& name, int height, int width, int embed_dim, nn::Rng& rng);
    // x: [n, 3*H*W] in CHW order, values in [-1, 1].
    ag::Tensor operator()(const ag::Tensor& x) const;

    std::vector<nn::Conv2d> convs;
    nn::Linear head;
};

struct AudioEncoder {
    AudioEncoder() = default;
    AudioEncoder(nn::ParamStore& store, const std::string& name, int n_mels, int frames, int embed_dim, nn::Rng& rng);
    // x: [n, n_mels*frames].
    ag::Tensor operator()(const ag::Tensor& x) const;

    std::vector<nn::Conv2d> convs;
    nn::Linear head;
};

// Lowercased word tokens hashed, together with the index of the sentence
// clause they occur in, into a fixed table.
std::vector<int> tokenize(const std::string& text, int buckets);

struct TextEncoder {
    TextEncoder() = default;
    TextEncoder(nn::ParamStore& store, const std::string& name, int buckets, int embed_dim, int heads, nn::Rng& rng);
    // One row per sentence: [sentences.size(), D_e].
    ag::Tensor operator()(const std::vector<std::string>& sentences) const;

    int buckets = 0;
    int embed_dim = 0;
    ag::Tensor table;
    nn::TransformerLayer layer;
};

// Network inputs for a batch of aligned frames.
ag::Tensor image_batch(std::span<const AlignedFrame* const> frames);
ag::Tensor audio_batch(std::span<const AlignedFrame* const> frames);
ag::Tensor proprio_batch(std::span<const AlignedFrame* const> frames, std::size_t sensor);

class FeatureExtractor {
public:
    FeatureExtractor(nn::ParamStore& store, const ModelConfig& config, nn::Rng& rng);

    const ModelConfig& config() const { return config_; }
    // x_i for every frame: [frames.size(), D_e].
    ag::Tensor encode_frames(std::span<const AlignedFrame* const> frames) const;
    ag::Tensor encode_text(const std::vector<std::string>& sentences) const { return text_(sentences); }
    // Throws SchemaMismatch when the frame does not fit the configured shapes.
    void check_frame(const AlignedFrame& frame) const;

    const ImageEncoder& image() const { return image_; }
    const AudioEncoder& audio() const { return audio_; }
    const TextEncoder& text() const { return text_; }
    const std::vector<ProprioEncoder>& proprio() const { return proprio_; }
    const ModalityFusion& fusion() const { return fusion_; }

private:
    ModelConfig config_;
    ImageEncoder image_;
    AudioEncoder audio_;
    TextEncoder text_;
    std::vector<ProprioEncoder> proprio_;
    ModalityFusion fusion_;
};

struct TensorEntry {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::vector<double> values;
};

// Single-file archive: magic, header length, JSON header (caller fields plus
// a tensor index), then raw little-endian float64 data in store order.
struct TensorArchive {
    nlohmann::json header;  // tensor index removed
    std::vector<TensorEntry> tensors;
};

void write_tensor_archive(const fs::path& path, const nlohmann::json& header, const nn::ParamStore& store);
TensorArchive read_tensor_archive(const fs::path& path);

// Copies archived values into an identically structured store; throws
// SchemaMismatch on missing, extra or reshaped tensors.
void restore_parameters(nn::ParamStore& store, const std::vector<TensorEntry>& tensors);

// Extractor checkpoint: configs, normalization stats and caller extras.
struct Checkpoint {
    ModelConfig model;
    PreprocessConfig preprocess;
    NormalizationStats stats;
    nlohmann::json extra = nlohmann::json::object();
    std::vector<TensorEntry> tensors;
};

void save_checkpoint(const fs::path& path, const ModelConfig& model, const PreprocessConfig& preprocess,
                     const NormalizationStats& stats, const nlohmann::json& extra, const nn::ParamStore& store);
Checkpoint load_checkpoint(const fs::path& path);

void restore_parameters(nn::ParamStore& store, const Checkpoint& checkpoint);

// Rejects a checkpoint whose model or preprocessing config differs from the
// one derived for the data at hand.
void check_schema(const Checkpoint& checkpoint, const ModelConfig& expected, const PreprocessConfig& preprocess);

}  // namespace m2r2
