// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2r2/model.hpp"
#include "m2r2/sampler.hpp"

namespace m2r2 {

class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct PretrainConfig {
    int layers = 2;  // L
    int batch_size = 8;
    int steps = 200;
    double learning_rate = 1e-4;
    // "constant", or "cosine": linear warmup then cosine decay to zero.
    std::string schedule = "constant";
    int warmup_steps = 0;
    double weight_decay = 1e-4;
    double clip_norm = 1.0;
    double temperature = 0.07;  // initial value of the learnable tau
    int boundary_hidden = 256;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static PretrainConfig from_json(const nlohmann::json& doc);
};

inline constexpr double kTauMin = 1e-3;
inline constexpr double kTauMax = 1.0;

// Fusion Transformer layers, boundary regression MLP and the temperature.
struct TemporalHeads {
    TemporalHeads() = default;
    TemporalHeads(nn::ParamStore& store, int embed_dim, int heads, int layers, int boundary_hidden, double tau,
                  nn::Rng& rng);

    int embed_dim = 0;
    std::vector<nn::TransformerLayer> layers;
    nn::Linear boundary_in;
    nn::Linear boundary_out;
    ag::Tensor tau;
};

// x: [n*T, D_e], n windows of T consecutive samples. Sinusoidal positions
// over the sample position are added before the layers.
ag::Tensor fusion_transformer(const ag::Tensor& x, int seq_len, const std::vector<nn::TransformerLayer>& layers);
// Temporal mean per window: [n*T, D_e] -> [n, D_e].
ag::Tensor window_embedding(const ag::Tensor& x_hat, int seq_len);
// Per-row boundary probability: [rows, D_e] -> [rows, 1].
ag::Tensor boundary_head(const ag::Tensor& x_hat, const TemporalHeads& heads);

// Mean squared error over all B_s*T entries (pred and target of equal size).
ag::Tensor loss_boundary(const ag::Tensor& predicted, const ag::Tensor& target);

// targets(i, j) = 1/k for the k columns whose sentence equals row i's.
Matrix soft_targets(const std::vector<std::string>& row_sentences, const std::vector<std::string>& column_sentences);

// Symmetric contrastive loss. Columns [0, B) of text are the windows' own
// sentences; any further columns are extra negatives that only enter the
// window-to-text direction.
ag::Tensor loss_action(const ag::Tensor& window_embeddings, const ag::Tensor& text_embeddings, const Matrix& targets,
                       const ag::Tensor& tau);

// Learning rate used at `step` under the configured schedule.
double scheduled_learning_rate(const PretrainConfig& config, int step);

struct LossRecord {
    int step = 0;
    double total = 0.0;
    double action = 0.0;
    double boundary = 0.0;
};

// Extractor plus temporal heads in one parameter store.
class M2R2Network {
public:
    M2R2Network(const ModelConfig& model, const PretrainConfig& pretrain);

    nn::ParamStore& store() { return store_; }
    const nn::ParamStore& store() const { return store_; }
    const FeatureExtractor& extractor() const { return *extractor_; }
    const TemporalHeads& heads() const { return heads_; }
    const ModelConfig& model_config() const { return extractor_->config(); }
    const PretrainConfig& pretrain_config() const { return pretrain_; }

private:
    nn::ParamStore store_;
    PretrainConfig pretrain_;
    std::unique_ptr<FeatureExtractor> extractor_;
    TemporalHeads heads_;
};

// Aligned frames of every recording and one sampled window per annotation.
struct PretrainData {
    std::vector<std::string> recording_ids;
    std::vector<std::vector<AlignedFrame>> frames;
    std::vector<WindowSample> windows;
    std::vector<int> window_recording;
};

PretrainData build_pretrain_data(const std::vector<Recording>& recordings, const PreprocessConfig& preprocess,
                                 const NormalizationStats& stats, const SamplerConfig& sampler, int workers = 1);

struct BatchLosses {
    ag::Tensor total;
    ag::Tensor action;
    ag::Tensor boundary;
};

// Forward pass over the given windows with one shuffled-order negative per
// window whose labels admit another order.
BatchLosses batch_losses(const M2R2Network& net, const PretrainData& data, const std::vector<int>& window_ids,
                         nn::Rng& rng);

using StepCallback = std::function<void(const LossRecord&)>;

// Seeded training loop; throws NonFiniteLoss when a loss is NaN or infinite.
std::vector<LossRecord> pretrain(M2R2Network& net, const PretrainData& data, const StepCallback& on_step = {});

// Mean losses over all windows, batched by one seeded permutation, without
// gradients.
LossRecord evaluate_losses(const M2R2Network& net, const PretrainData& data, std::uint64_t seed);

// Fraction of windows (among those with a distinct reordering) whose window
// embedding is closer, by cosine, to their own sentence than to a shuffled one.
double order_ranking_accuracy(const M2R2Network& net, const PretrainData& data, std::uint64_t seed);

std::string loss_log_csv(const std::vector<LossRecord>& log);

void save_network(const fs::path& path, const M2R2Network& net, const PreprocessConfig& preprocess,
                  const NormalizationStats& stats);

struct LoadedNetwork {
    Checkpoint checkpoint;  // tensors cleared after restoring
    std::unique_ptr<M2R2Network> net;
};
LoadedNetwork load_network(const fs::path& path);

}  // namespace m2r2
