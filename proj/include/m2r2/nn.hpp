// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "m2r2/autograd.hpp"

namespace m2r2::nn {

using Rng = std::mt19937_64;

// Portable draws; std distributions are implementation-defined and would
// break byte-identical outputs across standard libraries.
double uniform01(Rng& rng);
double uniform(Rng& rng, double lo, double hi);
double normal(Rng& rng);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// Named trainable parameters, ordered by name so that iteration order (and
// therefore optimizer updates and checkpoints) is deterministic.
class ParamStore {
public:
    ag::Tensor& create(const std::string& name, int rows, int cols, std::vector<double> init);
    ag::Tensor& create_uniform(const std::string& name, int rows, int cols, double bound, Rng& rng);
    ag::Tensor& create_constant(const std::string& name, int rows, int cols, double value);

    const ag::Tensor& get(const std::string& name) const;
    ag::Tensor& get(const std::string& name);
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    std::map<std::string, ag::Tensor>& all() { return params_; }
    const std::map<std::string, ag::Tensor>& all() const { return params_; }

    void zero_grad();
    std::size_t total_size() const;

private:
    std::map<std::string, ag::Tensor> params_;
};

struct Linear {
    Linear() = default;
    Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng);
    ag::Tensor operator()(const ag::Tensor& x) const;

    ag::Tensor weight;  // [in, out]
    ag::Tensor bias;    // [1, out]
};

struct LayerNorm {
    LayerNorm() = default;
    LayerNorm(ParamStore& store, const std::string& name, int width);
    ag::Tensor operator()(const ag::Tensor& x) const;

    ag::Tensor gamma;
    ag::Tensor beta;
};

// Pre-norm encoder layer: x + MHA(LN(x)), then h + FFN(LN(h)) with a GELU
// feed-forward block.
struct TransformerLayer {
    TransformerLayer() = default;
    TransformerLayer(ParamStore& store, const std::string& name, int width, int heads, int ff_width, Rng& rng);
    ag::Tensor operator()(const ag::Tensor& x, int seq_len) const;

    int heads = 1;
    LayerNorm norm_attn;
    Linear query;
    Linear key;
    Linear value;
    Linear out;
    LayerNorm norm_ff;
    Linear ff_in;
    Linear ff_out;
};

struct Conv2d {
    Conv2d() = default;
    Conv2d(ParamStore& store, const std::string& name, const ag::Conv2dShape& shape, int out_channels, Rng& rng);
    ag::Tensor operator()(const ag::Tensor& x) const;

    ag::Conv2dShape shape;
    int out_channels = 0;
    ag::Tensor weight;
    ag::Tensor bias;
};

// Sinusoidal position table [length, width].
std::vector<double> sinusoidal_positions(int length, int width);

struct AdamWConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    double clip_norm = 1.0;
};

// Decoupled weight decay Adam. Decay is applied to matrices only (rows > 1),
// not to bias, norm or scalar parameters.
class AdamW {
public:
    AdamW(ParamStore& store, AdamWConfig config);

    // Clips the global gradient norm, applies one update and returns the
    // pre-clip gradient norm.
    double step();
    void set_learning_rate(double lr) { config_.learning_rate = lr; }

private:
    ParamStore& store_;
    AdamWConfig config_;
    long long t_ = 0;
    std::map<std::string, std::vector<double>> m_;
    std::map<std::string, std::vector<double>> v_;
};

}  // namespace m2r2::nn
