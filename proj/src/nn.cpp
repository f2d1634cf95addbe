// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "m2r2/nn.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace m2r2::nn {

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

double normal(Rng& rng) {
    double u1 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over the combined value.
    std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

ag::Tensor& ParamStore::create(const std::string& name, int rows, int cols, std::vector<double> init) {
    if (params_.count(name)) throw std::logic_error("duplicate parameter " + name);
    return params_.emplace(name, ag::parameter(rows, cols, std::move(init))).first->second;
}

ag::Tensor& ParamStore::create_uniform(const std::string& name, int rows, int cols, double bound, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(rows) * cols);
    for (double& x : v) x = uniform(rng, -bound, bound);
    return create(name, rows, cols, std::move(v));
}

ag::Tensor& ParamStore::create_constant(const std::string& name, int rows, int cols, double value) {
    return create(name, rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols, value));
}

const ag::Tensor& ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
}

ag::Tensor& ParamStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
}

void ParamStore::zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
}

std::size_t ParamStore::total_size() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.size();
    return n;
}

Linear::Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = store.create_uniform(name + ".weight", in, out, bound, rng);
    bias = store.create_constant(name + ".bias", 1, out, 0.0);
}

ag::Tensor Linear::operator()(const ag::Tensor& x) const { return ag::add_row(ag::matmul(x, weight), bias); }

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, int width) {
    gamma = store.create_constant(name + ".gamma", 1, width, 1.0);
    beta = store.create_constant(name + ".beta", 1, width, 0.0);
}

ag::Tensor LayerNorm::operator()(const ag::Tensor& x) const { return ag::layer_norm(x, gamma, beta); }

TransformerLayer::TransformerLayer(ParamStore& store, const std::string& name, int width, int heads_, int ff_width,
                                   Rng& rng)
    : heads(heads_),
      norm_attn(store, name + ".norm_attn", width),
      query(store, name + ".query", width, width, rng),
      key(store, name + ".key", width, width, rng),
      value(store, name + ".value", width, width, rng),
      out(store, name + ".out", width, width, rng),
      norm_ff(store, name + ".norm_ff", width),
      ff_in(store, name + ".ff_in", width, ff_width, rng),
      ff_out(store, name + ".ff_out", ff_width, width, rng) {
    if (width % heads != 0) throw std::invalid_argument(name + ": width not divisible by heads");
}

ag::Tensor TransformerLayer::operator()(const ag::Tensor& x, int seq_len) const {
    const ag::Tensor n1 = norm_attn(x);
    const ag::Tensor attn = ag::multi_head_attention(query(n1), key(n1), value(n1), seq_len, heads);
    const ag::Tensor h = ag::add(x, out(attn));
    return ag::add(h, ff_out(ag::gelu(ff_in(norm_ff(h)))));
}

Conv2d::Conv2d(ParamStore& store, const std::string& name, const ag::Conv2dShape& shape_, int out_channels_, Rng& rng)
    : shape(shape_), out_channels(out_channels_) {
    const int fan_in = shape.channels * shape.kernel * shape.kernel;
    const double bound = std::sqrt(6.0 / fan_in);
    weight = store.create_uniform(name + ".weight", out_channels, fan_in, bound, rng);
    bias = store.create_constant(name + ".bias", 1, out_channels, 0.0);
}

ag::Tensor Conv2d::operator()(const ag::Tensor& x) const { return ag::conv2d(x, weight, bias, shape); }

std::vector<double> sinusoidal_positions(int length, int width) {
    std::vector<double> table(static_cast<std::size_t>(length) * width);
    for (int pos = 0; pos < length; ++pos)
        for (int i = 0; i < width; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / width);
            table[pos * width + i] = (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
        }
    return table;
}

AdamW::AdamW(ParamStore& store, AdamWConfig config) : store_(store), config_(config) {
    for (auto& [name, p] : store_.all()) {
        m_[name].assign(p.size(), 0.0);
        v_[name].assign(p.size(), 0.0);
    }
}

double AdamW::step() {
    double sq = 0.0;
    for (auto& [_, p] : store_.all())
        for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    const double clip = (config_.clip_norm > 0.0 && norm > config_.clip_norm) ? config_.clip_norm / norm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : store_.all()) {
        if (p.grad().empty()) continue;
        auto values = p.mutable_data();
        auto grads = p.grad();
        auto& m = m_[name];
        auto& v = v_[name];
        const bool decay = p.rows() > 1;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = grads[i] * clip;
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
            const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
            if (decay) values[i] -= config_.learning_rate * config_.weight_decay * values[i];
            values[i] -= config_.learning_rate * update;
        }
    }
    return norm;
}

}  // namespace m2r2::nn
