// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "m2r2/pretraining.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace m2r2 {

using nlohmann::json;

void PretrainConfig::validate() const {
    if (layers < 1) throw std::invalid_argument("pretrain: layers (L) must be >= 1");
    if (batch_size < 2) throw std::invalid_argument("pretrain: batch_size must be >= 2 for in-batch negatives");
    if (steps < 0) throw std::invalid_argument("pretrain: steps must be >= 0");
    if (!(temperature > 0.0)) throw std::invalid_argument("pretrain: temperature must be > 0");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("pretrain: learning_rate must be > 0");
    if (boundary_hidden < 1) throw std::invalid_argument("pretrain: boundary_hidden must be >= 1");
    if (schedule != "constant" && schedule != "cosine")
        throw std::invalid_argument("pretrain: schedule must be constant or cosine, got '" + schedule + "'");
    if (warmup_steps < 0) throw std::invalid_argument("pretrain: warmup_steps must be >= 0");
}

double scheduled_learning_rate(const PretrainConfig& c, int step) {
    if (c.schedule == "constant") return c.learning_rate;
    if (step < c.warmup_steps) return c.learning_rate * (step + 1) / c.warmup_steps;
    const int span = std::max(1, c.steps - c.warmup_steps);
    const double progress = std::min(1.0, static_cast<double>(step - c.warmup_steps) / span);
    return 0.5 * c.learning_rate * (1.0 + std::cos(std::numbers::pi * progress));
}

json PretrainConfig::to_json() const {
    return json{{"layers", layers},           {"batch_size", batch_size},     {"steps", steps},
                {"learning_rate", learning_rate}, {"schedule", schedule},
                {"warmup_steps", warmup_steps},   {"weight_decay", weight_decay}, {"clip_norm", clip_norm},
                {"temperature", temperature}, {"boundary_hidden", boundary_hidden}, {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const json& doc) {
    PretrainConfig c;
    c.layers = doc.value("layers", c.layers);
    c.batch_size = doc.value("batch_size", c.batch_size);
    c.steps = doc.value("steps", c.steps);
    c.learning_rate = doc.value("learning_rate", c.learning_rate);
    c.schedule = doc.value("schedule", c.schedule);
    c.warmup_steps = doc.value("warmup_steps", c.warmup_steps);
    c.weight_decay = doc.value("weight_decay", c.weight_decay);
    c.clip_norm = doc.value("clip_norm", c.clip_norm);
    c.temperature = doc.value("temperature", c.temperature);
    c.boundary_hidden = doc.value("boundary_hidden", c.boundary_hidden);
    c.seed = doc.value("seed", c.seed);
    return c;
}

TemporalHeads::TemporalHeads(nn::ParamStore& store, int embed_dim_, int heads, int n_layers, int boundary_hidden,
                             double tau_init, nn::Rng& rng)
    : embed_dim(embed_dim_) {
    for (int l = 0; l < n_layers; ++l)
        layers.emplace_back(store, "temporal.layer" + std::to_string(l), embed_dim, heads, 4 * embed_dim, rng);
    boundary_in = nn::Linear(store, "boundary.in", embed_dim, boundary_hidden, rng);
    boundary_out = nn::Linear(store, "boundary.out", boundary_hidden, 1, rng);
    tau = store.create_constant("temporal.tau", 1, 1, tau_init);
}

ag::Tensor fusion_transformer(const ag::Tensor& x, int seq_len, const std::vector<nn::TransformerLayer>& layers) {
    if (seq_len < 1 || x.rows() % seq_len != 0)
        throw std::invalid_argument("fusion_transformer: " + std::to_string(x.rows()) + " rows are not a multiple of " +
                                    std::to_string(seq_len));
    if (layers.empty()) throw std::invalid_argument("fusion_transformer: no layers");
    const int n = x.rows() / seq_len;
    const auto table = nn::sinusoidal_positions(seq_len, x.cols());
    std::vector<double> pos;
    pos.reserve(x.size());
    for (int i = 0; i < n; ++i) pos.insert(pos.end(), table.begin(), table.end());
    ag::Tensor h = ag::add(x, ag::constant(x.rows(), x.cols(), std::move(pos)));
    for (const auto& layer : layers) h = layer(h, seq_len);
    return h;
}

ag::Tensor window_embedding(const ag::Tensor& x_hat, int seq_len) { return ag::group_mean(x_hat, seq_len); }

ag::Tensor boundary_head(const ag::Tensor& x_hat, const TemporalHeads& heads) {
    return ag::sigmoid(heads.boundary_out(ag::gelu(heads.boundary_in(x_hat))));
}

ag::Tensor loss_boundary(const ag::Tensor& predicted, const ag::Tensor& target) {
    if (predicted.size() != target.size())
        throw std::invalid_argument("loss_boundary: " + std::to_string(predicted.size()) + " predictions vs " +
                                    std::to_string(target.size()) + " targets");
    ag::Tensor p = ag::reshape(predicted, target.rows(), target.cols());
    ag::Tensor d = ag::sub(p, target);
    return ag::mean_all(ag::mul(d, d));
}

Matrix soft_targets(const std::vector<std::string>& rows, const std::vector<std::string>& cols) {
    Matrix t(static_cast<int>(rows.size()), static_cast<int>(cols.size()));
    for (int i = 0; i < t.rows; ++i) {
        int k = 0;
        for (int j = 0; j < t.cols; ++j) k += rows[i] == cols[j];
        if (k == 0) throw std::invalid_argument("soft_targets: sentence " + std::to_string(i) + " has no match");
        for (int j = 0; j < t.cols; ++j)
            if (rows[i] == cols[j]) t(i, j) = 1.0 / k;
    }
    return t;
}

ag::Tensor loss_action(const ag::Tensor& windows, const ag::Tensor& text, const Matrix& targets, const ag::Tensor& tau) {
    const int b = windows.rows();
    const int c = text.rows();
    if (b < 2) throw std::invalid_argument("loss_action: need at least 2 windows");
    if (c < b || text.cols() != windows.cols())
        throw std::invalid_argument("loss_action: text embeddings must cover every window with matching width");
    if (targets.rows != b || targets.cols != c) throw std::invalid_argument("loss_action: target shape mismatch");

    ag::Tensor logits = ag::div_scalar(ag::matmul(ag::l2_normalize_rows(windows), ag::transpose(ag::l2_normalize_rows(text))), tau);
    ag::Tensor row_lp = ag::log_softmax_rows(logits);
    ag::Tensor row_loss = ag::scale(ag::sum_all(ag::mul(row_lp, ag::constant(b, c, targets.data))), -1.0 / b);

    // Text-to-window direction over the own-sentence columns, with targets
    // spread uniformly over windows sharing the sentence.
    std::vector<double> col_t(static_cast<std::size_t>(b) * b, 0.0);
    for (int j = 0; j < b; ++j) {
        int k = 0;
        for (int i = 0; i < b; ++i) k += targets(i, j) > 0.0;
        for (int i = 0; i < b; ++i)
            if (targets(i, j) > 0.0) col_t[static_cast<std::size_t>(j) * b + i] = 1.0 / k;
    }
    ag::Tensor col_lp = ag::log_softmax_rows(ag::slice_rows(ag::transpose(logits), 0, b));
    ag::Tensor col_loss = ag::scale(ag::sum_all(ag::mul(col_lp, ag::constant(b, b, std::move(col_t)))), -1.0 / b);
    return ag::scale(ag::add(row_loss, col_loss), 0.5);
}

M2R2Network::M2R2Network(const ModelConfig& model, const PretrainConfig& pretrain) : pretrain_(pretrain) {
    pretrain_.validate();
    nn::Rng rng(nn::mix_seed(pretrain_.seed, 0x6d326d32));
    extractor_ = std::make_unique<FeatureExtractor>(store_, model, rng);
    heads_ = TemporalHeads(store_, model.embed_dim, model.heads, pretrain_.layers, pretrain_.boundary_hidden,
                           pretrain_.temperature, rng);
}

PretrainData build_pretrain_data(const std::vector<Recording>& recordings, const PreprocessConfig& preprocess,
                                 const NormalizationStats& stats, const SamplerConfig& sampler, int workers) {
    sampler.validate();
    std::vector<const Recording*> order;
    for (const auto& r : recordings) order.push_back(&r);
    std::sort(order.begin(), order.end(), [](const Recording* a, const Recording* b) { return a->id < b->id; });

    PretrainData data;
    for (std::size_t r = 0; r < order.size(); ++r) {
        const Recording& rec = *order[r];
        data.recording_ids.push_back(rec.id);
        data.frames.push_back(preprocess_recording(rec, preprocess, stats, workers));
        for (int k = 0; k < static_cast<int>(rec.annotations.size()); ++k) {
            data.windows.push_back(sample_window(rec, k, sampler));
            data.window_recording.push_back(static_cast<int>(r));
        }
    }
    return data;
}

namespace {

struct ForwardOut {
    ag::Tensor x_hat;
    ag::Tensor window_embeddings;
    int seq_len = 0;
};

ForwardOut forward_windows(const M2R2Network& net, const PretrainData& data, const std::vector<int>& ids) {
    std::vector<const AlignedFrame*> frames;
    int seq_len = -1;
    for (int w : ids) {
        const auto& win = data.windows.at(w);
        if (seq_len < 0) seq_len = static_cast<int>(win.frame_indices.size());
        if (static_cast<int>(win.frame_indices.size()) != seq_len)
            throw std::invalid_argument("pretraining: windows of different lengths in one batch");
        const auto& rec_frames = data.frames[data.window_recording[w]];
        for (int f : win.frame_indices) frames.push_back(&rec_frames.at(f));
    }
    ForwardOut out;
    out.seq_len = seq_len;
    out.x_hat = fusion_transformer(net.extractor().encode_frames(frames), seq_len, net.heads().layers);
    out.window_embeddings = window_embedding(out.x_hat, seq_len);
    return out;
}

std::vector<double> cosine_rows(std::span<const double> a, std::span<const double> b, int width) {
    std::vector<double> out;
    for (std::size_t r = 0; r * width < a.size(); ++r) {
        double dot = 0, na = 0, nb = 0;
        for (int k = 0; k < width; ++k) {
            const double x = a[r * width + k], y = b[r * width + k];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        out.push_back(dot / std::sqrt(na * nb));
    }
    return out;
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

BatchLosses batch_losses(const M2R2Network& net, const PretrainData& data, const std::vector<int>& ids, nn::Rng& rng) {
    ForwardOut fw = forward_windows(net, data, ids);

    std::vector<double> target;
    std::vector<std::string> own;
    std::vector<std::string> columns;
    for (int w : ids) {
        const auto& win = data.windows[w];
        target.insert(target.end(), win.soft_boundary.begin(), win.soft_boundary.end());
        own.push_back(win.sentence);
    }
    columns = own;
    for (int w : ids)
        if (auto shuffled = shuffled_order(data.windows[w].ordered_labels, rng)) columns.push_back(order_sentence(*shuffled));

    const int b = static_cast<int>(ids.size());
    ag::Tensor predicted = boundary_head(fw.x_hat, net.heads());
    BatchLosses out;
    out.boundary = loss_boundary(predicted, ag::constant(b, fw.seq_len, std::move(target)));
    out.action = loss_action(fw.window_embeddings, net.extractor().encode_text(columns), soft_targets(own, columns),
                             net.heads().tau);
    out.total = ag::add(out.action, out.boundary);
    return out;
}

std::vector<LossRecord> pretrain(M2R2Network& net, const PretrainData& data, const StepCallback& on_step) {
    const PretrainConfig& cfg = net.pretrain_config();
    const int n = static_cast<int>(data.windows.size());
    if (n == 0) throw std::invalid_argument("pretrain: empty dataset (no annotated windows)");
    if (n < cfg.batch_size)
        throw std::invalid_argument("pretrain: " + std::to_string(n) + " windows, fewer than batch_size " +
                                    std::to_string(cfg.batch_size));

    nn::AdamWConfig opt_cfg;
    opt_cfg.learning_rate = cfg.learning_rate;
    opt_cfg.weight_decay = cfg.weight_decay;
    opt_cfg.clip_norm = cfg.clip_norm;
    nn::AdamW opt(net.store(), opt_cfg);
    nn::Rng negatives(nn::mix_seed(cfg.seed, 2));

    // Windows are visited in consecutive seeded permutations.
    std::vector<int> stream;
    int epoch = 0;
    auto refill = [&] {
        std::vector<int> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        nn::Rng rng(nn::mix_seed(nn::mix_seed(cfg.seed, 1), static_cast<std::uint64_t>(epoch++)));
        for (int i = n - 1; i > 0; --i) {
            const int j = std::min(i, static_cast<int>(nn::uniform01(rng) * (i + 1)));
            std::swap(perm[i], perm[j]);
        }
        stream.insert(stream.end(), perm.begin(), perm.end());
    };

    std::vector<LossRecord> log;
    std::size_t cursor = 0;
    auto& tau = net.store().get("temporal.tau");
    for (int step = 0; step < cfg.steps; ++step) {
        while (stream.size() < cursor + cfg.batch_size) refill();
        std::vector<int> ids(stream.begin() + static_cast<std::ptrdiff_t>(cursor),
                             stream.begin() + static_cast<std::ptrdiff_t>(cursor + cfg.batch_size));
        cursor += cfg.batch_size;

        net.store().zero_grad();
        BatchLosses losses = batch_losses(net, data, ids, negatives);
        LossRecord rec{step, losses.total.item(), losses.action.item(), losses.boundary.item()};
        if (!finite(rec.total) || !finite(rec.action) || !finite(rec.boundary))
            throw NonFiniteLoss("non-finite loss at step " + std::to_string(step) + " (action " +
                                io::format_double(rec.action) + ", boundary " + io::format_double(rec.boundary) + ")");
        ag::backward(losses.total);
        opt.set_learning_rate(scheduled_learning_rate(cfg, step));
        opt.step();
        tau.mutable_data()[0] = std::clamp(tau.data()[0], kTauMin, kTauMax);
        log.push_back(rec);
        if (on_step) on_step(rec);
    }
    return log;
}

LossRecord evaluate_losses(const M2R2Network& net, const PretrainData& data, std::uint64_t seed) {
    ag::NoGradGuard no_grad;
    const int n = static_cast<int>(data.windows.size());
    const int bs = net.pretrain_config().batch_size;
    if (n < 2) throw std::invalid_argument("evaluate_losses: need at least 2 windows");
    nn::Rng rng(seed);
    // One seeded permutation, so batches mix recordings as in training.
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[std::min(i, static_cast<int>(nn::uniform01(rng) * (i + 1)))]);
    LossRecord sum;
    for (int start = 0; start < n;) {
        int end = std::min(n, start + bs);
        if (n - end < 2) end = n;  // no singleton tail batch
        std::vector<int> ids(perm.begin() + start, perm.begin() + end);
        BatchLosses l = batch_losses(net, data, ids, rng);
        const double w = static_cast<double>(ids.size()) / n;
        sum.total += w * l.total.item();
        sum.action += w * l.action.item();
        sum.boundary += w * l.boundary.item();
        start = end;
    }
    sum.step = -1;
    return sum;
}

double order_ranking_accuracy(const M2R2Network& net, const PretrainData& data, std::uint64_t seed) {
    ag::NoGradGuard no_grad;
    nn::Rng rng(seed);
    const int n = static_cast<int>(data.windows.size());
    const int d = net.model_config().embed_dim;
    int ranked = 0, total = 0;
    for (int start = 0; start < n; start += 8) {
        std::vector<int> ids;
        std::vector<std::string> own, shuffled;
        for (int w = start; w < std::min(n, start + 8); ++w) {
            auto s = shuffled_order(data.windows[w].ordered_labels, rng);
            if (!s) continue;
            ids.push_back(w);
            own.push_back(data.windows[w].sentence);
            shuffled.push_back(order_sentence(*s));
        }
        if (ids.empty()) continue;
        ForwardOut fw = forward_windows(net, data, ids);
        const auto e_own = net.extractor().encode_text(own);
        const auto e_shuf = net.extractor().encode_text(shuffled);
        const auto c_own = cosine_rows(fw.window_embeddings.data(), e_own.data(), d);
        const auto c_shuf = cosine_rows(fw.window_embeddings.data(), e_shuf.data(), d);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            ranked += c_own[i] > c_shuf[i];
            ++total;
        }
    }
    return total == 0 ? 1.0 : static_cast<double>(ranked) / total;
}

std::string loss_log_csv(const std::vector<LossRecord>& log) {
    std::ostringstream out;
    out << "step,loss_total,loss_action,loss_boundary\n";
    for (const auto& r : log)
        out << r.step << ',' << io::format_double(r.total) << ',' << io::format_double(r.action) << ','
            << io::format_double(r.boundary) << '\n';
    return out.str();
}

void save_network(const fs::path& path, const M2R2Network& net, const PreprocessConfig& preprocess,
                  const NormalizationStats& stats) {
    save_checkpoint(path, net.model_config(), preprocess, stats, json{{"pretrain", net.pretrain_config().to_json()}},
                    net.store());
}

LoadedNetwork load_network(const fs::path& path) {
    LoadedNetwork out;
    out.checkpoint = load_checkpoint(path);
    if (!out.checkpoint.extra.contains("pretrain")) throw SchemaMismatch("checkpoint lacks the pretraining section");
    out.net = std::make_unique<M2R2Network>(out.checkpoint.model,
                                            PretrainConfig::from_json(out.checkpoint.extra.at("pretrain")));
    restore_parameters(out.net->store(), out.checkpoint);
    out.checkpoint.tensors.clear();
    return out;
}

}  // namespace m2r2
