// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "m2r2/features_head.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace m2r2 {

using nlohmann::json;

FeatureMode parse_feature_mode(const std::string& name) {
    if (name == "fused" || name == "x") return FeatureMode::kFused;
    if (name == "temporal" || name == "x_hat") return FeatureMode::kTemporal;
    throw std::invalid_argument("unknown feature mode '" + name + "' (expected fused or temporal)");
}

std::string to_string(FeatureMode mode) { return mode == FeatureMode::kFused ? "fused" : "temporal"; }

ExtractionContext ExtractionContext::load(const fs::path& checkpoint) {
    ExtractionContext ctx;
    ctx.network = load_network(checkpoint);
    ctx.fingerprint = io::fnv1a_hex(io::read_bytes(checkpoint));
    return ctx;
}

Matrix extract_features(const M2R2Network& net, const std::vector<AlignedFrame>& frames, FeatureMode mode, int chunk) {
    if (frames.empty()) throw std::invalid_argument("extract_features: no frames");
    if (chunk < 1) throw std::invalid_argument("extract_features: chunk must be >= 1");
    ag::NoGradGuard no_grad;
    const int n = static_cast<int>(frames.size());
    const int d = net.model_config().embed_dim;
    std::vector<double> x;
    x.reserve(static_cast<std::size_t>(n) * d);
    for (int begin = 0; begin < n; begin += chunk) {
        const int count = std::min(chunk, n - begin);
        std::vector<const AlignedFrame*> ptrs;
        for (int i = begin; i < begin + count; ++i) ptrs.push_back(&frames[i]);
        const ag::Tensor e = net.extractor().encode_frames(ptrs);
        x.insert(x.end(), e.data().begin(), e.data().end());
    }
    if (mode == FeatureMode::kFused) return Matrix(n, d, std::move(x));
    const ag::Tensor h = fusion_transformer(ag::constant(n, d, std::move(x)), n, net.heads().layers);
    return Matrix(n, d, std::vector<double>(h.data().begin(), h.data().end()));
}

FeatureSequence extract_recording(const ExtractionContext& ctx, const Recording& recording, FeatureMode mode,
                                  int workers) {
    const auto& ck = ctx.network.checkpoint;
    const ModelConfig expected = model_config_for(recording, ck.preprocess, ck.model);
    try {
        check_schema(ck, expected, ck.preprocess);
    } catch (const SchemaMismatch& e) {
        throw SchemaMismatch("recording '" + recording.id + "': " + e.what());
    }
    const auto frames = preprocess_recording(recording, ck.preprocess, ck.stats, workers);
    FeatureSequence out;
    out.recording_id = recording.id;
    out.x = extract_features(*ctx.network.net, frames, mode);
    out.checkpoint_fingerprint = ctx.fingerprint;
    out.mode = mode;
    return out;
}

void write_features(const fs::path& dir, const FeatureSequence& f, const std::string& config_hash) {
    fs::create_directories(dir);
    io::write_atomic(dir / (f.recording_id + ".f32"), io::encode_f32(f.x.data));
    io::write_json_atomic(dir / (f.recording_id + ".json"),
                          json{{"recording_id", f.recording_id},
                               {"shape", {f.x.rows, f.x.cols}},
                               {"embed_dim", f.x.cols},
                               {"mode", to_string(f.mode)},
                               {"checkpoint_fingerprint", f.checkpoint_fingerprint},
                               {"config_hash", config_hash}});
}

FeatureSequence read_features(const fs::path& dir, const std::string& recording_id) {
    const auto meta = io::read_json(dir / (recording_id + ".json"));
    FeatureSequence f;
    f.recording_id = meta.at("recording_id").get<std::string>();
    if (f.recording_id != recording_id)
        throw io::IoError(dir.string() + ": sidecar names recording '" + f.recording_id + "', expected '" +
                          recording_id + "'");
    const int rows = meta.at("shape").at(0).get<int>();
    const int cols = meta.at("shape").at(1).get<int>();
    auto values = io::decode_f32(io::read_bytes(dir / (recording_id + ".f32")));
    if (values.size() != static_cast<std::size_t>(rows) * cols)
        throw io::IoError((dir / (recording_id + ".f32")).string() + ": expected " + std::to_string(rows) + "x" +
                          std::to_string(cols) + " values, found " + std::to_string(values.size()));
    f.x = Matrix(rows, cols, std::move(values));
    f.checkpoint_fingerprint = meta.value("checkpoint_fingerprint", "");
    f.mode = parse_feature_mode(meta.value("mode", "fused"));
    return f;
}

// ---------------------------------------------------------------------------
// Head

void HeadConfig::validate() const {
    if (stages < 1) throw std::invalid_argument("head: stages must be >= 1");
    if (layers < 1 || layers > 16) throw std::invalid_argument("head: layers must be in [1, 16]");
    if (channels < 1) throw std::invalid_argument("head: channels must be >= 1");
    if (!(smoothing_weight >= 0.0)) throw std::invalid_argument("head: smoothing_weight must be >= 0");
    if (!(smoothing_clamp > 0.0)) throw std::invalid_argument("head: smoothing_clamp must be > 0");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("head: learning_rate must be > 0");
    if (epochs < 0) throw std::invalid_argument("head: epochs must be >= 0");
}

json HeadConfig::to_json() const {
    return json{{"stages", stages},
                {"layers", layers},
                {"channels", channels},
                {"smoothing_weight", smoothing_weight},
                {"smoothing_clamp", smoothing_clamp},
                {"learning_rate", learning_rate},
                {"weight_decay", weight_decay},
                {"epochs", epochs},
                {"granularity", to_string(granularity)},
                {"seed", seed}};
}

HeadConfig HeadConfig::from_json(const json& doc) {
    HeadConfig c;
    c.stages = doc.value("stages", c.stages);
    c.layers = doc.value("layers", c.layers);
    c.channels = doc.value("channels", c.channels);
    c.smoothing_weight = doc.value("smoothing_weight", c.smoothing_weight);
    c.smoothing_clamp = doc.value("smoothing_clamp", c.smoothing_clamp);
    c.learning_rate = doc.value("learning_rate", c.learning_rate);
    c.weight_decay = doc.value("weight_decay", c.weight_decay);
    c.epochs = doc.value("epochs", c.epochs);
    c.granularity = parse_granularity(doc.value("granularity", to_string(c.granularity)));
    c.seed = doc.value("seed", c.seed);
    return c;
}

SegmentationHead::SegmentationHead(const HeadConfig& config, int input_dim, int classes)
    : config_(config), input_dim_(input_dim), classes_(classes) {
    config_.validate();
    if (input_dim < 1) throw std::invalid_argument("head: input dimension must be >= 1");
    if (classes < 2) throw std::invalid_argument("head: need at least 2 classes");
    nn::Rng rng(nn::mix_seed(config.seed, 0x4ead));
    const int c = config.channels;
    for (int s = 0; s < config.stages; ++s) {
        const std::string p = "head.stage" + std::to_string(s);
        Stage stage;
        stage.input = nn::Linear(store_, p + ".in", s == 0 ? input_dim : classes, c, rng);
        for (int l = 0; l < config.layers; ++l) {
            const std::string q = p + ".layer" + std::to_string(l);
            Layer layer;
            layer.dilation = 1 << l;
            layer.conv = nn::Linear(store_, q + ".conv", 3 * c, c, rng);
            layer.mix = nn::Linear(store_, q + ".mix", c, c, rng);
            stage.layers.push_back(std::move(layer));
        }
        stage.output = nn::Linear(store_, p + ".out", c, classes, rng);
        stages_.push_back(std::move(stage));
    }
}

std::vector<ag::Tensor> SegmentationHead::forward(const ag::Tensor& features) const {
    if (features.cols() != input_dim_)
        throw std::invalid_argument("head: features have " + std::to_string(features.cols()) + " columns, expected " +
                                    std::to_string(input_dim_));
    std::vector<ag::Tensor> out;
    ag::Tensor in = features;
    for (const auto& stage : stages_) {
        ag::Tensor h = stage.input(in);
        for (const auto& layer : stage.layers) {
            const int d = layer.dilation;
            const ag::Tensor taps = ag::concat_cols({ag::shift_rows(h, d), h, ag::shift_rows(h, -d)});
            h = ag::add(h, layer.mix(ag::relu(layer.conv(taps))));
        }
        const ag::Tensor logits = stage.output(h);
        out.push_back(logits);
        in = ag::softmax_rows(logits);
    }
    return out;
}

ag::Tensor head_loss(const std::vector<ag::Tensor>& stage_logits, const std::vector<int>& labels,
                     const HeadConfig& config) {
    if (stage_logits.empty()) throw std::invalid_argument("head_loss: no stages");
    const int t = stage_logits.front().rows();
    const int c = stage_logits.front().cols();
    if (static_cast<int>(labels.size()) != t)
        throw std::invalid_argument("head_loss: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(t) + " frames");
    const auto labeled = std::count_if(labels.begin(), labels.end(), [](int l) { return l >= 0; });
    std::vector<double> pick(static_cast<std::size_t>(t) * c, 0.0);
    for (int i = 0; i < t; ++i) {
        if (labels[i] < 0) continue;
        if (labels[i] >= c)
            throw std::invalid_argument("head_loss: label " + std::to_string(labels[i]) + " out of range");
        pick[static_cast<std::size_t>(i) * c + labels[i]] = -1.0 / static_cast<double>(labeled);
    }
    const ag::Tensor mask = ag::constant(t, c, std::move(pick));
    ag::Tensor total;
    for (const auto& logits : stage_logits) {
        const ag::Tensor lp = ag::log_softmax_rows(logits);
        ag::Tensor term = ag::scale(ag::truncated_smoothing(lp, config.smoothing_clamp), config.smoothing_weight);
        if (labeled > 0) term = ag::add(ag::sum_all(ag::mul(lp, mask)), term);
        total = total.defined() ? ag::add(total, term) : term;
    }
    return total;
}

std::vector<HeadEpoch> train_head(SegmentationHead& head, const std::vector<HeadExample>& examples,
                                  const std::function<void(const HeadEpoch&)>& on_epoch) {
    if (examples.empty()) throw std::invalid_argument("train_head: no training recordings");
    for (const auto& ex : examples) {
        if (ex.features.rows != static_cast<int>(ex.labels.size()))
            throw std::invalid_argument("train_head: recording '" + ex.recording_id + "' has " +
                                        std::to_string(ex.features.rows) + " feature rows but " +
                                        std::to_string(ex.labels.size()) + " labels");
        if (ex.features.cols != head.input_dim())
            throw std::invalid_argument("train_head: recording '" + ex.recording_id + "' has " +
                                        std::to_string(ex.features.cols) + "-D features, head expects " +
                                        std::to_string(head.input_dim()));
    }
    const auto& cfg = head.config();
    nn::AdamWConfig opt_cfg;
    opt_cfg.learning_rate = cfg.learning_rate;
    opt_cfg.weight_decay = cfg.weight_decay;
    nn::AdamW opt(head.store(), opt_cfg);
    nn::Rng rng(nn::mix_seed(cfg.seed, 0x7a1));
    std::vector<int> order(examples.size());
    std::vector<HeadEpoch> log;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(nn::uniform01(rng) * static_cast<double>(i));
            std::swap(order[i - 1], order[std::min(j, i - 1)]);
        }
        double sum = 0.0;
        for (int k : order) {
            const auto& ex = examples[k];
            head.store().zero_grad();
            const ag::Tensor loss =
                head_loss(head.forward(ag::constant(ex.features.rows, ex.features.cols, ex.features.data)), ex.labels,
                          cfg);
            const double v = loss.item();
            if (!std::isfinite(v))
                throw NonFiniteLoss("head training: non-finite loss on recording '" + ex.recording_id + "' in epoch " +
                                    std::to_string(epoch));
            ag::backward(loss);
            opt.step();
            sum += v;
        }
        HeadEpoch rec{epoch, sum / static_cast<double>(examples.size())};
        log.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    return log;
}

std::vector<int> argmax_rows(const Matrix& scores) {
    std::vector<int> out(scores.rows, 0);
    for (int r = 0; r < scores.rows; ++r) {
        const auto row = scores.row(r);
        out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

Matrix head_logits(const SegmentationHead& head, const Matrix& features) {
    ag::NoGradGuard no_grad;
    const auto stages = head.forward(ag::constant(features.rows, features.cols, features.data));
    const auto& last = stages.back();
    return Matrix(last.rows(), last.cols(), std::vector<double>(last.data().begin(), last.data().end()));
}

std::vector<int> predict(const SegmentationHead& head, const Matrix& features) {
    return argmax_rows(head_logits(head, features));
}

void save_head(const fs::path& path, const SegmentationHead& head, const LabelSet& labels, const json& extra) {
    write_tensor_archive(path,
                         json{{"kind", "head"},
                              {"head", head.config().to_json()},
                              {"input_dim", head.input_dim()},
                              {"classes", head.classes()},
                              {"labels", labels.to_json()},
                              {"extra", extra}},
                         head.store());
}

LoadedHead load_head(const fs::path& path) {
    auto archive = read_tensor_archive(path);
    const auto& h = archive.header;
    if (h.value("kind", "") != "head") throw SchemaMismatch(path.string() + " is not a segmentation head file");
    LoadedHead out;
    out.head = std::make_unique<SegmentationHead>(HeadConfig::from_json(h.at("head")), h.at("input_dim").get<int>(),
                                                  h.at("classes").get<int>());
    restore_parameters(out.head->store(), archive.tensors);
    out.labels = LabelSet::from_json(h.at("labels"));
    out.extra = h.value("extra", json::object());
    if (out.labels.size(out.head->config().granularity) != static_cast<std::size_t>(out.head->classes()))
        throw SchemaMismatch(path.string() + ": label set size does not match the head's class count");
    return out;
}

std::string predictions_csv(const std::vector<int>& labels, const std::vector<std::string>& names) {
    std::ostringstream os;
    os << "frame,label\n";
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= static_cast<int>(names.size()))
            throw std::invalid_argument("predictions_csv: label index " + std::to_string(labels[i]) + " out of range");
        os << i << ',' << names[labels[i]] << '\n';
    }
    return os.str();
}

std::vector<int> parse_predictions_csv(const std::string& text, const std::vector<std::string>& names) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "frame,label")
        throw io::IoError("predictions: missing 'frame,label' header");
    std::vector<int> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto fields = io::split_csv_line(line);
        if (fields.size() != 2) throw io::IoError("predictions: malformed line '" + line + "'");
        if (io::parse_int(fields[0], "predictions frame") != static_cast<long long>(out.size()))
            throw io::IoError("predictions: frames out of order at '" + line + "'");
        const auto it = std::find(names.begin(), names.end(), fields[1]);
        if (it == names.end()) throw io::IoError("predictions: unknown label '" + fields[1] + "'");
        out.push_back(static_cast<int>(it - names.begin()));
    }
    return out;
}

}  // namespace m2r2
