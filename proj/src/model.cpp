// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "m2r2/model.hpp"

#include <bit>
#include <cctype>
#include <cstring>
#include <map>
#include <set>

#include "m2r2/io.hpp"

namespace m2r2 {

using nlohmann::json;

void ModelConfig::validate() const {
    if (embed_dim < 1) throw std::invalid_argument("model: embed_dim must be >= 1");
    if (heads < 1 || embed_dim % heads != 0) throw std::invalid_argument("model: embed_dim must be divisible by heads");
    if (sensors.empty()) throw std::invalid_argument("model: need at least one proprioceptive sensor");
    for (const auto& s : sensors)
        if (s.dim < 1 || s.samples < 1) throw std::invalid_argument("model: sensor '" + s.name + "' has an empty shape");
    if (image_height < 8 || image_width < 8) throw std::invalid_argument("model: images must be at least 8x8");
    if (n_mels < 4 || audio_frames < 1) throw std::invalid_argument("model: spectrogram too small");
    if (text_buckets < 2) throw std::invalid_argument("model: text_buckets must be >= 2");
    if (fusion_mlp_hidden < 0) throw std::invalid_argument("model: fusion_mlp_hidden must be >= 0");
}

json ModelConfig::to_json() const {
    json sensors_doc = json::array();
    for (const auto& s : sensors) sensors_doc.push_back({{"name", s.name}, {"dim", s.dim}, {"samples", s.samples}});
    return json{{"embed_dim", embed_dim},       {"heads", heads},
                {"fusion_mlp_hidden", fusion_mlp_hidden}, {"sensors", sensors_doc},
                {"image_height", image_height}, {"image_width", image_width},
                {"n_mels", n_mels},             {"audio_frames", audio_frames},
                {"text_buckets", text_buckets}};
}

ModelConfig ModelConfig::from_json(const json& doc) {
    ModelConfig c;
    c.embed_dim = doc.value("embed_dim", c.embed_dim);
    c.heads = doc.value("heads", c.heads);
    c.fusion_mlp_hidden = doc.value("fusion_mlp_hidden", c.fusion_mlp_hidden);
    if (doc.contains("sensors"))
        for (const auto& s : doc.at("sensors"))
            c.sensors.push_back({s.at("name").get<std::string>(), s.at("dim").get<int>(), s.at("samples").get<int>()});
    c.image_height = doc.value("image_height", c.image_height);
    c.image_width = doc.value("image_width", c.image_width);
    c.n_mels = doc.value("n_mels", c.n_mels);
    c.audio_frames = doc.value("audio_frames", c.audio_frames);
    c.text_buckets = doc.value("text_buckets", c.text_buckets);
    return c;
}

ModelConfig model_config_for(const Recording& recording, const PreprocessConfig& preprocess, ModelConfig base) {
    base.sensors.clear();
    const int t_s = preprocess.proprio_samples(recording.camera_rate_nominal);
    for (const auto& s : recording.proprio) base.sensors.push_back({s.name, s.dim, t_s});
    if (!recording.frames.empty()) {
        base.image_height = recording.frames.front().height;
        base.image_width = recording.frames.front().width;
    }
    base.n_mels = preprocess.n_mels;
    base.audio_frames = preprocess.audio_frames(preprocess.audio_samples(recording.camera_rate_nominal));
    return base;
}

// ---------------------------------------------------------------------------
// Proprioception

ProprioEncoder::ProprioEncoder(nn::ParamStore& store, const std::string& name, int dim_, int samples_, int embed_dim,
                               nn::Rng& rng)
    : dim(dim_), samples(samples_) {
    projection = store.create_uniform(name + ".projection", dim, embed_dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
    std::vector<double> e(static_cast<std::size_t>(samples) * embed_dim);
    for (auto& v : e) v = 1.0 + nn::uniform(rng, -0.1, 0.1);
    temporal = store.create(name + ".temporal", samples, embed_dim, std::move(e));
}

ag::Tensor encode_proprio(const ag::Tensor& windows, const ProprioEncoder& p) {
    if (windows.cols() != p.dim || windows.rows() % p.samples != 0)
        throw std::invalid_argument("encode_proprio: expected [n*" + std::to_string(p.samples) + ", " +
                                    std::to_string(p.dim) + "] input, got [" + std::to_string(windows.rows()) + ", " +
                                    std::to_string(windows.cols()) + "]");
    return ag::group_mean(ag::mul_tiled(ag::matmul(windows, p.projection), p.temporal), p.samples);
}

// ---------------------------------------------------------------------------
// Modality fusion

ModalityFusion::ModalityFusion(nn::ParamStore& store, const std::string& name, int tokens_, int embed_dim_, int heads,
                               int hidden, nn::Rng& rng)
    : tokens(tokens_), embed_dim(embed_dim_) {
    layer = nn::TransformerLayer(store, name + ".layer", embed_dim, heads, 4 * embed_dim, rng);
    mlp_in = nn::Linear(store, name + ".mlp_in", tokens * embed_dim, hidden, rng);
    mlp_out = nn::Linear(store, name + ".mlp_out", hidden, embed_dim, rng);
}

ag::Tensor fuse_modalities(const std::vector<ag::Tensor>& tokens, const ModalityFusion& p) {
    if (static_cast<int>(tokens.size()) != p.tokens)
        throw std::invalid_argument("fuse_modalities: expected " + std::to_string(p.tokens) + " tokens, got " +
                                    std::to_string(tokens.size()));
    const int n = tokens.front().rows();
    for (const auto& t : tokens)
        if (t.rows() != n || t.cols() != p.embed_dim)
            throw std::invalid_argument("fuse_modalities: token shape mismatch");
    ag::Tensor seq = p.layer(ag::interleave_rows(tokens), p.tokens);
    ag::Tensor flat = ag::reshape(seq, n, p.tokens * p.embed_dim);
    return p.mlp_out(ag::gelu(p.mlp_in(flat)));
}

// ---------------------------------------------------------------------------
// Toy exteroceptive encoders

namespace {

std::vector<nn::Conv2d> conv_stack(nn::ParamStore& store, const std::string& name, ag::Conv2dShape shape,
                                   const std::vector<int>& channels, nn::Rng& rng) {
    std::vector<nn::Conv2d> out;
    for (std::size_t i = 0; i < channels.size(); ++i) {
        out.emplace_back(store, name + ".conv" + std::to_string(i), shape, channels[i], rng);
        shape = ag::Conv2dShape{channels[i], shape.out_height(), shape.out_width(), shape.kernel, shape.stride,
                                shape.padding};
    }
    return out;
}

int flat_size(const nn::Conv2d& last) {
    return last.out_channels * last.shape.out_height() * last.shape.out_width();
}

ag::Tensor run_stack(const std::vector<nn::Conv2d>& convs, const nn::Linear& head, const ag::Tensor& x) {
    ag::Tensor h = x;
    for (const auto& c : convs) h = ag::relu(c(h));
    return head(h);
}

}  // namespace

ImageEncoder::ImageEncoder(nn::ParamStore& store, const std::string& name, int height, int width, int embed_dim,
                           nn::Rng& rng) {
    convs = conv_stack(store, name, ag::Conv2dShape{3, height, width, 3, 2, 1}, {8, 16, 32}, rng);
    head = nn::Linear(store, name + ".head", flat_size(convs.back()), embed_dim, rng);
}

ag::Tensor ImageEncoder::operator()(const ag::Tensor& x) const { return run_stack(convs, head, x); }

AudioEncoder::AudioEncoder(nn::ParamStore& store, const std::string& name, int n_mels, int frames, int embed_dim,
                           nn::Rng& rng) {
    convs = conv_stack(store, name, ag::Conv2dShape{1, n_mels, frames, 3, 2, 1}, {8, 16}, rng);
    head = nn::Linear(store, name + ".head", flat_size(convs.back()), embed_dim, rng);
}

ag::Tensor AudioEncoder::operator()(const ag::Tensor& x) const { return run_stack(convs, head, x); }

std::vector<int> tokenize(const std::string& text, int buckets) {
    std::vector<int> out;
    std::string word;
    int clause = 0;
    auto flush = [&] {
        if (word.empty()) return;
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : word) h = (h ^ c) * 0x100000001b3ULL;
        h = (h ^ static_cast<std::uint64_t>(clause)) * 0x100000001b3ULL;
        out.push_back(static_cast<int>(h % static_cast<std::uint64_t>(buckets)));
        word.clear();
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c))
            word.push_back(static_cast<char>(std::tolower(c)));
        else {
            flush();
            if (ch == '.') ++clause;
        }
    }
    flush();
    return out;
}

TextEncoder::TextEncoder(nn::ParamStore& store, const std::string& name, int buckets_, int embed_dim_, int heads,
                         nn::Rng& rng)
    : buckets(buckets_), embed_dim(embed_dim_) {
    table = store.create_uniform(name + ".table", buckets, embed_dim, 1.0, rng);
    layer = nn::TransformerLayer(store, name + ".layer", embed_dim, heads, 4 * embed_dim, rng);
}

ag::Tensor TextEncoder::operator()(const std::vector<std::string>& sentences) const {
    if (sentences.empty()) throw std::invalid_argument("text encoder: no sentences");
    std::vector<ag::Tensor> rows;
    rows.reserve(sentences.size());
    for (const auto& s : sentences) {
        const auto ids = tokenize(s, buckets);
        if (ids.empty()) throw std::invalid_argument("text encoder: sentence has no tokens");
        const int n = static_cast<int>(ids.size());
        ag::Tensor x = ag::add(ag::gather_rows(table, ids),
                               ag::constant(n, embed_dim, nn::sinusoidal_positions(n, embed_dim)));
        rows.push_back(ag::group_mean(layer(x, n), n));
    }
    return ag::concat_rows(rows);
}

// ---------------------------------------------------------------------------
// Batching

ag::Tensor image_batch(std::span<const AlignedFrame* const> frames) {
    const auto& first = frames.front()->image;
    const int h = first.height, w = first.width, plane = h * w;
    std::vector<double> v(frames.size() * 3 * static_cast<std::size_t>(plane));
    for (std::size_t n = 0; n < frames.size(); ++n) {
        const auto& img = frames[n]->image;
        double* row = v.data() + n * 3 * plane;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) row[c * plane + y * w + x] = img.at(y, x, c) / 127.5 - 1.0;
    }
    return ag::constant(static_cast<int>(frames.size()), 3 * plane, std::move(v));
}

ag::Tensor audio_batch(std::span<const AlignedFrame* const> frames) {
    const int cols = static_cast<int>(frames.front()->spectrogram.data.size());
    std::vector<double> v;
    v.reserve(frames.size() * cols);
    for (const auto* f : frames) v.insert(v.end(), f->spectrogram.data.begin(), f->spectrogram.data.end());
    return ag::constant(static_cast<int>(frames.size()), cols, std::move(v));
}

ag::Tensor proprio_batch(std::span<const AlignedFrame* const> frames, std::size_t sensor) {
    const auto& m0 = frames.front()->proprio[sensor];
    std::vector<double> v;
    v.reserve(frames.size() * m0.data.size());
    for (const auto* f : frames) v.insert(v.end(), f->proprio[sensor].data.begin(), f->proprio[sensor].data.end());
    return ag::constant(static_cast<int>(frames.size()) * m0.rows, m0.cols, std::move(v));
}

// ---------------------------------------------------------------------------

FeatureExtractor::FeatureExtractor(nn::ParamStore& store, const ModelConfig& config, nn::Rng& rng) : config_(config) {
    config_.validate();
    const int d = config_.embed_dim;
    image_ = ImageEncoder(store, "image", config_.image_height, config_.image_width, d, rng);
    audio_ = AudioEncoder(store, "audio", config_.n_mels, config_.audio_frames, d, rng);
    text_ = TextEncoder(store, "text", config_.text_buckets, d, config_.heads, rng);
    for (const auto& s : config_.sensors)
        proprio_.emplace_back(store, "proprio." + s.name, s.dim, s.samples, d, rng);
    fusion_ = ModalityFusion(store, "fusion", config_.token_count(), d, config_.heads, config_.mlp_hidden(), rng);
}

void FeatureExtractor::check_frame(const AlignedFrame& f) const {
    if (f.image.height != config_.image_height || f.image.width != config_.image_width)
        throw SchemaMismatch("image " + std::to_string(f.image.height) + "x" + std::to_string(f.image.width) +
                             " vs model " + std::to_string(config_.image_height) + "x" +
                             std::to_string(config_.image_width));
    if (f.spectrogram.rows != config_.n_mels || f.spectrogram.cols != config_.audio_frames)
        throw SchemaMismatch("spectrogram shape");
    if (f.proprio.size() != config_.sensors.size()) throw SchemaMismatch("sensor count");
    for (std::size_t s = 0; s < f.proprio.size(); ++s)
        if (f.proprio[s].rows != config_.sensors[s].samples || f.proprio[s].cols != config_.sensors[s].dim)
            throw SchemaMismatch("sensor '" + config_.sensors[s].name + "' window shape");
}

ag::Tensor FeatureExtractor::encode_frames(std::span<const AlignedFrame* const> frames) const {
    if (frames.empty()) throw std::invalid_argument("encode_frames: no frames");
    for (const auto* f : frames) check_frame(*f);
    std::vector<ag::Tensor> tokens;
    tokens.push_back(image_(image_batch(frames)));
    tokens.push_back(audio_(audio_batch(frames)));
    for (std::size_t s = 0; s < proprio_.size(); ++s)
        tokens.push_back(encode_proprio(proprio_batch(frames, s), proprio_[s]));
    return fuse_modalities(tokens, fusion_);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'M', '2', 'R', '2', 'C', 'K', 'P', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

}  // namespace

void write_tensor_archive(const fs::path& path, const json& header_fields, const nn::ParamStore& store) {
    json index = json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : store.all()) {
        index.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}, {"offset", offset}});
        offset += t.size();
    }
    json header = header_fields;
    header["format"] = 1;
    header["tensors"] = index;
    const std::string text = header.dump();

    std::vector<std::uint8_t> bytes(sizeof(kMagic) + 8 + text.size() + offset * sizeof(double));
    std::uint8_t* p = bytes.data();
    std::memcpy(p, kMagic, sizeof(kMagic));
    p += sizeof(kMagic);
    const std::uint64_t len = text.size();
    std::memcpy(p, &len, 8);
    p += 8;
    std::memcpy(p, text.data(), text.size());
    p += text.size();
    for (const auto& [name, t] : store.all()) {
        std::memcpy(p, t.data().data(), t.size() * sizeof(double));
        p += t.size() * sizeof(double);
    }
    io::write_atomic(path, bytes);
}

TensorArchive read_tensor_archive(const fs::path& path) {
    const auto bytes = io::read_bytes(path);
    if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
        throw io::IoError(path.string() + ": not a checkpoint file");
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + sizeof(kMagic), 8);
    const std::size_t data_start = sizeof(kMagic) + 8 + len;
    if (data_start > bytes.size()) throw io::IoError(path.string() + ": truncated checkpoint header");
    TensorArchive out;
    try {
        out.header = json::parse(bytes.begin() + sizeof(kMagic) + 8, bytes.begin() + static_cast<std::ptrdiff_t>(data_start));
    } catch (const json::exception& e) {
        throw io::IoError(path.string() + ": bad checkpoint header: " + e.what());
    }
    if (!out.header.contains("tensors")) throw io::IoError(path.string() + ": checkpoint header lacks a tensor index");
    const std::size_t n_values = (bytes.size() - data_start) / sizeof(double);
    for (const auto& e : out.header.at("tensors")) {
        TensorEntry entry;
        entry.name = e.at("name").get<std::string>();
        entry.rows = e.at("rows").get<int>();
        entry.cols = e.at("cols").get<int>();
        const auto off = e.at("offset").get<std::size_t>();
        const std::size_t count = static_cast<std::size_t>(entry.rows) * entry.cols;
        if (off + count > n_values) throw io::IoError(path.string() + ": truncated tensor '" + entry.name + "'");
        entry.values.resize(count);
        std::memcpy(entry.values.data(), bytes.data() + data_start + off * sizeof(double), count * sizeof(double));
        out.tensors.push_back(std::move(entry));
    }
    out.header.erase("tensors");
    return out;
}

void restore_parameters(nn::ParamStore& store, const std::vector<TensorEntry>& tensors) {
    std::set<std::string> seen;
    for (const auto& e : tensors) {
        if (!store.contains(e.name)) throw SchemaMismatch("checkpoint has unexpected tensor '" + e.name + "'");
        auto& t = store.get(e.name);
        if (t.rows() != e.rows || t.cols() != e.cols)
            throw SchemaMismatch("tensor '" + e.name + "' is " + std::to_string(e.rows) + "x" + std::to_string(e.cols) +
                                 ", model expects " + std::to_string(t.rows()) + "x" + std::to_string(t.cols()));
        std::copy(e.values.begin(), e.values.end(), t.mutable_data().begin());
        seen.insert(e.name);
    }
    for (const auto& [name, t] : store.all())
        if (!seen.count(name)) throw SchemaMismatch("checkpoint lacks tensor '" + name + "'");
}

void save_checkpoint(const fs::path& path, const ModelConfig& model, const PreprocessConfig& preprocess,
                     const NormalizationStats& stats, const json& extra, const nn::ParamStore& store) {
    write_tensor_archive(path,
                         json{{"kind", "m2r2"},
                              {"model", model.to_json()},
                              {"preprocess", preprocess.to_json()},
                              {"stats", stats.to_json()},
                              {"extra", extra}},
                         store);
}

Checkpoint load_checkpoint(const fs::path& path) {
    TensorArchive archive = read_tensor_archive(path);
    const json& h = archive.header;
    if (h.value("kind", std::string()) != "m2r2")
        throw SchemaMismatch(path.string() + " is not a feature extractor checkpoint (kind '" +
                             h.value("kind", std::string()) + "')");
    Checkpoint ck;
    ck.model = ModelConfig::from_json(h.at("model"));
    ck.preprocess = PreprocessConfig::from_json(h.at("preprocess"));
    ck.stats = NormalizationStats::from_json(h.at("stats"));
    ck.extra = h.value("extra", json::object());
    ck.tensors = std::move(archive.tensors);
    return ck;
}

void restore_parameters(nn::ParamStore& store, const Checkpoint& ck) { restore_parameters(store, ck.tensors); }

void check_schema(const Checkpoint& ck, const ModelConfig& expected, const PreprocessConfig& preprocess) {
    if (!(ck.preprocess.to_json() == preprocess.to_json()))
        throw SchemaMismatch("preprocessing config differs from the checkpoint");
    if (ck.model.sensors.size() != expected.sensors.size())
        throw SchemaMismatch("checkpoint has " + std::to_string(ck.model.sensors.size()) + " sensors, data has " +
                             std::to_string(expected.sensors.size()));
    for (std::size_t s = 0; s < expected.sensors.size(); ++s)
        if (!(ck.model.sensors[s] == expected.sensors[s]))
            throw SchemaMismatch("sensor " + std::to_string(s) + " is '" + ck.model.sensors[s].name + "' (" +
                                 std::to_string(ck.model.sensors[s].dim) + "-D) in the checkpoint but '" +
                                 expected.sensors[s].name + "' (" + std::to_string(expected.sensors[s].dim) +
                                 "-D) in the data");
    if (!(ck.model == expected)) throw SchemaMismatch("model config differs from the data-derived config");
}

}  // namespace m2r2
