// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "m2r2/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <ostream>
#include <thread>

#include <CLI11.hpp>

#include "m2r2/metrics.hpp"

namespace m2r2::cli {

using nlohmann::json;

namespace {

// Stage failure that is not a configuration problem: exit code 2.
class StageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

json without_seed(json doc) {
    doc.erase("seed");
    return doc;
}

}  // namespace

json default_config() {
    const ModelConfig m;
    return json{{"seed", 0},
                {"workers", 1},
                {"data", {{"dir", ""}, {"train", json::array()}, {"test", json::array()}, {"test_count", 5}}},
                {"synth", SynthConfig{}.to_json()},
                {"preprocess", PreprocessConfig{}.to_json()},
                {"sampler", without_seed(SamplerConfig{}.to_json())},
                {"model",
                 {{"embed_dim", m.embed_dim},
                  {"heads", m.heads},
                  {"fusion_mlp_hidden", m.fusion_mlp_hidden},
                  {"text_buckets", m.text_buckets}}},
                {"pretrain", without_seed(PretrainConfig{}.to_json())},
                {"features", {{"mode", to_string(FeatureMode::kFused)}}},
                {"head", without_seed(HeadConfig{}.to_json())},
                {"metrics", {{"t_e", 10}}}};
}

void merge_checked(json& base, const json& patch, const std::string& where) {
    if (!patch.is_object()) throw ConfigError("config" + (where.empty() ? "" : " section '" + where + "'") +
                                              " must be a JSON object");
    for (const auto& [key, value] : patch.items()) {
        const std::string path = where.empty() ? key : where + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
        json& target = base[key];
        if (target.is_object()) {
            merge_checked(target, value, path);
            continue;
        }
        const bool ok = (target.is_number() && value.is_number()) || (target.is_string() && value.is_string()) ||
                        (target.is_boolean() && value.is_boolean()) || (target.is_array() && value.is_array());
        if (!ok) throw ConfigError("config key '" + path + "' expects a " + target.type_name() + ", got " +
                                   value.type_name());
        if (target.is_number_integer() && !value.is_number_integer())
            throw ConfigError("config key '" + path + "' expects an integer");
        if (target.is_number_unsigned() && value.is_number_integer() && value.get<long long>() < 0)
            throw ConfigError("config key '" + path + "' must be non-negative");
        target = value;
    }
}

void apply_override(json& doc, const std::string& dotted_key, const std::string& value) {
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;
    json patch = parsed;
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (std::size_t dot; (dot = dotted_key.find('.', start)) != std::string::npos; start = dot + 1)
        parts.push_back(dotted_key.substr(start, dot - start));
    parts.push_back(dotted_key.substr(start));
    for (const auto& p : parts)
        if (p.empty()) throw ConfigError("malformed override key '" + dotted_key + "'");
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    // A string that happened to look like a number for a string key.
    const json* target = &doc;
    for (const auto& p : parts) {
        if (!target->is_object() || !target->contains(p)) break;
        target = &target->at(p);
    }
    if (target->is_string() && !parsed.is_string()) {
        patch = value;
        for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    }
    merge_checked(doc, patch);
}

RunConfig RunConfig::from_json(const json& doc, const fs::path& out) {
    RunConfig c;
    c.doc = doc;
    c.out = out;
    try {
        c.seed = doc.at("seed").get<std::uint64_t>();
        c.workers = doc.at("workers").get<int>();
        if (c.workers < 1) throw std::invalid_argument("workers must be >= 1");
        const auto& data = doc.at("data");
        const std::string dir = data.at("dir").get<std::string>();
        c.data_dir = dir.empty() ? out / "data" : fs::path(dir);
        c.train_ids = data.at("train").get<std::vector<std::string>>();
        c.test_ids = data.at("test").get<std::vector<std::string>>();
        c.test_count = data.at("test_count").get<int>();
        if (c.test_count < 0) throw std::invalid_argument("data.test_count must be >= 0");
        c.synth = SynthConfig::from_json(doc.at("synth"));
        c.synth.validate();
        c.preprocess = PreprocessConfig::from_json(doc.at("preprocess"));
        c.preprocess.validate();
        c.sampler = SamplerConfig::from_json(doc.at("sampler"));
        c.sampler.seed = nn::mix_seed(c.seed, 0x5a);
        c.sampler.validate();
        c.model = ModelConfig::from_json(doc.at("model"));
        if (c.model.embed_dim < 1 || c.model.heads < 1 || c.model.embed_dim % c.model.heads != 0)
            throw std::invalid_argument("model.embed_dim must be a positive multiple of model.heads");
        c.pretrain = PretrainConfig::from_json(doc.at("pretrain"));
        c.pretrain.seed = nn::mix_seed(c.seed, 0x70);
        c.pretrain.validate();
        c.feature_mode = parse_feature_mode(doc.at("features").at("mode").get<std::string>());
        c.head = HeadConfig::from_json(doc.at("head"));
        c.head.seed = nn::mix_seed(c.seed, 0x4e);
        c.head.validate();
        c.t_e = doc.at("metrics").at("t_e").get<int>();
        if (c.t_e < 0) throw std::invalid_argument("metrics.t_e must be >= 0");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    return c;
}

RunConfig load_run_config(const std::optional<fs::path>& config_file, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed, std::optional<int> workers, const fs::path& out) {
    json doc = default_config();
    if (config_file) {
        if (!fs::exists(*config_file)) throw ConfigError("config file not found: " + config_file->string());
        json file;
        try {
            file = io::read_json(*config_file);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("cannot read config: ") + e.what());
        }
        merge_checked(doc, file);
    }
    if (seed) doc["seed"] = *seed;
    if (workers) doc["workers"] = *workers;
    for (std::size_t i = 0; i < overrides.size(); ++i) {
        const std::string& arg = overrides[i];
        if (arg.rfind("--", 0) != 0 || arg.size() <= 2) throw ConfigError("unexpected argument '" + arg + "'");
        std::string key = arg.substr(2);
        std::string value;
        if (const auto eq = key.find('='); eq != std::string::npos) {
            value = key.substr(eq + 1);
            key = key.substr(0, eq);
        } else {
            if (i + 1 >= overrides.size()) throw ConfigError("override '" + arg + "' needs a value");
            value = overrides[++i];
        }
        if (key.find('.') == std::string::npos) throw ConfigError("unknown option '--" + key + "'");
        apply_override(doc, key, value);
    }
    return RunConfig::from_json(doc, out);
}

std::string stage_config_hash(const RunConfig& c, const std::string& stage) {
    const auto& d = c.doc;
    json parts;
    if (stage == "synth") {
        parts = {{"synth", d.at("synth")}, {"seed", c.seed}};
    } else if (stage == "stats") {
        parts = {{"data", d.at("data")}, {"preprocess", d.at("preprocess")}};
    } else if (stage == "pretrain") {
        parts = {{"up", stage_config_hash(c, "stats")}, {"sampler", d.at("sampler")}, {"model", d.at("model")},
                 {"pretrain", d.at("pretrain")},        {"seed", c.seed}};
    } else if (stage == "extract") {
        parts = {{"up", stage_config_hash(c, "pretrain")}, {"features", d.at("features")}};
    } else if (stage == "train-head") {
        parts = {{"up", stage_config_hash(c, "extract")}, {"head", d.at("head")}, {"seed", c.seed}};
    } else if (stage == "eval") {
        parts = {{"up", stage_config_hash(c, "train-head")}, {"metrics", d.at("metrics")}};
    } else if (stage == "report") {
        parts = {{"up", stage_config_hash(c, "eval")}};
    } else {
        throw std::invalid_argument("unknown stage '" + stage + "'");
    }
    return io::fnv1a_hex(stage + ":" + parts.dump());
}

Split split_recordings(const RunConfig& c, const std::vector<std::string>& all) {
    std::vector<std::string> ids = all;
    std::sort(ids.begin(), ids.end());
    auto require_known = [&](const std::vector<std::string>& v, const char* which) {
        for (const auto& id : v)
            if (!std::binary_search(ids.begin(), ids.end(), id))
                throw ConfigError(std::string("data.") + which + " names unknown recording '" + id + "'");
    };
    Split s;
    if (!c.train_ids.empty() || !c.test_ids.empty()) {
        require_known(c.train_ids, "train");
        require_known(c.test_ids, "test");
        s.train = c.train_ids;
        s.test = c.test_ids;
        if (s.train.empty())
            for (const auto& id : ids)
                if (std::find(s.test.begin(), s.test.end(), id) == s.test.end()) s.train.push_back(id);
    } else {
        if (static_cast<int>(ids.size()) <= c.test_count)
            throw ConfigError("data has " + std::to_string(ids.size()) + " recordings, not enough for " +
                              std::to_string(c.test_count) + " test recordings plus training data");
        const auto cut = ids.end() - c.test_count;
        s.train.assign(ids.begin(), cut);
        s.test.assign(cut, ids.end());
    }
    if (s.train.empty()) throw ConfigError("empty training split");
    return s;
}

namespace {

void hsv_to_rgb(double h, double s, double v, std::uint8_t* rgb) {
    const double c = v * s;
    const double hp = std::fmod(h * 6.0, 6.0);
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(hp)) {
        case 0: r = c; g = x; break;
        case 1: r = x; g = c; break;
        case 2: g = c; b = x; break;
        case 3: g = x; b = c; break;
        case 4: r = x; b = c; break;
        default: r = c; b = x; break;
    }
    const double m = v - c;
    rgb[0] = static_cast<std::uint8_t>(std::lround(255.0 * (r + m)));
    rgb[1] = static_cast<std::uint8_t>(std::lround(255.0 * (g + m)));
    rgb[2] = static_cast<std::uint8_t>(std::lround(255.0 * (b + m)));
}

void label_color(int label, std::uint8_t* rgb) {
    if (label < 0) {
        rgb[0] = rgb[1] = rgb[2] = 160;
        return;
    }
    // Golden-ratio hue steps keep neighbouring indices apart.
    hsv_to_rgb(std::fmod(0.61803398875 * label, 1.0), 0.65, 0.9, rgb);
}

}  // namespace

io::RgbImage timeline_image(const std::vector<int>& predicted, const std::vector<int>& gt, int frame_width,
                            int bar_height) {
    if (predicted.size() != gt.size() || gt.empty())
        throw std::invalid_argument("timeline: prediction and ground truth must be non-empty and of equal length");
    const int gap = 4, strip = 6;
    io::RgbImage img;
    img.width = static_cast<int>(gt.size()) * frame_width;
    img.height = 2 * bar_height + 2 * gap + strip;
    img.pixels.assign(static_cast<std::size_t>(img.width) * img.height * 3, 255);
    auto fill = [&](int y0, int y1, int t, const std::uint8_t* rgb) {
        for (int y = y0; y < y1; ++y)
            for (int x = t * frame_width; x < (t + 1) * frame_width; ++x)
                std::copy(rgb, rgb + 3, &img.pixels[(static_cast<std::size_t>(y) * img.width + x) * 3]);
    };
    const std::uint8_t red[3] = {200, 30, 30};
    for (int t = 0; t < static_cast<int>(gt.size()); ++t) {
        std::uint8_t rgb[3];
        label_color(gt[t], rgb);
        fill(0, bar_height, t, rgb);
        label_color(predicted[t], rgb);
        fill(bar_height + gap, 2 * bar_height + gap, t, rgb);
        // Error strip under the bars.
        if (predicted[t] != gt[t]) fill(2 * bar_height + 2 * gap, img.height, t, red);
    }
    return img;
}

// ---------------------------------------------------------------------------
// Stages

namespace {

struct Context {
    RunConfig config;
    std::ostream& out;
    std::ostream& err;
};

std::string file_hash(const fs::path& p) { return io::fnv1a_hex(io::read_bytes(p)); }

// Hash over every file below `dir`, in path order.
std::string tree_hash(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
    std::sort(files.begin(), files.end());
    std::string acc;
    for (const auto& f : files) acc += f.generic_string() + '\0' + file_hash(dir / f) + '\n';
    return io::fnv1a_hex(acc);
}

// Output directory of each stage; its manifest.json sits there too.
fs::path stage_dir(const Context& ctx, const std::string& stage) {
    static const std::map<std::string, std::string> dirs{{"extract", "features"}, {"train-head", "head"}};
    const auto it = dirs.find(stage);
    return ctx.config.out / (it == dirs.end() ? stage : it->second);
}

void require_exists(const fs::path& p, const std::string& what, const std::string& producer) {
    if (!fs::exists(p))
        throw StageError("missing input: " + what + " (" + p.string() + ")" +
                         (producer.empty() ? "" : "; run '" + producer + "' first"));
}

// Confirms that the upstream stage ran with the configuration we have now.
void check_upstream(const Context& ctx, const std::string& upstream) {
    const fs::path manifest = stage_dir(ctx, upstream) / "manifest.json";
    require_exists(manifest, upstream + " manifest", upstream);
    const auto doc = io::read_json(manifest);
    const std::string recorded = doc.value("config_hash", "");
    const std::string expected = stage_config_hash(ctx.config, upstream);
    if (recorded != expected)
        throw StageError("config hash mismatch: '" + upstream + "' outputs were produced with config " + recorded +
                         ", the current config gives " + expected + "; rerun '" + upstream + "'");
}

void write_manifest(const Context& ctx, const std::string& stage, const std::map<std::string, std::string>& inputs,
                    const std::vector<fs::path>& outputs) {
    json outs = json::object();
    for (const auto& p : outputs) outs[fs::relative(p, ctx.config.out).generic_string()] = file_hash(p);
    json doc{{"stage", stage},
             {"config_hash", stage_config_hash(ctx.config, stage)},
             {"seed", ctx.config.seed},
             {"inputs", inputs},
             {"outputs", outs}};
    io::write_json_atomic(stage_dir(ctx, stage) / "manifest.json", doc);
}

std::vector<std::string> recording_ids(const fs::path& data_dir) {
    require_exists(data_dir, "dataset directory", "synth");
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(data_dir))
        if (e.is_directory() && fs::exists(e.path() / "meta.json")) ids.push_back(e.path().filename().string());
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw StageError("no recordings found in " + data_dir.string());
    return ids;
}

std::vector<Recording> load_all(const fs::path& data_dir, const std::vector<std::string>& ids) {
    std::vector<Recording> out;
    for (const auto& id : ids) out.push_back(load_recording(data_dir / id));
    return out;
}

LabelSet shared_labels(const std::vector<Recording>& recs) {
    for (const auto& r : recs)
        if (!(r.labels == recs.front().labels))
            throw StageError("recording '" + r.id + "' uses a different label vocabulary than '" +
                             recs.front().id + "'");
    return recs.front().labels;
}

int cmd_synth(Context& ctx) {
    const auto& c = ctx.config;
    fs::create_directories(c.data_dir);
    const auto recs = generate_synthetic_dataset(c.synth, c.seed, c.data_dir);
    ctx.err << "synth: wrote " << recs.size() << " recordings to " << c.data_dir.string() << "\n";
    fs::create_directories(stage_dir(ctx, "synth"));
    io::write_json_atomic(stage_dir(ctx, "synth") / "dataset.json",
                          json{{"synth", c.synth.to_json()}, {"seed", c.seed}, {"data_fingerprint", tree_hash(c.data_dir)}});
    write_manifest(ctx, "synth", {}, {stage_dir(ctx, "synth") / "dataset.json"});
    return kExitOk;
}

int cmd_stats(Context& ctx) {
    const auto& c = ctx.config;
    const auto split = split_recordings(c, recording_ids(c.data_dir));
    const auto stats = compute_normalization_stats(load_all(c.data_dir, split.train), c.preprocess);
    const fs::path dir = stage_dir(ctx, "stats");
    fs::create_directories(dir);
    save_stats(stats, dir / "stats.json");
    io::write_json_atomic(dir / "split.json", json{{"train", split.train}, {"test", split.test}});
    write_manifest(ctx, "stats", {{"data", tree_hash(c.data_dir)}}, {dir / "stats.json", dir / "split.json"});
    ctx.err << "stats: " << split.train.size() << " training recordings\n";
    return kExitOk;
}

Split read_split(const Context& ctx) {
    const fs::path p = stage_dir(ctx, "stats") / "split.json";
    require_exists(p, "split", "stats");
    const auto doc = io::read_json(p);
    return {doc.at("train").get<std::vector<std::string>>(), doc.at("test").get<std::vector<std::string>>()};
}

int cmd_pretrain(Context& ctx) {
    const auto& c = ctx.config;
    check_upstream(ctx, "stats");
    const fs::path stats_path = stage_dir(ctx, "stats") / "stats.json";
    const auto stats = load_stats(stats_path);
    const auto split = read_split(ctx);
    const auto train = load_all(c.data_dir, split.train);
    const ModelConfig model = model_config_for(train.front(), c.preprocess, c.model);
    const auto data = build_pretrain_data(train, c.preprocess, stats, c.sampler, c.workers);
    M2R2Network net(model, c.pretrain);
    const int every = std::max(1, c.pretrain.steps / 20);
    const auto log = pretrain(net, data, [&](const LossRecord& r) {
        if (r.step % every == 0 || r.step + 1 == c.pretrain.steps)
            ctx.err << "pretrain: step " << r.step << " total " << io::format_double(r.total) << " action "
                    << io::format_double(r.action) << " boundary " << io::format_double(r.boundary) << "\n";
    });
    const fs::path dir = stage_dir(ctx, "pretrain");
    fs::create_directories(dir);
    save_network(dir / "checkpoint.m2r2", net, c.preprocess, stats);
    io::write_text_atomic(dir / "loss_log.csv", loss_log_csv(log));
    write_manifest(ctx, "pretrain", {{"stats", file_hash(stats_path)}, {"data", tree_hash(c.data_dir)}},
                   {dir / "checkpoint.m2r2", dir / "loss_log.csv"});
    return kExitOk;
}

int cmd_extract(Context& ctx, const std::string& checkpoint_flag) {
    const auto& c = ctx.config;
    fs::path checkpoint = checkpoint_flag;
    if (checkpoint.empty()) {
        check_upstream(ctx, "pretrain");
        checkpoint = stage_dir(ctx, "pretrain") / "checkpoint.m2r2";
    }
    require_exists(checkpoint, "extractor checkpoint", checkpoint_flag.empty() ? "pretrain" : "");
    const auto ectx = ExtractionContext::load(checkpoint);
    const auto ids = recording_ids(c.data_dir);
    const auto recs = load_all(c.data_dir, ids);
    // Fail before any work when the checkpoint does not fit the data.
    for (const auto& r : recs) {
        try {
            check_schema(ectx.network.checkpoint, model_config_for(r, c.preprocess, ectx.network.checkpoint.model),
                         c.preprocess);
        } catch (const SchemaMismatch& e) {
            throw SchemaMismatch("recording '" + r.id + "': " + e.what());
        }
    }

    std::vector<FeatureSequence> feats(recs.size());
    std::vector<std::exception_ptr> errors(recs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t k; (k = next++) < recs.size();) {
            try {
                feats[k] = extract_recording(ectx, recs[k], c.feature_mode);
            } catch (...) {
                errors[k] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int w = 1; w < std::min<int>(c.workers, static_cast<int>(recs.size())); ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    const fs::path dir = stage_dir(ctx, "extract");
    const std::string hash = stage_config_hash(c, "extract");
    std::vector<fs::path> outputs;
    for (const auto& f : feats) {
        write_features(dir, f, hash);
        outputs.push_back(dir / (f.recording_id + ".f32"));
        outputs.push_back(dir / (f.recording_id + ".json"));
    }
    ctx.err << "extract: " << feats.size() << " recordings, " << to_string(c.feature_mode) << " features\n";
    write_manifest(ctx, "extract", {{"checkpoint", ectx.fingerprint}, {"data", tree_hash(c.data_dir)}}, outputs);
    return kExitOk;
}

FeatureSequence load_feature(const Context& ctx, const std::string& id) {
    const fs::path dir = stage_dir(ctx, "extract");
    require_exists(dir / (id + ".f32"), "features of '" + id + "'", "extract");
    return read_features(dir, id);
}

int cmd_train_head(Context& ctx) {
    const auto& c = ctx.config;
    check_upstream(ctx, "extract");
    const auto split = read_split(ctx);
    const auto recs = load_all(c.data_dir, split.train);
    const LabelSet labels = shared_labels(recs);
    std::vector<HeadExample> examples;
    for (const auto& r : recs)
        examples.push_back({r.id, load_feature(ctx, r.id).x, r.frame_labels(c.head.granularity)});
    SegmentationHead head(c.head, examples.front().features.cols,
                          static_cast<int>(labels.size(c.head.granularity)));
    std::string log = "epoch,loss\n";
    const int every = std::max(1, c.head.epochs / 10);
    train_head(head, examples, [&](const HeadEpoch& e) {
        log += std::to_string(e.epoch) + "," + io::format_double(e.loss) + "\n";
        if (e.epoch % every == 0 || e.epoch + 1 == c.head.epochs)
            ctx.err << "train-head: epoch " << e.epoch << " loss " << io::format_double(e.loss) << "\n";
    });
    const fs::path dir = stage_dir(ctx, "train-head");
    fs::create_directories(dir);
    save_head(dir / "head.m2r2", head, labels, json{{"feature_mode", to_string(c.feature_mode)}});
    io::write_text_atomic(dir / "loss_log.csv", log);
    write_manifest(ctx, "train-head",
                   {{"features", file_hash(stage_dir(ctx, "extract") / "manifest.json")}, {"data", tree_hash(c.data_dir)}},
                   {dir / "head.m2r2", dir / "loss_log.csv"});
    return kExitOk;
}

int cmd_eval(Context& ctx) {
    const auto& c = ctx.config;
    check_upstream(ctx, "train-head");
    const fs::path head_path = stage_dir(ctx, "train-head") / "head.m2r2";
    require_exists(head_path, "head checkpoint", "train-head");
    const auto loaded = load_head(head_path);
    const Granularity g = loaded.head->config().granularity;
    const auto& names = loaded.labels.labels(g);
    const auto split = read_split(ctx);
    if (split.test.empty()) throw StageError("empty test split");
    const fs::path dir = stage_dir(ctx, "eval");
    fs::create_directories(dir / "predictions");

    std::vector<std::vector<int>> preds, gts, proj_preds, coarse_gts;
    json per = json::object();
    std::vector<fs::path> outputs;
    for (const auto& id : split.test) {
        const Recording rec = load_recording(c.data_dir / id);
        const auto f = load_feature(ctx, id);
        if (f.x.cols != loaded.head->input_dim())
            throw StageError("features of '" + id + "' have " + std::to_string(f.x.cols) + " columns, head expects " +
                             std::to_string(loaded.head->input_dim()));
        auto gt = rec.frame_labels(g);
        if (gt.size() != static_cast<std::size_t>(f.x.rows))
            throw StageError("recording '" + id + "' has " + std::to_string(gt.size()) + " frames but " +
                             std::to_string(f.x.rows) + " feature rows");
        auto pred = predict(*loaded.head, f.x);
        const fs::path p = dir / "predictions" / (id + ".csv");
        io::write_text_atomic(p, predictions_csv(pred, names));
        outputs.push_back(p);
        per[id] = metrics::evaluate(pred, gt, c.t_e).to_json();
        if (g == Granularity::kFine) {
            std::vector<int> proj;
            for (int v : pred) proj.push_back(loaded.labels.fine_to_coarse(v));
            proj_preds.push_back(std::move(proj));
            coarse_gts.push_back(rec.frame_labels(Granularity::kCoarse));
        }
        preds.push_back(std::move(pred));
        gts.push_back(std::move(gt));
    }
    json doc{{"granularity", to_string(g)},
             {"feature_mode", loaded.extra.value("feature_mode", "fused")},
             {"overall", metrics::evaluate_many(preds, gts, c.t_e).to_json()},
             {"recordings", per}};
    if (g == Granularity::kFine)
        doc["projected_coarse"] = metrics::evaluate_many(proj_preds, coarse_gts, c.t_e).to_json();
    io::write_json_atomic(dir / "metrics.json", doc);
    outputs.push_back(dir / "metrics.json");
    write_manifest(ctx, "eval", {{"head", file_hash(head_path)}, {"data", tree_hash(c.data_dir)}}, outputs);
    ctx.out << doc.at("overall").dump(2) << "\n";
    return kExitOk;
}

int cmd_report(Context& ctx) {
    const auto& c = ctx.config;
    check_upstream(ctx, "eval");
    const fs::path eval_dir = stage_dir(ctx, "eval");
    const auto metrics_doc = io::read_json(eval_dir / "metrics.json");
    const fs::path head_path = stage_dir(ctx, "train-head") / "head.m2r2";
    require_exists(head_path, "head checkpoint", "train-head");
    const auto loaded = load_head(head_path);
    const Granularity g = loaded.head->config().granularity;
    const fs::path dir = stage_dir(ctx, "report");
    fs::create_directories(dir);
    std::vector<fs::path> outputs;
    std::map<std::string, std::string> inputs{{"metrics", file_hash(eval_dir / "metrics.json")}};
    for (const auto& [id, _] : metrics_doc.at("recordings").items()) {
        const fs::path pred_path = eval_dir / "predictions" / (id + ".csv");
        require_exists(pred_path, "predictions of '" + id + "'", "eval");
        const auto pred = parse_predictions_csv(io::read_text(pred_path), loaded.labels.labels(g));
        const auto gt = load_recording(c.data_dir / id).frame_labels(g);
        const fs::path img = dir / (id + "_timeline.png");
        io::write_atomic(img, io::encode_png(timeline_image(pred, gt)));
        outputs.push_back(img);
        inputs["predictions/" + id] = file_hash(pred_path);
    }
    io::write_json_atomic(dir / "metrics.json", metrics_doc);
    outputs.push_back(dir / "metrics.json");
    write_manifest(ctx, "report", inputs, outputs);
    ctx.err << "report: " << outputs.size() - 1 << " timelines in " << dir.string() << "\n";
    return kExitOk;
}

int cmd_sample(Context& ctx, const std::string& recording, int segment) {
    const auto& c = ctx.config;
    require_exists(c.data_dir / recording, "recording '" + recording + "'", "synth");
    const Recording rec = load_recording(c.data_dir / recording);
    if (segment < 0 || segment >= static_cast<int>(rec.annotations.size()))
        throw ConfigError("segment " + std::to_string(segment) + " out of range; '" + recording + "' has " +
                          std::to_string(rec.annotations.size()) + " annotations");
    ctx.out << sample_window(rec, segment, c.sampler).to_json().dump(2) << "\n";
    return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multimodal action segmentation pipeline"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::uint64_t seed = 0;
    int workers = 1;
    std::string out_dir = "runs";
    std::string checkpoint;
    std::string recording;
    int segment = 0;

    const std::vector<std::pair<std::string, std::string>> commands{
        {"synth", "Generate the synthetic dataset"},
        {"stats", "Compute the train split and normalization statistics"},
        {"pretrain", "Pretrain the feature extractor"},
        {"extract", "Export per-frame features for every recording"},
        {"train-head", "Train the segmentation head on extracted features"},
        {"eval", "Predict the test split and compute metrics"},
        {"report", "Write the metrics JSON and timeline plots"},
        {"sample", "Print one sampled pretraining window as JSON"}};
    std::map<std::string, CLI::App*> subs;
    std::map<std::string, std::pair<CLI::Option*, CLI::Option*>> seed_workers;
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->allow_extras();
        sub->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
        auto* s = sub->add_option("--seed", seed, "Global seed");
        auto* w = sub->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
        sub->add_option("--out", out_dir, "Output directory")->capture_default_str();
        seed_workers[name] = {s, w};
        subs[name] = sub;
    }
    subs["extract"]->add_option("--checkpoint", checkpoint, "Extractor checkpoint (default: pretrain output)");
    subs["sample"]->add_option("--recording", recording, "Recording id")->required();
    subs["sample"]->add_option("--segment", segment, "Annotation index");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    try {
        std::optional<fs::path> cfg_file;
        if (!config_path.empty()) cfg_file = config_path;
        std::optional<std::uint64_t> seed_flag;
        std::optional<int> workers_flag;
        if (seed_workers[name].first->count() > 0) seed_flag = seed;
        if (seed_workers[name].second->count() > 0) workers_flag = workers;
        Context ctx{load_run_config(cfg_file, sub->remaining(), seed_flag, workers_flag, out_dir), out, err};
        if (name == "synth") return cmd_synth(ctx);
        if (name == "stats") return cmd_stats(ctx);
        if (name == "pretrain") return cmd_pretrain(ctx);
        if (name == "extract") return cmd_extract(ctx, checkpoint);
        if (name == "train-head") return cmd_train_head(ctx);
        if (name == "eval") return cmd_eval(ctx);
        if (name == "report") return cmd_report(ctx);
        return cmd_sample(ctx, recording, segment);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << name << ": " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace m2r2::cli
