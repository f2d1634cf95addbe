// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "m2r2/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

#include "m2r2/nn.hpp"
#include "m2r2/preprocessing.hpp"

namespace m2r2 {

namespace {

using nlohmann::json;
constexpr double kPi = std::numbers::pi;

std::string frame_file(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06d.png", index);
    return buf;
}

void require_file(const fs::path& path, const std::string& what) {
    if (!fs::exists(path)) throw DataError("missing file: " + path.filename().string() + " (" + what + ")");
}

}  // namespace

void SensorStream::validate() const {
    if (dim < 1) throw DataError("stream '" + name + "': dimension must be >= 1");
    if (timestamps.empty()) throw DataError("stream '" + name + "': no samples");
    if (values.size() != timestamps.size() * static_cast<std::size_t>(dim))
        throw DataError("stream '" + name + "': value rows do not match timestamp count");
    for (std::size_t i = 1; i < timestamps.size(); ++i)
        if (!(timestamps[i] > timestamps[i - 1]))
            throw DataError("non-monotonic timestamps in stream '" + name + "' at row " + std::to_string(i));
}

Granularity parse_granularity(const std::string& name) {
    if (name == "fine") return Granularity::kFine;
    if (name == "coarse") return Granularity::kCoarse;
    throw std::invalid_argument("unknown label granularity '" + name + "' (expected fine|coarse)");
}

std::string to_string(Granularity g) { return g == Granularity::kFine ? "fine" : "coarse"; }

LabelSet::LabelSet(std::vector<std::string> activities, std::vector<std::string> objects)
    : activities_(std::move(activities)), objects_(std::move(objects)) {
    for (std::size_t a = 0; a < activities_.size(); ++a) {
        if (!coarse_index_.emplace(activities_[a], static_cast<int>(a)).second)
            throw DataError("duplicate activity label '" + activities_[a] + "'");
        for (const auto& o : objects_) {
            const std::string fine = activities_[a] + " " + o;
            if (!fine_index_.emplace(fine, static_cast<int>(fine_.size())).second)
                throw DataError("duplicate fine label '" + fine + "'");
            fine_.push_back(fine);
        }
    }
}

int LabelSet::fine_index(const std::string& label) const {
    auto it = fine_index_.find(label);
    if (it == fine_index_.end()) throw DataError("unknown fine label '" + label + "'");
    return it->second;
}

int LabelSet::coarse_index(const std::string& activity) const {
    auto it = coarse_index_.find(activity);
    if (it == coarse_index_.end()) throw DataError("unknown activity '" + activity + "'");
    return it->second;
}

int LabelSet::index_of(const ActionAnnotation& a, Granularity g) const {
    return g == Granularity::kFine ? fine_index(a.fine_label()) : coarse_index(a.activity);
}

int LabelSet::fine_to_coarse(int fine) const {
    if (fine < 0 || fine >= static_cast<int>(fine_.size())) throw DataError("fine label index out of range");
    return fine / static_cast<int>(objects_.size());
}

json LabelSet::to_json() const {
    return json{{"activities", activities_}, {"objects", objects_}, {"fine", fine_}, {"coarse", activities_}};
}

LabelSet LabelSet::from_json(const json& doc) {
    LabelSet set(doc.at("activities").get<std::vector<std::string>>(), doc.at("objects").get<std::vector<std::string>>());
    if (doc.contains("fine") && doc.at("fine").get<std::vector<std::string>>() != set.fine_)
        throw DataError("label set: fine labels are not the activity x object product");
    return set;
}

const SensorStream& Recording::sensor(const std::string& name) const {
    for (const auto& s : proprio)
        if (s.name == name) return s;
    throw DataError("recording " + id + " has no sensor '" + name + "'");
}

std::vector<int> Recording::frame_labels(Granularity g) const {
    std::vector<int> labels_out(frame_count(), -1);
    for (const auto& a : annotations) {
        const int idx = labels.index_of(a, g);
        for (int i = a.start_frame; i < a.end_frame; ++i) labels_out[i] = idx;
    }
    return labels_out;
}

void Recording::validate() const {
    if (camera_timestamps.empty()) throw DataError(id + ": no camera frames");
    if (!(camera_rate_nominal > 0.0)) throw DataError(id + ": camera_rate_nominal must be > 0");
    for (std::size_t i = 1; i < camera_timestamps.size(); ++i)
        if (!(camera_timestamps[i] > camera_timestamps[i - 1]))
            throw DataError("non-monotonic timestamps in camera_timestamps at line " + std::to_string(i + 1));
    if (!frames.empty() && frames.size() != camera_timestamps.size())
        throw DataError(id + ": " + std::to_string(frames.size()) + " frames but " +
                        std::to_string(camera_timestamps.size()) + " camera timestamps");
    if (audio_rate < kMinAudioRate)
        throw DataError("audio rate " + std::to_string(audio_rate) + " Hz below the 16000 Hz minimum");
    audio.validate();
    if (audio.dim != 1) throw DataError("audio stream must be 1-D");

    const double t_first = camera_timestamps.front() - 1.0 / camera_rate_nominal;
    const double t_last = camera_timestamps.back();
    for (const auto& s : proprio) {
        s.validate();
        if (s.start_time() > t_first || s.end_time() < t_last)
            throw DataError("insufficient coverage: sensor '" + s.name + "' spans [" + io::format_double(s.start_time()) +
                            ", " + io::format_double(s.end_time()) + "] but frames need [" + io::format_double(t_first) +
                            ", " + io::format_double(t_last) + "]");
    }
    if (audio.start_time() > t_first || audio.end_time() < t_last)
        throw DataError("insufficient coverage: audio does not span the camera frames");

    const int n = static_cast<int>(camera_timestamps.size());
    int prev_end = 0;
    for (std::size_t k = 0; k < annotations.size(); ++k) {
        const auto& a = annotations[k];
        if (a.end_frame < a.start_frame)
            throw DataError("annotation end before start: [" + std::to_string(a.start_frame) + "," +
                            std::to_string(a.end_frame) + ")");
        if (a.end_frame == a.start_frame)
            throw DataError("empty annotation at frame " + std::to_string(a.start_frame));
        if (a.start_frame < 0 || a.end_frame > n)
            throw DataError("annotation [" + std::to_string(a.start_frame) + "," + std::to_string(a.end_frame) +
                            ") outside [0," + std::to_string(n) + ")");
        if (k > 0 && a.start_frame < prev_end)
            throw DataError("overlapping annotations at frame " + std::to_string(a.start_frame));
        prev_end = a.end_frame;
        labels.index_of(a, Granularity::kFine);
    }
}

const std::vector<SensorSpec>& default_sensor_schema() {
    static const std::vector<SensorSpec> schema{{"ft", 6}, {"pose", 7}, {"twist", 6}, {"gripper", 1}};
    return schema;
}

void enforce_quaternion_continuity(SensorStream& pose) {
    if (pose.dim != 7) throw DataError("pose stream must be 7-D (x,y,z,qx,qy,qz,qw)");
    for (std::size_t i = 1; i < pose.length(); ++i) {
        double dot = 0.0;
        for (int c = 3; c < 7; ++c) dot += pose.at(i, c) * pose.at(i - 1, c);
        if (dot < 0.0)
            for (int c = 3; c < 7; ++c) pose.values[i * 7 + c] = -pose.values[i * 7 + c];
    }
}

namespace {

SensorStream load_sensor_csv(const fs::path& path, const std::string& name, int dim) {
    require_file(path, "sensor stream '" + name + "'");
    const io::CsvTable table = io::read_csv(path);
    if (table.header.size() != static_cast<std::size_t>(dim) + 1 || table.header[0] != "timestamp")
        throw DataError(path.filename().string() + ": expected header timestamp,v0..v" + std::to_string(dim - 1));
    SensorStream s;
    s.name = name;
    s.dim = dim;
    s.timestamps.reserve(table.rows.size());
    s.values.reserve(table.rows.size() * dim);
    const std::string ctx = path.filename().string();
    for (const auto& row : table.rows) {
        s.timestamps.push_back(io::parse_double(row[0], ctx));
        for (int c = 0; c < dim; ++c) s.values.push_back(io::parse_double(row[c + 1], ctx));
    }
    s.validate();
    return s;
}

}  // namespace

Recording load_recording(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("recording directory not found: " + dir.string());
    require_file(dir / "meta.json", "recording metadata");
    const json meta = io::read_json(dir / "meta.json");

    Recording rec;
    try {
        rec.id = meta.at("id").get<std::string>();
        rec.camera_rate_nominal = meta.at("camera_rate_nominal").get<double>();
        rec.audio_rate = meta.at("audio_rate").get<int>();
        rec.labels = LabelSet::from_json(meta.at("labels"));
    } catch (const json::exception& e) {
        throw DataError("meta.json: " + std::string(e.what()));
    }

    require_file(dir / "camera_timestamps.csv", "camera stream");
    {
        const std::string text = io::read_text(dir / "camera_timestamps.csv");
        std::size_t pos = 0;
        int line = 0;
        while (pos < text.size()) {
            std::size_t nl = text.find('\n', pos);
            if (nl == std::string::npos) nl = text.size();
            std::string field = text.substr(pos, nl - pos);
            if (!field.empty() && field.back() == '\r') field.pop_back();
            ++line;
            if (!field.empty())
                rec.camera_timestamps.push_back(io::parse_double(field, "camera_timestamps.csv:" + std::to_string(line)));
            pos = nl + 1;
        }
    }

    require_file(dir / "audio.wav", "audio stream");
    {
        const io::WavData wav = io::read_wav(dir / "audio.wav");
        if (wav.sample_rate != rec.audio_rate)
            throw DataError("audio.wav rate " + std::to_string(wav.sample_rate) + " Hz disagrees with meta.json " +
                            std::to_string(rec.audio_rate) + " Hz");
        if (wav.sample_rate < kMinAudioRate)
            throw DataError("audio rate " + std::to_string(wav.sample_rate) + " Hz below the 16000 Hz minimum");
        const double start = meta.value("audio_start", 0.0);
        rec.audio.name = "audio";
        rec.audio.dim = 1;
        rec.audio.values = wav.samples;
        rec.audio.timestamps.resize(wav.samples.size());
        for (std::size_t i = 0; i < wav.samples.size(); ++i)
            rec.audio.timestamps[i] = start + static_cast<double>(i) / wav.sample_rate;
    }

    for (const auto& s : meta.at("sensors")) {
        const std::string name = s.at("name").get<std::string>();
        SensorStream stream = load_sensor_csv(dir / (name + ".csv"), name, s.at("dim").get<int>());
        if (name == "pose") enforce_quaternion_continuity(stream);
        rec.proprio.push_back(std::move(stream));
    }

    require_file(dir / "annotations.csv", "annotations");
    {
        const io::CsvTable table = io::read_csv(dir / "annotations.csv");
        if (table.header != std::vector<std::string>{"start_frame", "end_frame", "activity", "object"})
            throw DataError("annotations.csv: expected header start_frame,end_frame,activity,object");
        for (const auto& row : table.rows) {
            ActionAnnotation a;
            a.start_frame = static_cast<int>(io::parse_int(row[0], "annotations.csv"));
            a.end_frame = static_cast<int>(io::parse_int(row[1], "annotations.csv"));
            a.activity = row[2];
            a.object = row[3];
            rec.annotations.push_back(std::move(a));
        }
    }

    const int n_frames = static_cast<int>(rec.camera_timestamps.size());
    rec.frames.reserve(n_frames);
    for (int i = 0; i < n_frames; ++i) {
        const fs::path p = dir / "frames" / frame_file(i);
        require_file(p, "camera frame " + std::to_string(i));
        rec.frames.push_back(io::read_png(p));
    }

    rec.validate();
    return rec;
}

namespace {

std::string sensor_csv(const SensorStream& s) {
    std::string out = "timestamp";
    for (int c = 0; c < s.dim; ++c) out += ",v" + std::to_string(c);
    out += "\n";
    for (std::size_t i = 0; i < s.length(); ++i) {
        out += io::format_double(s.timestamps[i]);
        for (int c = 0; c < s.dim; ++c) {
            out += ',';
            out += io::format_double(s.at(i, c));
        }
        out += '\n';
    }
    return out;
}

}  // namespace

void save_recording(const Recording& rec, const fs::path& dir) {
    fs::create_directories(dir / "frames");
    json sensors = json::array();
    for (const auto& s : rec.proprio) sensors.push_back({{"name", s.name}, {"dim", s.dim}});
    json meta{{"id", rec.id},
              {"camera_rate_nominal", rec.camera_rate_nominal},
              {"audio_rate", rec.audio_rate},
              {"audio_start", rec.audio.timestamps.empty() ? 0.0 : rec.audio.timestamps.front()},
              {"sensors", sensors},
              {"labels", rec.labels.to_json()}};
    if (!rec.frames.empty())
        meta["image"] = {{"height", rec.frames.front().height}, {"width", rec.frames.front().width}};
    io::write_json_atomic(dir / "meta.json", meta);

    std::string ts;
    for (double t : rec.camera_timestamps) ts += io::format_double(t) + "\n";
    io::write_text_atomic(dir / "camera_timestamps.csv", ts);

    for (std::size_t i = 0; i < rec.frames.size(); ++i)
        io::write_atomic(dir / "frames" / frame_file(static_cast<int>(i)), io::encode_png(rec.frames[i]));

    io::WavData wav;
    wav.sample_rate = rec.audio_rate;
    wav.samples = rec.audio.values;
    io::write_atomic(dir / "audio.wav", io::encode_wav(wav));

    for (const auto& s : rec.proprio) io::write_text_atomic(dir / (s.name + ".csv"), sensor_csv(s));

    std::string ann = "start_frame,end_frame,activity,object\n";
    for (const auto& a : rec.annotations)
        ann += std::to_string(a.start_frame) + "," + std::to_string(a.end_frame) + "," + a.activity + "," + a.object + "\n";
    io::write_text_atomic(dir / "annotations.csv", ann);
}

// ---------------------------------------------------------------------------
// Synthetic generator

void SynthConfig::validate() const {
    if (num_recordings < 1) throw std::invalid_argument("synth: num_recordings must be >= 1");
    if (actions_per_recording < 1) throw std::invalid_argument("synth: actions_per_recording must be >= 1");
    if (!(camera_rate > 0.0)) throw std::invalid_argument("synth: camera_rate must be > 0");
    if (activities.size() < 4)
        throw std::invalid_argument("synth: need at least the pick/insert/remove/place activities");
    if (objects.empty()) throw std::invalid_argument("synth: need at least one object");
    if (image_size < 8) throw std::invalid_argument("synth: image_size must be >= 8");
    if (audio_rate < kMinAudioRate) throw std::invalid_argument("synth: audio_rate must be >= 16000");
    for (double r : {ft_rate, pose_rate, twist_rate, gripper_rate})
        if (!(r > camera_rate)) throw std::invalid_argument("synth: sensor rates must exceed the camera rate");
    if (timestamp_jitter < 0.0 || timestamp_jitter > 0.1 / camera_rate)
        throw std::invalid_argument("synth: timestamp_jitter must be in [0, 0.1/camera_rate]");
}

json SynthConfig::to_json() const {
    return json{{"num_recordings", num_recordings},   {"actions_per_recording", actions_per_recording},
                {"camera_rate", camera_rate},         {"activities", activities},
                {"objects", objects},                 {"image_size", image_size},
                {"audio_rate", audio_rate},           {"ft_rate", ft_rate},
                {"pose_rate", pose_rate},             {"twist_rate", twist_rate},
                {"gripper_rate", gripper_rate},       {"timestamp_jitter", timestamp_jitter},
                {"noise_scale", noise_scale}};
}

SynthConfig SynthConfig::from_json(const json& doc) {
    SynthConfig c;
    c.num_recordings = doc.value("num_recordings", c.num_recordings);
    c.actions_per_recording = doc.value("actions_per_recording", c.actions_per_recording);
    c.camera_rate = doc.value("camera_rate", c.camera_rate);
    c.activities = doc.value("activities", c.activities);
    c.objects = doc.value("objects", c.objects);
    c.image_size = doc.value("image_size", c.image_size);
    c.audio_rate = doc.value("audio_rate", c.audio_rate);
    c.ft_rate = doc.value("ft_rate", c.ft_rate);
    c.pose_rate = doc.value("pose_rate", c.pose_rate);
    c.twist_rate = doc.value("twist_rate", c.twist_rate);
    c.gripper_rate = doc.value("gripper_rate", c.gripper_rate);
    c.timestamp_jitter = doc.value("timestamp_jitter", c.timestamp_jitter);
    c.noise_scale = doc.value("noise_scale", c.noise_scale);
    return c;
}

namespace {

enum class Role { kPick, kInsert, kRemove, kPlace };

Role role_of(int activity) {
    switch (activity) {
        case 0: return Role::kPick;
        case 2: return Role::kRemove;
        case 3: return Role::kPlace;
        default: return Role::kInsert;
    }
}

struct ScriptedAction {
    int activity;
    int object;
    int start_frame;
    int end_frame;
};

// Assembly cycles (pick -> insert-like) alternate with disassembly cycles
// (remove -> place); each cycle handles one randomly chosen object.
std::vector<ScriptedAction> make_script(const SynthConfig& cfg, nn::Rng& rng) {
    std::vector<int> insert_like{1};
    for (int a = 4; a < static_cast<int>(cfg.activities.size()); ++a) insert_like.push_back(a);
    auto frames_for = [&](int activity) {
        auto draw = [&](int lo, int hi) { return lo + static_cast<int>(nn::uniform01(rng) * (hi - lo + 1)); };
        switch (role_of(activity)) {
            case Role::kPick: return draw(6, 10);
            case Role::kPlace: return draw(6, 10);
            case Role::kRemove: return draw(12, 22);
            case Role::kInsert: return activity == 1 ? draw(16, 28) : draw(16, 26);
        }
        return 10;
    };
    std::vector<ScriptedAction> script;
    bool assembly = nn::uniform01(rng) < 0.5;
    int frame = 0;
    const int n_obj = static_cast<int>(cfg.objects.size());
    while (static_cast<int>(script.size()) < cfg.actions_per_recording) {
        const int object = std::min(n_obj - 1, static_cast<int>(nn::uniform01(rng) * n_obj));
        std::array<int, 2> cycle{};
        if (assembly) {
            const int pick = std::min(static_cast<int>(insert_like.size()) - 1,
                                      static_cast<int>(nn::uniform01(rng) * insert_like.size()));
            cycle = {0, insert_like[pick]};
        } else {
            cycle = {2, 3};
        }
        for (int activity : cycle) {
            if (static_cast<int>(script.size()) == cfg.actions_per_recording) break;
            const int len = frames_for(activity);
            script.push_back({activity, object, frame, frame + len});
            frame += len;
        }
        assembly = !assembly;
    }
    return script;
}

double smoothstep(double x) {
    x = std::clamp(x, 0.0, 1.0);
    return x * x * (3.0 - 2.0 * x);
}

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

// Noise-free continuous signals as functions of time.
class SignalModel {
public:
    SignalModel(const SynthConfig& cfg, std::vector<ScriptedAction> script)
        : cfg_(cfg), script_(std::move(script)), period_(1.0 / cfg.camera_rate) {}

    // Action k spans [(start-1)/rate, (end-1)/rate) so that the camera window
    // of frame start already lies inside it.
    double action_begin(std::size_t k) const { return (script_[k].start_frame - 1) * period_; }
    double action_end(std::size_t k) const { return (script_[k].end_frame - 1) * period_; }

    std::pair<std::size_t, double> locate(double t) const {
        if (t < action_begin(0)) return {0, 0.0};
        for (std::size_t k = 0; k < script_.size(); ++k)
            if (t < action_end(k)) return {k, (t - action_begin(k)) / (action_end(k) - action_begin(k))};
        return {script_.size() - 1, 1.0};
    }

    Vec3 anchor(int object) const { return {0.35 + 0.08 * object, -0.15 + 0.1 * object, 0.15}; }

    Vec3 position(double t) const {
        const auto [k, u] = locate(t);
        const auto& act = script_[k];
        const Vec3 here = anchor(act.object);
        const Vec3 from = k > 0 ? anchor(script_[k - 1].object) : here;
        const double env = std::sin(kPi * u);
        Vec3 p = here;
        switch (role_of(act.activity)) {
            case Role::kPick: {
                const double s = smoothstep(u / 0.6);
                p = {from.x + (here.x - from.x) * s, from.y + (here.y - from.y) * s, from.z + (here.z - from.z) * s};
                p.z -= 0.08 * env;
                break;
            }
            case Role::kInsert:
                if (act.activity == 1) {
                    p.z -= 0.05 * env;
                    p.x += 0.01 * std::sin(6.0 * kPi * u) * env;
                } else {
                    p.z -= 0.02 * env;
                    p.y += 0.015 * std::sin(4.0 * kPi * u) * env;
                }
                break;
            case Role::kRemove: {
                const double s = smoothstep(u / 0.4);
                p = {from.x + (here.x - from.x) * s, from.y + (here.y - from.y) * s, from.z + (here.z - from.z) * s};
                p.z += 0.06 * env;
                break;
            }
            case Role::kPlace:
                p.x += 0.08 * env;
                p.z -= 0.03 * std::sin(2.0 * kPi * u);
                break;
        }
        return p;
    }

    double yaw(double t) const {
        const auto [k, u] = locate(t);
        const auto& act = script_[k];
        if (role_of(act.activity) != Role::kInsert) return 0.0;
        const double env = std::sin(kPi * u);
        return act.activity == 1 ? 0.15 * std::sin(4.0 * kPi * u) * env : 1.2 * env;
    }

    double gripper(double t) const {
        const auto [k, u] = locate(t);
        const auto& act = script_[k];
        const double width = 0.015 + 0.015 * act.object;
        const double open = 0.08;
        switch (role_of(act.activity)) {
            case Role::kPick: return open + (width - open) * smoothstep(u / 0.5);
            case Role::kInsert: return width + (open - width) * smoothstep((u - 0.85) / 0.15);
            case Role::kRemove: return open + (width - open) * smoothstep(u / 0.3);
            case Role::kPlace: return width + (open - width) * smoothstep((u - 0.6) / 0.2);
        }
        return open;
    }

    std::array<double, 6> wrench(double t) const {
        const auto [k, u] = locate(t);
        const auto& act = script_[k];
        const double f_obj = 2.0 + 2.5 * act.object;
        const double env = std::sin(kPi * u);
        std::array<double, 6> w{};
        switch (role_of(act.activity)) {
            case Role::kPick: w[2] = -0.5 * f_obj * smoothstep((u - 0.4) / 0.2); break;
            case Role::kInsert:
                if (act.activity == 1) {
                    w[2] = f_obj * (0.3 + 1.5 * env * env);
                    w[0] = 0.3 * f_obj * std::sin(6.0 * kPi * u);
                } else {
                    w[2] = 0.6 * f_obj;
                    w[5] = (0.2 + 0.1 * act.object) * env;
                }
                break;
            case Role::kRemove: w[2] = -1.2 * f_obj * env; break;
            case Role::kPlace: w[2] = -0.5 * f_obj * (1.0 - smoothstep((u - 0.5) / 0.2)); break;
        }
        // Contact bump at every action onset.
        for (std::size_t j = 1; j < script_.size(); ++j) {
            const double d = t - action_begin(j);
            if (std::abs(d) < 0.15) w[2] += 4.0 * std::exp(-d * d / (2.0 * 0.02 * 0.02));
        }
        w[3] = 0.02 * w[2] + 0.01 * std::sin(2.0 * kPi * 3.0 * t);
        w[4] = -0.02 * w[0];
        return w;
    }

    const std::vector<ScriptedAction>& script() const { return script_; }

private:
    const SynthConfig& cfg_;
    std::vector<ScriptedAction> script_;
    double period_;
};

std::vector<double> sample_times(double start, double end, double rate) {
    std::vector<double> ts;
    const auto n = static_cast<long long>(std::floor((end - start) * rate)) + 1;
    ts.reserve(n);
    for (long long i = 0; i < n; ++i) ts.push_back(start + static_cast<double>(i) / rate);
    return ts;
}

io::RgbImage render_frame(const SynthConfig& cfg, int activity, int object, nn::Rng& rng) {
    static constexpr std::array<std::array<int, 3>, 8> kPalette{{{210, 60, 60},
                                                                 {60, 200, 70},
                                                                 {70, 90, 220},
                                                                 {220, 200, 60},
                                                                 {200, 80, 200},
                                                                 {60, 200, 200},
                                                                 {240, 140, 40},
                                                                 {150, 150, 150}}};
    const auto& color = kPalette[object % kPalette.size()];
    const int n = cfg.image_size;
    io::RgbImage img;
    img.height = n;
    img.width = n;
    img.pixels.resize(static_cast<std::size_t>(n) * n * 3);
    const double mid = (n - 1) / 2.0;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            bool on = false;
            switch (activity % 6) {
                case 0: on = (y / 4) % 2 == 0; break;
                case 1: on = (x / 4) % 2 == 0; break;
                case 2: on = ((x + y) / 4) % 2 == 0; break;
                case 3: on = ((x / 4) + (y / 4)) % 2 == 0; break;
                case 4: on = static_cast<int>(std::hypot(x - mid, y - mid) / 3.0) % 2 == 0; break;
                default: on = ((x - y + n) / 3) % 2 == 0; break;
            }
            for (int c = 0; c < 3; ++c) {
                const double base = on ? color[c] : 0.3 * color[c];
                const double v = base + 12.0 * cfg.noise_scale * nn::normal(rng);
                img.pixels[(static_cast<std::size_t>(y) * n + x) * 3 + c] =
                    static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    return img;
}

}  // namespace

Recording synthesize_recording(const SynthConfig& cfg, std::uint64_t seed, int index) {
    cfg.validate();
    nn::Rng rng(nn::mix_seed(seed, static_cast<std::uint64_t>(index)));
    SignalModel model(cfg, make_script(cfg, rng));
    const auto& script = model.script();

    Recording rec;
    char id[32];
    std::snprintf(id, sizeof(id), "rec_%03d", index);
    rec.id = id;
    rec.camera_rate_nominal = cfg.camera_rate;
    rec.audio_rate = cfg.audio_rate;
    rec.labels = LabelSet(cfg.activities, cfg.objects);

    const int n_frames = script.back().end_frame;
    const double period = 1.0 / cfg.camera_rate;
    rec.camera_timestamps.resize(n_frames);
    for (int i = 0; i < n_frames; ++i) {
        const double jitter = std::clamp(cfg.timestamp_jitter * nn::normal(rng), -0.3 * period, 0.3 * period);
        rec.camera_timestamps[i] = i * period + (i == 0 ? 0.0 : jitter);
    }
    for (const auto& a : script)
        rec.annotations.push_back({a.start_frame, a.end_frame, cfg.activities[a.activity], cfg.objects[a.object]});

    rec.frames.reserve(n_frames);
    for (const auto& a : script)
        for (int i = a.start_frame; i < a.end_frame; ++i) rec.frames.push_back(render_frame(cfg, a.activity, a.object, rng));

    const double t0 = -0.5;
    const double t1 = rec.camera_timestamps.back() + 0.5;
    const double ns = cfg.noise_scale;

    SensorStream ft{"ft", 6, sample_times(t0, t1, cfg.ft_rate), {}};
    ft.values.reserve(ft.length() * 6);
    for (double t : ft.timestamps) {
        const auto w = model.wrench(t);
        for (int c = 0; c < 6; ++c) ft.values.push_back(w[c] + ns * (c < 3 ? 0.1 : 0.005) * nn::normal(rng));
    }

    SensorStream pose{"pose", 7, sample_times(t0, t1, cfg.pose_rate), {}};
    pose.values.reserve(pose.length() * 7);
    for (double t : pose.timestamps) {
        const Vec3 p = model.position(t);
        const double yaw = model.yaw(t);
        // Tool pointing down (pi about x) followed by yaw about z.
        const double qx = std::cos(yaw / 2.0);
        const double qy = std::sin(yaw / 2.0);
        for (double v : {p.x, p.y, p.z}) pose.values.push_back(v + ns * 1e-4 * nn::normal(rng));
        for (double v : {qx, qy, 0.0, 0.0}) pose.values.push_back(v);
    }
    enforce_quaternion_continuity(pose);

    SensorStream twist{"twist", 6, sample_times(t0, t1, cfg.twist_rate), {}};
    twist.values.reserve(twist.length() * 6);
    constexpr double h = 1e-4;
    for (double t : twist.timestamps) {
        const Vec3 a = model.position(t - h);
        const Vec3 b = model.position(t + h);
        const double wz = (model.yaw(t + h) - model.yaw(t - h)) / (2.0 * h);
        const std::array<double, 6> v{(b.x - a.x) / (2 * h), (b.y - a.y) / (2 * h), (b.z - a.z) / (2 * h), 0.0, 0.0, wz};
        for (double x : v) twist.values.push_back(x + ns * 1e-3 * nn::normal(rng));
    }

    SensorStream gripper{"gripper", 1, sample_times(t0, t1, cfg.gripper_rate), {}};
    gripper.values.reserve(gripper.length());
    for (double t : gripper.timestamps) gripper.values.push_back(model.gripper(t) + ns * 2e-4 * nn::normal(rng));

    rec.proprio = {std::move(ft), std::move(pose), std::move(twist), std::move(gripper)};

    rec.audio.name = "audio";
    rec.audio.dim = 1;
    rec.audio.timestamps = sample_times(t0, t1, cfg.audio_rate);
    rec.audio.values.resize(rec.audio.length());
    for (double& v : rec.audio.values) v = 0.005 * ns * nn::normal(rng);
    constexpr double kBurst = 0.08;
    for (std::size_t k = 0; k < script.size(); ++k) {
        const double onset = model.action_begin(k) + 0.01;
        const double freq = 500.0 * (script[k].activity + 1);
        const auto first = static_cast<long long>(std::ceil((onset - t0) * cfg.audio_rate));
        const auto count = static_cast<long long>(kBurst * cfg.audio_rate);
        for (long long i = 0; i < count; ++i) {
            const long long idx = first + i;
            if (idx < 0 || idx >= static_cast<long long>(rec.audio.length())) continue;
            const double tt = static_cast<double>(i) / cfg.audio_rate;
            const double env = 0.5 * (1.0 - std::cos(2.0 * kPi * static_cast<double>(i) / count));
            rec.audio.values[idx] += 0.3 * env * std::sin(2.0 * kPi * freq * tt);
        }
    }

    rec.validate();
    return rec;
}

std::vector<Recording> generate_synthetic_dataset(const SynthConfig& config, std::uint64_t seed, const fs::path& out_dir) {
    config.validate();
    std::vector<Recording> out;
    out.reserve(config.num_recordings);
    for (int i = 0; i < config.num_recordings; ++i) {
        const Recording rec = synthesize_recording(config, seed, i);
        const fs::path dir = out_dir / rec.id;
        save_recording(rec, dir);
        out.push_back(load_recording(dir));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization statistics

const SensorStats& NormalizationStats::sensor(const std::string& name) const {
    for (const auto& s : sensors)
        if (s.name == name) return s;
    throw DataError("normalization stats have no sensor '" + name + "'");
}

json NormalizationStats::to_json() const {
    json sens = json::array();
    for (const auto& s : sensors) sens.push_back({{"name", s.name}, {"mean", s.mean}, {"std", s.std}});
    return json{{"sensors", sens},
                {"spectrogram_log_min", spectrogram_log_min},
                {"spectrogram_log_max", spectrogram_log_max}};
}

NormalizationStats NormalizationStats::from_json(const json& doc) {
    NormalizationStats st;
    try {
        for (const auto& s : doc.at("sensors"))
            st.sensors.push_back({s.at("name").get<std::string>(), s.at("mean").get<std::vector<double>>(),
                                  s.at("std").get<std::vector<double>>()});
        st.spectrogram_log_min = doc.at("spectrogram_log_min").get<double>();
        st.spectrogram_log_max = doc.at("spectrogram_log_max").get<double>();
    } catch (const json::exception& e) {
        throw DataError("stats: " + std::string(e.what()));
    }
    for (const auto& s : st.sensors) {
        if (s.mean.size() != s.std.size()) throw DataError("stats: mean/std length mismatch for " + s.name);
        for (double v : s.std)
            if (v < 0.0) throw DataError("stats: negative std for " + s.name);
    }
    return st;
}

std::string NormalizationStats::fingerprint() const { return io::fnv1a_hex(to_json().dump()); }

NormalizationStats compute_normalization_stats(const std::vector<Recording>& recordings, const PreprocessConfig& config) {
    if (recordings.empty()) throw DataError("cannot compute normalization stats from an empty recording list");

    // Reduce in id order so the result does not depend on input order.
    std::vector<const Recording*> order;
    for (const auto& r : recordings) order.push_back(&r);
    std::sort(order.begin(), order.end(), [](const Recording* a, const Recording* b) { return a->id < b->id; });

    const Recording& first = *order.front();
    for (const Recording* r : order) {
        if (r->proprio.size() != first.proprio.size())
            throw DataError("sensor schema mismatch: " + r->id + " vs " + first.id);
        for (std::size_t s = 0; s < first.proprio.size(); ++s)
            if (r->proprio[s].name != first.proprio[s].name || r->proprio[s].dim != first.proprio[s].dim)
                throw DataError("sensor schema mismatch: " + r->id + " stream '" + r->proprio[s].name + "' vs " +
                                first.id + " stream '" + first.proprio[s].name + "'");
    }

    NormalizationStats stats;
    for (std::size_t s = 0; s < first.proprio.size(); ++s) {
        const int dim = first.proprio[s].dim;
        SensorStats st{first.proprio[s].name, std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
        double count = 0.0;
        for (const Recording* r : order) {
            const auto& stream = r->proprio[s];
            for (std::size_t i = 0; i < stream.length(); ++i)
                for (int c = 0; c < dim; ++c) st.mean[c] += stream.at(i, c);
            count += static_cast<double>(stream.length());
        }
        for (double& m : st.mean) m /= count;
        for (const Recording* r : order) {
            const auto& stream = r->proprio[s];
            for (std::size_t i = 0; i < stream.length(); ++i)
                for (int c = 0; c < dim; ++c) {
                    const double d = stream.at(i, c) - st.mean[c];
                    st.std[c] += d * d;
                }
        }
        for (double& v : st.std) v = std::sqrt(v / count);
        stats.sensors.push_back(std::move(st));
    }

    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const Recording* r : order) {
        const int samples = config.audio_samples(r->camera_rate_nominal);
        for (const auto& w : frame_windows(*r)) {
            const Matrix spec = log_mel_db(r->audio, w.window, samples, config);
            for (double v : spec.data) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        }
    }
    stats.spectrogram_log_min = lo;
    stats.spectrogram_log_max = hi;
    return stats;
}

void save_stats(const NormalizationStats& stats, const fs::path& path) { io::write_json_atomic(path, stats.to_json()); }

NormalizationStats load_stats(const fs::path& path) {
    if (!fs::exists(path)) throw DataError("missing file: " + path.string());
    return NormalizationStats::from_json(io::read_json(path));
}

}  // namespace m2r2
