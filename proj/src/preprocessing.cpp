// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "m2r2/preprocessing.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <thread>

namespace m2r2 {

using nlohmann::json;

void PreprocessConfig::validate() const {
    if (!(resample_rate > 0.0)) throw std::invalid_argument("preprocess: resample_rate must be > 0");
    if (audio_rate < kMinAudioRate) throw std::invalid_argument("preprocess: audio_rate must be >= 16000");
    if (mel_window < 2) throw std::invalid_argument("preprocess: mel_window must be >= 2");
    if (mel_hop < 1 || mel_hop > mel_window) throw std::invalid_argument("preprocess: need 1 <= mel_hop <= mel_window");
    if (n_mels < 1) throw std::invalid_argument("preprocess: n_mels must be >= 1");
    if (!(mel_fmax > mel_fmin) || mel_fmin < 0.0 || mel_fmax > audio_rate / 2.0)
        throw std::invalid_argument("preprocess: need 0 <= mel_fmin < mel_fmax <= audio_rate/2");
    if (!(energy_floor > 0.0)) throw std::invalid_argument("preprocess: energy_floor must be > 0");
}

int PreprocessConfig::proprio_samples(double camera_rate) const {
    return std::max(1, static_cast<int>(std::lround(resample_rate / camera_rate)));
}

int PreprocessConfig::audio_samples(double camera_rate) const {
    return std::max(1, static_cast<int>(std::lround(audio_rate / camera_rate)));
}

int PreprocessConfig::audio_frames(int samples) const {
    return samples < mel_window ? 1 : (samples - mel_window) / mel_hop + 1;
}

json PreprocessConfig::to_json() const {
    return json{{"resample_rate", resample_rate}, {"audio_rate", audio_rate}, {"mel_window", mel_window},
                {"mel_hop", mel_hop},             {"n_mels", n_mels},         {"mel_fmin", mel_fmin},
                {"mel_fmax", mel_fmax},           {"energy_floor", energy_floor}};
}

PreprocessConfig PreprocessConfig::from_json(const json& doc) {
    PreprocessConfig c;
    c.resample_rate = doc.value("resample_rate", c.resample_rate);
    c.audio_rate = doc.value("audio_rate", c.audio_rate);
    c.mel_window = doc.value("mel_window", c.mel_window);
    c.mel_hop = doc.value("mel_hop", c.mel_hop);
    c.n_mels = doc.value("n_mels", c.n_mels);
    c.mel_fmin = doc.value("mel_fmin", c.mel_fmin);
    c.mel_fmax = doc.value("mel_fmax", c.mel_fmax);
    c.energy_floor = doc.value("energy_floor", c.energy_floor);
    return c;
}

std::string PreprocessConfig::fingerprint() const { return io::fnv1a_hex(to_json().dump()); }

std::vector<FrameWindow> frame_windows(const Recording& recording) {
    const auto& ts = recording.camera_timestamps;
    std::vector<FrameWindow> out;
    out.reserve(ts.size());
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const double prev = i == 0 ? ts[0] - 1.0 / recording.camera_rate_nominal : ts[i - 1];
        out.push_back({static_cast<int>(i), {prev, ts[i]}});
    }
    return out;
}

Matrix resample_window(const SensorStream& stream, const Interval& window, int samples) {
    if (samples < 1) throw std::invalid_argument("resample_window: sample count must be >= 1");
    if (!(window.end > window.start)) throw std::invalid_argument("resample_window: empty window");
    if (stream.timestamps.empty() || stream.start_time() > window.start || stream.end_time() < window.end)
        throw DataError("insufficient coverage: sensor '" + stream.name + "' does not cover [" +
                        io::format_double(window.start) + ", " + io::format_double(window.end) + ")");
    const auto& ts = stream.timestamps;
    Matrix out(samples, stream.dim);
    const double step = (window.end - window.start) / samples;
    // Grid points are ascending, so the bracketing index only moves forward.
    std::size_t hi = static_cast<std::size_t>(std::upper_bound(ts.begin(), ts.end(), window.start) - ts.begin());
    for (int j = 0; j < samples; ++j) {
        const double g = window.start + j * step;
        while (hi < ts.size() && ts[hi] <= g) ++hi;
        const std::size_t lo = hi - 1;  // ts[lo] <= g
        if (hi == ts.size() || ts[lo] == g) {
            for (int c = 0; c < stream.dim; ++c) out(j, c) = stream.at(lo, c);
            continue;
        }
        const double w = (g - ts[lo]) / (ts[hi] - ts[lo]);
        for (int c = 0; c < stream.dim; ++c) {
            const double a = stream.at(lo, c);
            const double b = stream.at(hi, c);
            out(j, c) = a + (b - a) * w;
        }
    }
    return out;
}

Matrix normalize_proprio(const Matrix& values, const SensorStats& stats) {
    if (static_cast<std::size_t>(values.cols) != stats.mean.size() || stats.mean.size() != stats.std.size())
        throw DataError("normalize_proprio: sensor '" + stats.name + "' has " + std::to_string(stats.mean.size()) +
                        " channels in stats but data has " + std::to_string(values.cols));
    Matrix out(values.rows, values.cols);
    for (int r = 0; r < values.rows; ++r)
        for (int c = 0; c < values.cols; ++c) out(r, c) = (values(r, c) - stats.mean[c]) / (stats.std[c] + kStdEpsilon);
    return out;
}

Matrix denormalize_proprio(const Matrix& values, const SensorStats& stats) {
    if (static_cast<std::size_t>(values.cols) != stats.mean.size())
        throw DataError("denormalize_proprio: channel count mismatch for sensor '" + stats.name + "'");
    Matrix out(values.rows, values.cols);
    for (int r = 0; r < values.rows; ++r)
        for (int c = 0; c < values.cols; ++c) out(r, c) = values(r, c) * (stats.std[c] + kStdEpsilon) + stats.mean[c];
    return out;
}

double MelFilterbank::hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double MelFilterbank::mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank::MelFilterbank(int n_fft, int sample_rate, int n_mels, double fmin, double fmax)
    : n_fft_(n_fft), n_mels_(n_mels) {
    const double mlo = hz_to_mel(fmin);
    const double mhi = hz_to_mel(fmax);
    std::vector<double> edges(n_mels + 2);
    for (int i = 0; i < n_mels + 2; ++i) edges[i] = mel_to_hz(mlo + (mhi - mlo) * i / (n_mels + 1));
    centers_.assign(edges.begin() + 1, edges.end() - 1);
    weights_.assign(static_cast<std::size_t>(n_mels) * n_bins(), 0.0);
    for (int m = 0; m < n_mels; ++m) {
        const double left = edges[m];
        const double center = edges[m + 1];
        const double right = edges[m + 2];
        for (int k = 0; k < n_bins(); ++k) {
            const double f = static_cast<double>(k) * sample_rate / n_fft;
            const double up = (f - left) / (center - left);
            const double down = (right - f) / (right - center);
            weights_[static_cast<std::size_t>(m) * n_bins() + k] = std::max(0.0, std::min(up, down));
        }
    }
}

namespace {

// Hann taper, DFT tables and filterbank for one configuration.
struct SpectrogramKernel {
    explicit SpectrogramKernel(const PreprocessConfig& c)
        : config(c), bank(c.mel_window, c.audio_rate, c.n_mels, c.mel_fmin, c.mel_fmax) {
        const int n = c.mel_window;
        const int bins = n / 2 + 1;
        hann.resize(n);
        for (int i = 0; i < n; ++i) hann[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
        cos_table.resize(static_cast<std::size_t>(bins) * n);
        sin_table.resize(static_cast<std::size_t>(bins) * n);
        for (int k = 0; k < bins; ++k)
            for (int i = 0; i < n; ++i) {
                const long long phase = (static_cast<long long>(k) * i) % n;
                const double a = 2.0 * std::numbers::pi * static_cast<double>(phase) / n;
                cos_table[static_cast<std::size_t>(k) * n + i] = std::cos(a);
                sin_table[static_cast<std::size_t>(k) * n + i] = std::sin(a);
            }
    }

    PreprocessConfig config;
    MelFilterbank bank;
    std::vector<double> hann;
    std::vector<double> cos_table;
    std::vector<double> sin_table;
};

const SpectrogramKernel& kernel_for(const PreprocessConfig& config) {
    thread_local std::unique_ptr<SpectrogramKernel> cached;
    if (!cached || cached->config.to_json() != config.to_json()) cached = std::make_unique<SpectrogramKernel>(config);
    return *cached;
}

}  // namespace

Matrix log_mel_db(const SensorStream& audio, const Interval& window, int samples, const PreprocessConfig& config) {
    config.validate();
    const SpectrogramKernel& k = kernel_for(config);
    const Matrix wave = resample_window(audio, window, samples);
    const int n = config.mel_window;
    const int bins = n / 2 + 1;
    const int n_frames = config.audio_frames(samples);

    Matrix out(config.n_mels, n_frames);
    std::vector<double> frame(n);
    std::vector<double> power(bins);
    for (int f = 0; f < n_frames; ++f) {
        const int offset = f * config.mel_hop;
        for (int i = 0; i < n; ++i) {
            const int src = offset + i;
            frame[i] = (src < samples ? wave.data[src] : 0.0) * k.hann[i];
        }
        for (int b = 0; b < bins; ++b) {
            const double* cr = k.cos_table.data() + static_cast<std::size_t>(b) * n;
            const double* sr = k.sin_table.data() + static_cast<std::size_t>(b) * n;
            double re = 0.0;
            double im = 0.0;
            for (int i = 0; i < n; ++i) {
                re += frame[i] * cr[i];
                im -= frame[i] * sr[i];
            }
            power[b] = re * re + im * im;
        }
        for (int m = 0; m < config.n_mels; ++m) {
            double e = 0.0;
            for (int b = 0; b < bins; ++b) e += k.bank.weight(m, b) * power[b];
            out(m, f) = 10.0 * std::log10(std::max(e, config.energy_floor));
        }
    }
    return out;
}

Matrix audio_logmel(const SensorStream& audio, const Interval& window, int samples, const PreprocessConfig& config,
                    const NormalizationStats& stats) {
    const double lo = stats.spectrogram_log_min;
    const double hi = stats.spectrogram_log_max;
    if (!std::isfinite(lo) || !std::isfinite(hi) || !(hi > lo))
        throw DataError("audio_logmel: missing or degenerate spectrogram range in normalization stats");
    Matrix spec = log_mel_db(audio, window, samples, config);
    for (double& v : spec.data) v = std::clamp(2.0 * (v - lo) / (hi - lo) - 1.0, -1.0, 1.0);
    return spec;
}

AlignedFrame align_frame(const Recording& recording, const FrameWindow& window, const PreprocessConfig& config,
                         const NormalizationStats& stats) {
    AlignedFrame f;
    f.frame_index = window.frame_index;
    f.window = window.window;
    if (!recording.frames.empty()) f.image = recording.frames.at(window.frame_index);
    f.spectrogram = audio_logmel(recording.audio, window.window, config.audio_samples(recording.camera_rate_nominal),
                                 config, stats);
    const int t_s = config.proprio_samples(recording.camera_rate_nominal);
    f.proprio.reserve(recording.proprio.size());
    for (const auto& s : recording.proprio)
        f.proprio.push_back(normalize_proprio(resample_window(s, window.window, t_s), stats.sensor(s.name)));
    return f;
}

std::vector<AlignedFrame> preprocess_recording(const Recording& recording, const PreprocessConfig& config,
                                               const NormalizationStats& stats, int workers) {
    config.validate();
    const auto windows = frame_windows(recording);
    std::vector<AlignedFrame> out(windows.size());
    const int n_workers = std::clamp(workers, 1, static_cast<int>(std::max<std::size_t>(1, windows.size())));
    if (n_workers == 1) {
        for (std::size_t i = 0; i < windows.size(); ++i) out[i] = align_frame(recording, windows[i], config, stats);
        return out;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(n_workers);
    for (int w = 0; w < n_workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < windows.size(); i += n_workers)
                    out[i] = align_frame(recording, windows[i], config, stats);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

namespace {

std::string cache_key(const PreprocessConfig& config, const NormalizationStats& stats) {
    return io::fnv1a_hex(config.fingerprint() + stats.fingerprint());
}

}  // namespace

void write_preprocessed_cache(const std::vector<AlignedFrame>& frames, const PreprocessConfig& config,
                              const NormalizationStats& stats, const fs::path& dir) {
    if (frames.empty()) throw std::invalid_argument("write_preprocessed_cache: no frames");
    const auto& first = frames.front();
    std::vector<double> image;
    std::vector<double> spec;
    std::vector<std::vector<double>> proprio(first.proprio.size());
    json windows = json::array();
    for (const auto& f : frames) {
        for (std::uint8_t p : f.image.pixels) image.push_back(p);
        spec.insert(spec.end(), f.spectrogram.data.begin(), f.spectrogram.data.end());
        for (std::size_t s = 0; s < f.proprio.size(); ++s)
            proprio[s].insert(proprio[s].end(), f.proprio[s].data.begin(), f.proprio[s].data.end());
        windows.push_back({f.window.start, f.window.end});
    }
    const int n = static_cast<int>(frames.size());
    json index{{"config", config.to_json()},
               {"hash", cache_key(config, stats)},
               {"frames", n},
               {"windows", windows},
               {"image", {{"file", "image.f32"}, {"shape", {n, first.image.height, first.image.width, 3}}}},
               {"spectrogram",
                {{"file", "spectrogram.f32"}, {"shape", {n, first.spectrogram.rows, first.spectrogram.cols}}}}};
    json sensors = json::array();
    for (std::size_t s = 0; s < proprio.size(); ++s) {
        const std::string file = "proprio_" + std::to_string(s) + ".f32";
        sensors.push_back({{"file", file}, {"shape", {n, first.proprio[s].rows, first.proprio[s].cols}}});
        io::write_atomic(dir / file, io::encode_f32(proprio[s]));
    }
    index["proprio"] = sensors;
    io::write_atomic(dir / "image.f32", io::encode_f32(image));
    io::write_atomic(dir / "spectrogram.f32", io::encode_f32(spec));
    io::write_json_atomic(dir / "index.json", index);
}

std::vector<AlignedFrame> read_preprocessed_cache(const fs::path& dir, const PreprocessConfig& config,
                                                  const NormalizationStats& stats) {
    if (!fs::exists(dir / "index.json")) return {};
    const json index = io::read_json(dir / "index.json");
    if (index.value("hash", std::string()) != cache_key(config, stats)) return {};
    const int n = index.at("frames").get<int>();
    const auto image = io::decode_f32(io::read_bytes(dir / "image.f32"));
    const auto spec = io::decode_f32(io::read_bytes(dir / "spectrogram.f32"));
    const auto ishape = index.at("image").at("shape").get<std::vector<int>>();
    const auto sshape = index.at("spectrogram").at("shape").get<std::vector<int>>();
    std::vector<std::vector<double>> proprio;
    std::vector<std::vector<int>> pshapes;
    for (const auto& s : index.at("proprio")) {
        proprio.push_back(io::decode_f32(io::read_bytes(dir / s.at("file").get<std::string>())));
        pshapes.push_back(s.at("shape").get<std::vector<int>>());
    }
    const std::size_t img_size = static_cast<std::size_t>(ishape[1]) * ishape[2] * 3;
    const std::size_t spec_size = static_cast<std::size_t>(sshape[1]) * sshape[2];
    if (image.size() != img_size * n || spec.size() != spec_size * n) throw DataError("preprocessed cache is truncated");
    std::vector<AlignedFrame> frames(n);
    for (int i = 0; i < n; ++i) {
        AlignedFrame& f = frames[i];
        f.frame_index = i;
        f.window = {index.at("windows")[i][0].get<double>(), index.at("windows")[i][1].get<double>()};
        f.image.height = ishape[1];
        f.image.width = ishape[2];
        f.image.pixels.resize(img_size);
        for (std::size_t p = 0; p < img_size; ++p)
            f.image.pixels[p] = static_cast<std::uint8_t>(image[i * img_size + p]);
        f.spectrogram = Matrix(sshape[1], sshape[2]);
        std::copy_n(spec.begin() + static_cast<std::ptrdiff_t>(i * spec_size), spec_size, f.spectrogram.data.begin());
        for (std::size_t s = 0; s < proprio.size(); ++s) {
            const std::size_t sz = static_cast<std::size_t>(pshapes[s][1]) * pshapes[s][2];
            Matrix m(pshapes[s][1], pshapes[s][2]);
            std::copy_n(proprio[s].begin() + static_cast<std::ptrdiff_t>(i * sz), sz, m.data.begin());
            f.proprio.push_back(std::move(m));
        }
    }
    return frames;
}

}  // namespace m2r2
