// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2r2/dataset.hpp"
#include "m2r2/matrix.hpp"

namespace m2r2 {

struct PreprocessConfig {
    double resample_rate = 300.0;  // Hz, common proprioceptive rate
    int audio_rate = 16000;
    int mel_window = 400;
    int mel_hop = 160;
    int n_mels = 64;
    double mel_fmin = 0.0;
    double mel_fmax = 8000.0;
    double energy_floor = 1e-10;

    void validate() const;
    // Samples per proprioceptive window: round(f / camera rate).
    int proprio_samples(double camera_rate) const;
    // Audio grid points per window: round(audio_rate / camera rate).
    int audio_samples(double camera_rate) const;
    // Spectrogram frames for a window of `samples` audio samples; a window
    // shorter than one mel window still yields one (zero-padded) frame.
    int audio_frames(int samples) const;

    nlohmann::json to_json() const;
    static PreprocessConfig from_json(const nlohmann::json& doc);
    std::string fingerprint() const;
};

struct Interval {
    double start = 0.0;
    double end = 0.0;
    double length() const { return end - start; }
};

struct FrameWindow {
    int frame_index = 0;
    Interval window;
};

// One [t_{i-1}, t_i) window per camera frame; frame 0 uses
// t_{-1} = t_0 - 1/camera_rate_nominal.
std::vector<FrameWindow> frame_windows(const Recording& recording);

// Linear interpolation of every column at `samples` uniformly spaced grid
// points start + j*(end-start)/samples, j = 0..samples-1.
Matrix resample_window(const SensorStream& stream, const Interval& window, int samples);

// (x - mean) / (std + eps) per column.
inline constexpr double kStdEpsilon = 1e-8;
Matrix normalize_proprio(const Matrix& values, const SensorStats& stats);
Matrix denormalize_proprio(const Matrix& values, const SensorStats& stats);

class MelFilterbank {
public:
    MelFilterbank(int n_fft, int sample_rate, int n_mels, double fmin, double fmax);

    int n_mels() const { return n_mels_; }
    int n_bins() const { return n_fft_ / 2 + 1; }
    // Center frequencies (Hz) of each triangular filter.
    const std::vector<double>& centers() const { return centers_; }
    double weight(int mel, int bin) const { return weights_[static_cast<std::size_t>(mel) * n_bins() + bin]; }

    static double hz_to_mel(double hz);
    static double mel_to_hz(double mel);

private:
    int n_fft_;
    int n_mels_;
    std::vector<double> centers_;
    std::vector<double> weights_;
};

// Raw log-mel spectrogram in dB, [n_mels, n_frames], for the audio within
// `window` resampled to `samples` points.
Matrix log_mel_db(const SensorStream& audio, const Interval& window, int samples, const PreprocessConfig& config);

// log_mel_db followed by the affine map of [log_min, log_max] onto [-1, 1]
// and clipping.
Matrix audio_logmel(const SensorStream& audio, const Interval& window, int samples, const PreprocessConfig& config,
                    const NormalizationStats& stats);

struct AlignedFrame {
    int frame_index = 0;
    Interval window;
    io::RgbImage image;
    Matrix spectrogram;                 // [n_mels, n_frames] in [-1, 1]
    std::vector<Matrix> proprio;        // per sensor [T_s, D_s], normalized
};

AlignedFrame align_frame(const Recording& recording, const FrameWindow& window, const PreprocessConfig& config,
                         const NormalizationStats& stats);

// Frames are processed by `workers` threads and returned in frame order.
std::vector<AlignedFrame> preprocess_recording(const Recording& recording, const PreprocessConfig& config,
                                               const NormalizationStats& stats, int workers = 1);

// Optional on-disk cache of preprocessed bundles: one float32 blob per
// modality plus index.json with shapes and a config/stats hash.
void write_preprocessed_cache(const std::vector<AlignedFrame>& frames, const PreprocessConfig& config,
                              const NormalizationStats& stats, const fs::path& dir);
// Returns an empty vector when the cache is missing or was produced with a
// different config or stats.
std::vector<AlignedFrame> read_preprocessed_cache(const fs::path& dir, const PreprocessConfig& config,
                                                  const NormalizationStats& stats);

}  // namespace m2r2
