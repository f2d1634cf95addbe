// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace m2r2::io {

namespace fs = std::filesystem;

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& path);
std::vector<std::uint8_t> read_bytes(const fs::path& path);

// Writes to a sibling temp file and renames it over `path`.
void write_atomic(const fs::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const fs::path& path, const std::string& text);

nlohmann::json read_json(const fs::path& path);
// Pretty-printed with sorted keys and a trailing newline.
void write_json_atomic(const fs::path& path, const nlohmann::json& doc);

// Shortest round-trippable decimal representation of a double.
std::string format_double(double v);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const fs::path& path);
std::vector<std::string> split_csv_line(const std::string& line);
double parse_double(const std::string& field, const std::string& context);
long long parse_int(const std::string& field, const std::string& context);

struct WavData {
    int sample_rate = 0;
    std::vector<double> samples;  // mono, in [-1, 1)
};

// 16-bit signed little-endian mono PCM.
WavData read_wav(const fs::path& path);
std::vector<std::uint8_t> encode_wav(const WavData& wav);

struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;  // HWC, 8-bit RGB

    std::uint8_t at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

RgbImage read_png(const fs::path& path);
std::vector<std::uint8_t> encode_png(const RgbImage& image);

// Little-endian IEEE-754 float32 blob.
std::vector<std::uint8_t> encode_f32(std::span<const double> values);
std::vector<double> decode_f32(std::span<const std::uint8_t> bytes);

// 64-bit FNV-1a, rendered as 16 hex digits.
std::string fnv1a_hex(std::span<const std::uint8_t> bytes);
std::string fnv1a_hex(const std::string& text);

}  // namespace m2r2::io
