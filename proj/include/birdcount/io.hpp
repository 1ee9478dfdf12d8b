#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

namespace birdcount {

/// 8-bit, 3-channel raster in OpenCV's BGR channel order.
using Raster = cv::Mat;

Raster read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Raster& image);
std::vector<std::uint8_t> encode_png(const Raster& image);
Raster decode_png(const std::vector<std::uint8_t>& bytes);

std::string sha256_hex(const std::vector<std::uint8_t>& bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
/// Throws DataError on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

/// Splits one CSV line on commas. No quoting support; the formats used
/// here never contain embedded commas.
std::vector<std::string> split_csv_line(std::string_view line);

/// Strict decimal integer parse. Returns false on any trailing garbage.
bool parse_int(std::string_view text, int& out) noexcept;

}  // namespace birdcount
