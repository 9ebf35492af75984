#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "chromofit/pixelcore.hpp"

namespace chromofit {

/// Decodes a PNG into 8-bit RGB. Grayscale, palette and 16-bit inputs are
/// expanded/stripped to 8-bit RGB; an alpha channel is kept in RgbImage8::alpha.
/// Throws IoError on malformed data.
RgbImage8 decode_png(std::span<const std::uint8_t> bytes);
RgbImage8 read_png(const std::filesystem::path& path);

/// Deterministic encoder: identical images always produce identical bytes.
std::vector<std::uint8_t> encode_png(const RgbImage8& img);
void write_png(const std::filesystem::path& path, const RgbImage8& img);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace chromofit
