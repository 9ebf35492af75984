#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace chromofit {

/// 8-bit sRGB image, row-major, 3 interleaved channels. An optional alpha
/// plane is carried along untouched by every operation.
struct RgbImage8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;   // width * height * 3
  std::vector<std::uint8_t> alpha;  // empty, or width * height

  RgbImage8() = default;
  RgbImage8(int w, int h);

  std::uint8_t& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool has_alpha() const { return !alpha.empty(); }

  /// Throws ParameterError when dimensions or buffer sizes are inconsistent.
  void validate() const;

  friend bool operator==(const RgbImage8&, const RgbImage8&) = default;
};

enum class Space { Linear, LogAbsorption, Chromophore };

std::string_view to_string(Space s);

/// Three planes of doubles covering a rectangular region of a parent image.
/// In Chromophore space the planes are ordered (H, M, r); otherwise (R, G, B).
struct PixelPatch {
  int width = 0;
  int height = 0;
  Space space = Space::Linear;
  std::array<std::vector<double>, 3> channels;
  int origin_x = 0;
  int origin_y = 0;

  PixelPatch() = default;
  PixelPatch(int w, int h, Space s, int ox = 0, int oy = 0);

  std::size_t size() const { return static_cast<std::size_t>(width) * height; }
  double& at(int c, int x, int y) { return channels[c][static_cast<std::size_t>(y) * width + x]; }
  double at(int c, int x, int y) const { return channels[c][static_cast<std::size_t>(y) * width + x]; }

  /// Same geometry and space, zero-filled.
  PixelPatch like() const { return PixelPatch(width, height, space, origin_x, origin_y); }

  bool same_shape(const PixelPatch& o) const { return width == o.width && height == o.height; }
};

/// Throws SpaceMismatchError unless p.space == expected.
void require_space(const PixelPatch& p, Space expected, std::string_view op);

struct Roi {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  static constexpr int kMinSide = 8;

  friend bool operator==(const Roi&, const Roi&) = default;
  friend auto operator<=>(const Roi&, const Roi&) = default;
};

/// Throws RoiError unless roi lies fully inside a width x height image and is at least 8x8.
void validate_roi(const Roi& roi, int width, int height);

/// Parses "x,y,w,h". Throws ParameterError on malformed text.
Roi parse_roi(std::string_view text);

/// Per-channel count of values clamped by an inverse transform.
struct ClampCounts {
  std::array<std::size_t, 3> per_channel{};
  std::size_t total() const { return per_channel[0] + per_channel[1] + per_channel[2]; }
  ClampCounts& operator+=(const ClampCounts& o) {
    for (int c = 0; c < 3; ++c) per_channel[c] += o.per_channel[c];
    return *this;
  }
};

inline constexpr double kDefaultReflectanceFloor = 1e-4;

/// IEC 61966-2-1 piecewise sRGB decoding of one normalized value.
double srgb_eotf(double encoded);
/// Inverse of srgb_eotf, input clamped to [0, 1].
double srgb_oetf(double linear);
/// Round-to-nearest 8-bit quantization of a linear value through the sRGB OETF.
std::uint8_t encode_srgb8(double linear);
/// Table lookup of srgb_eotf(code / 255).
double decode_srgb8(std::uint8_t code);

PixelPatch srgb_to_linear(const RgbImage8& img);
/// Decodes only the pixels inside roi; the result's origin is (roi.x, roi.y).
PixelPatch srgb_to_linear(const RgbImage8& img, const Roi& roi);

RgbImage8 linear_to_srgb(const PixelPatch& p);

PixelPatch linear_to_log_absorption(const PixelPatch& p, double floor = kDefaultReflectanceFloor);

PixelPatch log_absorption_to_linear(const PixelPatch& p, double floor = kDefaultReflectanceFloor,
                                    ClampCounts* clamped = nullptr);

/// Copies the roi rectangle out of img (alpha included when present).
RgbImage8 crop(const RgbImage8& img, const Roi& roi);
/// Writes src into dst with its top-left corner at (x, y). RGB only; alpha of dst is kept.
void paste(RgbImage8& dst, const RgbImage8& src, int x, int y);

}  // namespace chromofit
