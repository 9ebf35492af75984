#include "chromofit/pixelcore.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <string>

#include "chromofit/errors.hpp"

namespace chromofit {

RgbImage8::RgbImage8(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, 0) {}

void RgbImage8::validate() const {
  if (width < 1 || height < 1) throw ParameterError("image dimensions must be positive");
  const std::size_t n = static_cast<std::size_t>(width) * height;
  if (data.size() != n * 3) throw ParameterError("image buffer size does not match dimensions");
  if (!alpha.empty() && alpha.size() != n) throw ParameterError("alpha plane size does not match dimensions");
}

std::string_view to_string(Space s) {
  switch (s) {
    case Space::Linear: return "linear";
    case Space::LogAbsorption: return "log-absorption";
    case Space::Chromophore: return "chromophore";
  }
  return "unknown";
}

PixelPatch::PixelPatch(int w, int h, Space s, int ox, int oy)
    : width(w), height(h), space(s), origin_x(ox), origin_y(oy) {
  for (auto& ch : channels) ch.assign(static_cast<std::size_t>(w) * h, 0.0);
}

void require_space(const PixelPatch& p, Space expected, std::string_view op) {
  if (p.space != expected) {
    throw SpaceMismatchError(std::string(op) + ": expected " + std::string(to_string(expected)) +
                             " patch, got " + std::string(to_string(p.space)));
  }
}

void validate_roi(const Roi& roi, int width, int height) {
  if (roi.w < Roi::kMinSide || roi.h < Roi::kMinSide) {
    throw RoiError("roi must be at least 8x8 pixels");
  }
  if (roi.x < 0 || roi.y < 0 || roi.x > width - roi.w || roi.y > height - roi.h) {
    throw RoiError("roi " + std::to_string(roi.x) + "," + std::to_string(roi.y) + "," + std::to_string(roi.w) +
                   "," + std::to_string(roi.h) + " exceeds image " + std::to_string(width) + "x" +
                   std::to_string(height));
  }
}

Roi parse_roi(std::string_view text) {
  int vals[4];
  const char* p = text.data();
  const char* end = text.data() + text.size();
  for (int i = 0; i < 4; ++i) {
    while (p < end && *p == ' ') ++p;
    auto [next, ec] = std::from_chars(p, end, vals[i]);
    if (ec != std::errc()) throw ParameterError("malformed roi '" + std::string(text) + "', expected x,y,w,h");
    p = next;
    while (p < end && *p == ' ') ++p;
    if (i < 3) {
      if (p == end || *p != ',') throw ParameterError("malformed roi '" + std::string(text) + "', expected x,y,w,h");
      ++p;
    }
  }
  if (p != end) throw ParameterError("malformed roi '" + std::string(text) + "', trailing characters");
  return Roi{vals[0], vals[1], vals[2], vals[3]};
}

double srgb_eotf(double v) {
  return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}

double srgb_oetf(double l) {
  l = std::clamp(l, 0.0, 1.0);
  return l <= 0.0031308 ? l * 12.92 : 1.055 * std::pow(l, 1.0 / 2.4) - 0.055;
}

namespace {

struct DecodeTable {
  std::array<double, 256> v{};
  DecodeTable() {
    for (int i = 0; i < 256; ++i) v[i] = srgb_eotf(i / 255.0);
  }
};

const DecodeTable& decode_table() {
  static const DecodeTable t;
  return t;
}

void check_floor(double floor) {
  if (!(floor > 0.0 && floor < 1.0)) throw ParameterError("reflectance floor must lie in (0, 1)");
}

}  // namespace

double decode_srgb8(std::uint8_t code) { return decode_table().v[code]; }

std::uint8_t encode_srgb8(double linear) {
  if (std::isnan(linear)) linear = 0.0;
  const double e = srgb_oetf(linear) * 255.0;
  return static_cast<std::uint8_t>(std::clamp(std::lround(e), 0L, 255L));
}

PixelPatch srgb_to_linear(const RgbImage8& img) {
  return srgb_to_linear(img, Roi{0, 0, img.width, img.height});
}

PixelPatch srgb_to_linear(const RgbImage8& img, const Roi& roi) {
  img.validate();
  if (roi.x < 0 || roi.y < 0 || roi.w < 1 || roi.h < 1 || roi.x + roi.w > img.width ||
      roi.y + roi.h > img.height) {
    throw RoiError("region exceeds image bounds");
  }
  PixelPatch out(roi.w, roi.h, Space::Linear, roi.x, roi.y);
  const auto& lut = decode_table().v;
  for (int y = 0; y < roi.h; ++y) {
    for (int x = 0; x < roi.w; ++x) {
      for (int c = 0; c < 3; ++c) out.at(c, x, y) = lut[img.at(roi.x + x, roi.y + y, c)];
    }
  }
  return out;
}

RgbImage8 linear_to_srgb(const PixelPatch& p) {
  require_space(p, Space::Linear, "linear_to_srgb");
  RgbImage8 out(p.width, p.height);
  for (int y = 0; y < p.height; ++y) {
    for (int x = 0; x < p.width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = encode_srgb8(p.at(c, x, y));
    }
  }
  return out;
}

PixelPatch linear_to_log_absorption(const PixelPatch& p, double floor) {
  require_space(p, Space::Linear, "linear_to_log_absorption");
  check_floor(floor);
  PixelPatch out = p.like();
  out.space = Space::LogAbsorption;
  for (int c = 0; c < 3; ++c) {
    const auto& src = p.channels[c];
    auto& dst = out.channels[c];
    for (std::size_t i = 0; i < src.size(); ++i) {
      // std::clamp would pass NaN through; max/min with the floor first maps it to the floor.
      const double r = std::min(std::max(src[i], floor), 1.0);
      dst[i] = -std::log(r);
    }
  }
  return out;
}

PixelPatch log_absorption_to_linear(const PixelPatch& p, double floor, ClampCounts* clamped) {
  require_space(p, Space::LogAbsorption, "log_absorption_to_linear");
  check_floor(floor);
  PixelPatch out = p.like();
  out.space = Space::Linear;
  for (int c = 0; c < 3; ++c) {
    const auto& src = p.channels[c];
    auto& dst = out.channels[c];
    std::size_t n = 0;
    for (std::size_t i = 0; i < src.size(); ++i) {
      const double r = std::exp(-src[i]);
      if (!(r >= floor)) {
        dst[i] = floor;
        ++n;
      } else if (r > 1.0) {
        dst[i] = 1.0;
        ++n;
      } else {
        dst[i] = r;
      }
    }
    if (clamped) clamped->per_channel[c] += n;
  }
  return out;
}

RgbImage8 crop(const RgbImage8& img, const Roi& roi) {
  if (roi.x < 0 || roi.y < 0 || roi.w < 1 || roi.h < 1 || roi.x + roi.w > img.width ||
      roi.y + roi.h > img.height) {
    throw RoiError("crop region exceeds image bounds");
  }
  RgbImage8 out(roi.w, roi.h);
  if (img.has_alpha()) out.alpha.resize(static_cast<std::size_t>(roi.w) * roi.h);
  for (int y = 0; y < roi.h; ++y) {
    const auto* src = &img.data[(static_cast<std::size_t>(roi.y + y) * img.width + roi.x) * 3];
    std::copy(src, src + static_cast<std::size_t>(roi.w) * 3, &out.data[static_cast<std::size_t>(y) * roi.w * 3]);
    if (img.has_alpha()) {
      const auto* a = &img.alpha[static_cast<std::size_t>(roi.y + y) * img.width + roi.x];
      std::copy(a, a + roi.w, &out.alpha[static_cast<std::size_t>(y) * roi.w]);
    }
  }
  return out;
}

void paste(RgbImage8& dst, const RgbImage8& src, int x, int y) {
  if (x < 0 || y < 0 || x + src.width > dst.width || y + src.height > dst.height) {
    throw RoiError("paste region exceeds destination bounds");
  }
  for (int j = 0; j < src.height; ++j) {
    const auto* s = &src.data[static_cast<std::size_t>(j) * src.width * 3];
    std::copy(s, s + static_cast<std::size_t>(src.width) * 3,
              &dst.data[(static_cast<std::size_t>(y + j) * dst.width + x) * 3]);
  }
}

}  // namespace chromofit
