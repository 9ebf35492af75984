#include "chromofit/png_io.hpp"

#include <png.h>

#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "chromofit/errors.hpp"

namespace chromofit {

namespace {

std::string image_message(const png_image& image) { return std::string(image.message); }

}  // namespace

RgbImage8 decode_png(std::span<const std::uint8_t> bytes) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw IoError("invalid PNG: " + image_message(image));
  }
  const bool alpha = (image.format & PNG_FORMAT_FLAG_ALPHA) != 0;
  image.format = alpha ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB;
  if (image.width == 0 || image.height == 0 || image.width > 1u << 15 || image.height > 1u << 15) {
    png_image_free(&image);
    throw IoError("PNG dimensions out of range");
  }
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    throw IoError("invalid PNG: " + image_message(image));
  }
  RgbImage8 img(static_cast<int>(image.width), static_cast<int>(image.height));
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  if (alpha) {
    img.alpha.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      img.data[i * 3 + 0] = buf[i * 4 + 0];
      img.data[i * 3 + 1] = buf[i * 4 + 1];
      img.data[i * 3 + 2] = buf[i * 4 + 2];
      img.alpha[i] = buf[i * 4 + 3];
    }
  } else {
    img.data = std::move(buf);
  }
  return img;
}

RgbImage8 read_png(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_png(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const RgbImage8& img) {
  img.validate();
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.has_alpha() ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB;

  std::vector<std::uint8_t> interleaved;
  const void* pixels = img.data.data();
  if (img.has_alpha()) {
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    interleaved.resize(n * 4);
    for (std::size_t i = 0; i < n; ++i) {
      interleaved[i * 4 + 0] = img.data[i * 3 + 0];
      interleaved[i * 4 + 1] = img.data[i * 3 + 1];
      interleaved[i * 4 + 2] = img.data[i * 3 + 2];
      interleaved[i * 4 + 3] = img.alpha[i];
    }
    pixels = interleaved.data();
  }

  // Worst-case buffer so the image is compressed only once.
  png_alloc_size_t size = PNG_IMAGE_PNG_SIZE_MAX(image);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels, 0, nullptr)) {
    throw IoError("PNG encode failed: " + image_message(image));
  }
  out.resize(size);
  return out;
}

void write_png(const std::filesystem::path& path, const RgbImage8& img) { write_file(path, encode_png(img)); }

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace chromofit
