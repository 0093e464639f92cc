#include "objsdf/datagen/image_io.h"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "objsdf/common/error.h"
#include "objsdf/common/fs.h"

namespace objsdf::img {

namespace {

void write_png_raw(const std::string& path, int width, int height, int color_type, int bit_depth,
                   const std::vector<unsigned char>& rows_data, std::size_t row_bytes) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw IoError("png: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png: cannot create info struct");
  }
  std::vector<unsigned char> out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png: encoding failed for " + path);
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t len) {
        auto* buf = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(p));
        buf->insert(buf->end(), data, data + len);
      },
      nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed settings keep the encoded bytes reproducible.
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(rows_data.data() + static_cast<std::size_t>(y) * row_bytes));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  write_file_atomic(path, std::span<const unsigned char>(out));
}

unsigned char to_code(double v) {
  if (!std::isfinite(v)) v = 0.0;
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

struct Decoded {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 8;
  std::vector<unsigned char> pixels;
};

Decoded decode(const std::string& path, bool sixteen) {
  const std::string bytes = read_file(path);
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw IoError(path + ": " + image.message);
  Decoded d;
  d.width = static_cast<int>(image.width);
  d.height = static_cast<int>(image.height);
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  if (sixteen) {
    image.format = PNG_FORMAT_LINEAR_Y;
    d.channels = 1;
    d.bit_depth = 16;
  } else {
    image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    d.channels = color ? 3 : 1;
  }
  d.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, d.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError(path + ": " + image.message);
  }
  return d;
}

}  // namespace

void write_png8(const std::string& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw IoError("png: only 1 or 3 channels are supported");
  if (image.data.size() != static_cast<std::size_t>(image.width) * image.height * image.channels)
    throw ShapeError("png: image buffer size mismatch");
  std::vector<unsigned char> rows(image.data.size());
  std::transform(image.data.begin(), image.data.end(), rows.begin(), to_code);
  write_png_raw(path, image.width, image.height, image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, 8,
                rows, static_cast<std::size_t>(image.width) * image.channels);
}

void write_png16(const std::string& path, int width, int height, const std::vector<std::uint16_t>& codes) {
  if (codes.size() != static_cast<std::size_t>(width) * height) throw ShapeError("png16: buffer size mismatch");
  std::vector<unsigned char> rows(codes.size() * 2);
  std::memcpy(rows.data(), codes.data(), rows.size());
  write_png_raw(path, width, height, PNG_COLOR_TYPE_GRAY, 16, rows, static_cast<std::size_t>(width) * 2);
}

void write_label_png(const std::string& path, const LabelMap& labels) {
  std::vector<unsigned char> rows(labels.data.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (labels.data[i] < 0 || labels.data[i] > 255) throw IoError("label png: label outside [0,255]");
    rows[i] = static_cast<unsigned char>(labels.data[i]);
  }
  write_png_raw(path, labels.width, labels.height, PNG_COLOR_TYPE_GRAY, 8, rows, static_cast<std::size_t>(labels.width));
}

Image read_png8(const std::string& path) {
  const Decoded d = decode(path, false);
  Image im(d.width, d.height, d.channels);
  for (std::size_t i = 0; i < im.data.size(); ++i) im.data[i] = d.pixels[i] / 255.0;
  return im;
}

LabelMap read_label_png(const std::string& path) {
  const Decoded d = decode(path, false);
  if (d.channels != 1) throw IoError(path + ": label maps must be single channel");
  LabelMap m(d.width, d.height);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = d.pixels[i];
  return m;
}

std::vector<std::uint16_t> read_png16(const std::string& path, int& width, int& height) {
  const Decoded d = decode(path, true);
  width = d.width;
  height = d.height;
  std::vector<std::uint16_t> out(static_cast<std::size_t>(width) * height);
  std::memcpy(out.data(), d.pixels.data(), out.size() * 2);
  return out;
}

static_assert(std::endian::native == std::endian::little, "raster I/O assumes a little-endian host");

void write_float_raster(const std::string& path, const std::vector<float>& values) {
  const auto* p = reinterpret_cast<const unsigned char*>(values.data());
  write_file_atomic(path, std::span<const unsigned char>(p, values.size() * sizeof(float)));
}

std::vector<float> read_float_raster(const std::string& path, std::size_t count) {
  const std::string bytes = read_file(path);
  if (bytes.size() != count * sizeof(float)) throw IoError(path + ": unexpected raster size");
  std::vector<float> out(count);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

}  // namespace objsdf::img
