#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace objsdf::img {

/// Row-major float image with interleaved channels, values nominally in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0) : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}
  double& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
};

/// Row-major integer label map.
struct LabelMap {
  int width = 0;
  int height = 0;
  std::vector<int> data;

  LabelMap() = default;
  LabelMap(int w, int h, int fill = 0) : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}
  int& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  int at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

/// 8-bit PNG, gray or RGB depending on channels. Values are clamped to [0,1]
/// and rounded to the nearest code.
void write_png8(const std::string& path, const Image& image);
/// 16-bit gray PNG of raw codes.
void write_png16(const std::string& path, int width, int height, const std::vector<std::uint16_t>& codes);
/// Single channel 8-bit PNG holding the label values.
void write_label_png(const std::string& path, const LabelMap& labels);

/// Reads an 8-bit PNG into [0,1] values with the file's channel count
/// (1 or 3; alpha is dropped).
Image read_png8(const std::string& path);
LabelMap read_label_png(const std::string& path);
std::vector<std::uint16_t> read_png16(const std::string& path, int& width, int& height);

/// Little-endian float32 raster, row-major.
void write_float_raster(const std::string& path, const std::vector<float>& values);
std::vector<float> read_float_raster(const std::string& path, std::size_t count);

}  // namespace objsdf::img
