#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace detseg::img {

// 8-bit image, row-major, channels interleaved. channels is 1 (gray) or 3 (RGB).
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<uint8_t> pixels;

  uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  uint8_t& at(int y, int x, int c = 0) {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
};

ImageU8 make_image(int width, int height, int channels, uint8_t fill = 0);

// Reads a PNG. Palette and 16-bit inputs are expanded/stripped to 8-bit;
// alpha is dropped. Throws std::runtime_error on failure, naming the path.
ImageU8 read_png(const std::string& path);

// Writes 8-bit grayscale or RGB. Throws std::runtime_error on failure.
void write_png(const std::string& path, const ImageU8& img);

}  // namespace detseg::img
