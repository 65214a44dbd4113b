// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ecglab/common.hpp"

namespace ecglab {

// 8-bit grayscale raster (channels kept for generality; the artifact renders
// single-channel images).
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;  // row-major, channel-minor

  static Raster blank(int width, int height, std::uint8_t fill = 255, int channels = 1);
  std::uint8_t at(int x, int y, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  void set(int x, int y, std::uint8_t v, int c = 0) {
    pixels[(static_cast<std::size_t>(y) * width + x) * channels + c] = v;
  }
};

// Binary 8-bit PGM (P5), bit-exact.
void write_pgm(const Raster& img, const std::string& path);
Raster read_pgm(const std::string& path);

}  // namespace ecglab
