// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <vector>

#include "blendfields/common.hpp"

namespace blendfields {

/// Linear RGB image, row-major, values nominally in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> rgb;  // 3 * width * height

  Image() = default;
  Image(int w, int h, const Vec3& fill = Vec3::Zero());

  Vec3 at(int x, int y) const {
    const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
    return Vec3(rgb[i], rgb[i + 1], rgb[i + 2]);
  }
  void set(int x, int y, const Vec3& c) {
    const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
    rgb[i] = c[0];
    rgb[i + 1] = c[1];
    rgb[i + 2] = c[2];
  }
  /// Channel-mean grey value.
  double gray(int x, int y) const {
    const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
    return (rgb[i] + rgb[i + 1] + rgb[i + 2]) / 3.0;
  }
  bool operator==(const Image&) const = default;
};

/// Byte value of a channel: round(clamp(c, 0, 1) * 255).
unsigned char quantize(double c);

/// Binary PPM (P6, maxval 255).
void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);

/// Image after an 8-bit round trip, as written to disk.
Image quantized(const Image& img);

}  // namespace blendfields
