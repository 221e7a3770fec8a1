// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "blendfields/image.hpp"

namespace blendfields {

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) over all channels; identical images give kPsnrCap.
double psnr(const Image& a, const Image& b);

/// Single-scale SSIM on channel-mean grey images: 11x11 Gaussian window
/// (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, averaged over every window position
/// that fits inside the image.
double ssim(const Image& a, const Image& b);

struct FrameMetrics {
  std::string frame;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::vector<FrameMetrics> frames;

  void add(std::string frame, const Image& prediction, const Image& target);
  double mean_psnr() const;
  double mean_ssim() const;
  /// Aligned table followed by one `frame=<id> psnr=<v> ssim=<v>` line per
  /// frame and a `mean psnr=<v> ssim=<v>` line.
  std::string to_text() const;
};

}  // namespace blendfields
