// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#include "blendfields/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

namespace blendfields {

namespace {

void check_same(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height || a.rgb.size() != b.rgb.size())
    throw DimensionMismatch("images differ in size");
}

constexpr int kWindow = 11;

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> w{};
  double sum = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    sum += w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
  }
  for (double& v : w) v /= sum;
  return w;
}

// Separable valid-mode filter of a w x h field.
std::vector<double> filter_valid(const std::vector<double>& f, int w, int h, const std::array<double, kWindow>& k) {
  const int ow = w - kWindow + 1;
  const int oh = h - kWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kWindow; ++i) acc += k[i] * f[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kWindow; ++i) acc += k[i] * tmp[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  return out;
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  check_same(a, b);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) {
    const double d = a.rgb[i] - b.rgb[i];
    acc += d * d;
  }
  if (acc == 0.0 || a.rgb.empty()) return kPsnrCap;
  const double mse = acc / static_cast<double>(a.rgb.size());
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Image& a, const Image& b) {
  check_same(a, b);
  if (a.width < kWindow || a.height < kWindow) throw ImageTooSmall("SSIM needs images of at least 11x11 pixels");
  const int w = a.width;
  const int h = a.height;
  std::vector<double> x(static_cast<std::size_t>(w) * h);
  std::vector<double> y(x.size());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      x[static_cast<std::size_t>(r) * w + c] = a.gray(c, r);
      y[static_cast<std::size_t>(r) * w + c] = b.gray(c, r);
    }
  std::vector<double> xx(x.size());
  std::vector<double> yy(x.size());
  std::vector<double> xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto k = gaussian_window();
  const auto mx = filter_valid(x, w, h, k);
  const auto my = filter_valid(y, w, h, k);
  const auto sxx = filter_valid(xx, w, h, k);
  const auto syy = filter_valid(yy, w, h, k);
  const auto sxy = filter_valid(xy, w, h, k);
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  double acc = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cxy = sxy[i] - mx[i] * my[i];
    acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
           ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return acc / static_cast<double>(mx.size());
}

void MetricReport::add(std::string frame, const Image& prediction, const Image& target) {
  frames.push_back({std::move(frame), psnr(prediction, target), ssim(prediction, target)});
}

double MetricReport::mean_psnr() const {
  double acc = 0.0;
  for (const auto& f : frames) acc += f.psnr;
  return frames.empty() ? 0.0 : acc / static_cast<double>(frames.size());
}

double MetricReport::mean_ssim() const {
  double acc = 0.0;
  for (const auto& f : frames) acc += f.ssim;
  return frames.empty() ? 0.0 : acc / static_cast<double>(frames.size());
}

std::string MetricReport::to_text() const {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-24s %10s %10s\n", "frame", "psnr", "ssim");
  out += line;
  for (const auto& f : frames) {
    std::snprintf(line, sizeof(line), "%-24s %10.4f %10.6f\n", f.frame.c_str(), f.psnr, f.ssim);
    out += line;
  }
  std::snprintf(line, sizeof(line), "%-24s %10.4f %10.6f\n\n", "mean", mean_psnr(), mean_ssim());
  out += line;
  for (const auto& f : frames) {
    std::snprintf(line, sizeof(line), "frame=%s psnr=%.17g ssim=%.17g\n", f.frame.c_str(), f.psnr, f.ssim);
    out += line;
  }
  std::snprintf(line, sizeof(line), "mean psnr=%.17g ssim=%.17g frames=%zu\n", mean_psnr(), mean_ssim(), frames.size());
  out += line;
  return out;
}

}  // namespace blendfields
