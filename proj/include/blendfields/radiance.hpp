// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "blendfields/common.hpp"

namespace blendfields {

struct GridShape {
  int nx = 2;
  int ny = 2;
  int nz = 2;

  std::int64_t nodes() const { return std::int64_t{nx} * ny * nz; }
  bool operator==(const GridShape&) const = default;
};

/// Dense voxel grid of raw parameters. Node (i, j, k) sits at
/// lo + (i, j, k) * (hi - lo) / (n - 1); channels are interleaved per node.
struct VoxelGrid {
  GridShape shape;
  Aabb bbox;
  int channels = 1;
  std::vector<double> values;

  VoxelGrid() = default;
  VoxelGrid(GridShape s, Aabb box, int c, double fill = 0.0);

  std::int64_t node_index(int i, int j, int k) const {
    return (std::int64_t{k} * shape.ny + j) * shape.nx + i;
  }
  double& at(int i, int j, int k, int c) { return values[node_index(i, j, k) * channels + c]; }
  double at(int i, int j, int k, int c) const { return values[node_index(i, j, k) * channels + c]; }
  Vec3 node_position(int i, int j, int k) const;
};

/// The 8 nodes surrounding a point and their trilinear weights. These weights
/// are also the derivative of the sample with respect to each node value.
struct TrilinearStencil {
  std::array<std::int64_t, 8> node{};
  std::array<double, 8> weight{};
};

/// Stencil for a point, clamping to the box on each axis.
TrilinearStencil trilinear_stencil(const GridShape& shape, const Aabb& bbox, const Vec3& p);

/// Interpolates every channel of the grid at the stencil into `out`.
void sample_trilinear(const VoxelGrid& grid, const TrilinearStencil& st, std::span<double> out);
std::vector<double> sample_trilinear(const VoxelGrid& grid, const Vec3& p);

inline double softplus(double x) { return x > 20.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Canonical-space radiance model: density, template colour and K signed
/// residual colour grids, all sharing shape and box.
struct RadianceModel {
  VoxelGrid density;         // 1 channel, softplus
  VoxelGrid template_color;  // 3 channels, sigmoid
  std::vector<VoxelGrid> residuals;  // K grids, 3 channels, identity

  std::size_t expression_count() const { return residuals.size(); }
  const GridShape& shape() const { return density.shape; }
  const Aabb& bbox() const { return density.bbox; }

  /// Visits every grid in a fixed order: density, template, residuals.
  void for_each_grid(const std::function<void(VoxelGrid&)>& fn);
  void for_each_grid(const std::function<void(const VoxelGrid&)>& fn) const;
  std::size_t parameter_count() const;

  bool operator==(const RadianceModel& other) const;
};

/// density raw = -2, template raw = 0, residuals = 0. With noise > 0 a
/// seeded perturbation is added to every raw value.
RadianceModel init_model(GridShape shape, const Aabb& bbox, std::size_t expressions, std::uint64_t seed,
                         double noise = 0.0);

/// Zero-valued model with the same layout (gradient / optimiser moments).
RadianceModel zeros_like(const RadianceModel& model);

inline constexpr double kInitialDensityRaw = -2.0;

double density_at(const RadianceModel& model, const std::optional<Vec3>& canonical);

/// Template colour plus alpha-weighted residuals, clamped to [0,1].
Vec3 color_at(const RadianceModel& model, const Vec3& canonical, std::span<const double> alpha);

/// Everything a sample needs for the forward pass and its derivatives.
struct SampleEval {
  TrilinearStencil stencil;
  double density_raw = 0.0;
  double sigma = 0.0;
  Vec3 template_raw = Vec3::Zero();
  Vec3 color_pre = Vec3::Zero();  // before clamping
  Vec3 color = Vec3::Zero();
};

/// Density only (coarse pass).
void eval_density(const RadianceModel& model, const Vec3& canonical, SampleEval& out);
/// Density and colour.
void eval_sample(const RadianceModel& model, const Vec3& canonical, std::span<const double> alpha, SampleEval& out);

}  // namespace blendfields
