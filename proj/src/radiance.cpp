// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#include "blendfields/radiance.hpp"

#include <algorithm>
#include <cmath>

namespace blendfields {

VoxelGrid::VoxelGrid(GridShape s, Aabb box, int c, double fill)
    : shape(s), bbox(box), channels(c), values(static_cast<std::size_t>(s.nodes() * c), fill) {
  if (s.nx < 2 || s.ny < 2 || s.nz < 2) throw DimensionMismatch("grid resolution must be at least 2 per axis");
  if (!((box.hi.array() > box.lo.array()).all())) throw DimensionMismatch("grid box is degenerate");
  if (c < 1) throw DimensionMismatch("grid needs at least one channel");
}

Vec3 VoxelGrid::node_position(int i, int j, int k) const {
  const Vec3 step = bbox.extent().cwiseQuotient(Vec3(shape.nx - 1, shape.ny - 1, shape.nz - 1));
  return bbox.lo + Vec3(i, j, k).cwiseProduct(step);
}

TrilinearStencil trilinear_stencil(const GridShape& shape, const Aabb& bbox, const Vec3& p) {
  const std::array<int, 3> n{shape.nx, shape.ny, shape.nz};
  std::array<int, 3> base{};
  std::array<double, 3> frac{};
  for (int a = 0; a < 3; ++a) {
    double u = (p[a] - bbox.lo[a]) / (bbox.hi[a] - bbox.lo[a]) * (n[a] - 1);
    u = std::clamp(u, 0.0, static_cast<double>(n[a] - 1));
    int i = std::min(static_cast<int>(std::floor(u)), n[a] - 2);
    base[a] = i;
    frac[a] = u - i;
  }
  TrilinearStencil st;
  int c = 0;
  for (int dk = 0; dk < 2; ++dk) {
    const double wz = dk ? frac[2] : 1.0 - frac[2];
    for (int dj = 0; dj < 2; ++dj) {
      const double wy = dj ? frac[1] : 1.0 - frac[1];
      for (int di = 0; di < 2; ++di) {
        const double wx = di ? frac[0] : 1.0 - frac[0];
        st.node[c] = (std::int64_t{base[2] + dk} * shape.ny + (base[1] + dj)) * shape.nx + (base[0] + di);
        st.weight[c] = wx * wy * wz;
        ++c;
      }
    }
  }
  return st;
}

void sample_trilinear(const VoxelGrid& grid, const TrilinearStencil& st, std::span<double> out) {
  const int ch = grid.channels;
  std::fill(out.begin(), out.begin() + ch, 0.0);
  const double* v = grid.values.data();
  for (int c = 0; c < 8; ++c) {
    const double w = st.weight[c];
    const double* node = v + st.node[c] * ch;
    for (int i = 0; i < ch; ++i) out[i] += w * node[i];
  }
}

std::vector<double> sample_trilinear(const VoxelGrid& grid, const Vec3& p) {
  std::vector<double> out(static_cast<std::size_t>(grid.channels));
  sample_trilinear(grid, trilinear_stencil(grid.shape, grid.bbox, p), out);
  return out;
}

void RadianceModel::for_each_grid(const std::function<void(VoxelGrid&)>& fn) {
  fn(density);
  fn(template_color);
  for (auto& r : residuals) fn(r);
}

void RadianceModel::for_each_grid(const std::function<void(const VoxelGrid&)>& fn) const {
  fn(density);
  fn(template_color);
  for (const auto& r : residuals) fn(r);
}

std::size_t RadianceModel::parameter_count() const {
  std::size_t n = 0;
  for_each_grid([&](const VoxelGrid& g) { n += g.values.size(); });
  return n;
}

bool RadianceModel::operator==(const RadianceModel& other) const {
  if (residuals.size() != other.residuals.size()) return false;
  auto same = [](const VoxelGrid& a, const VoxelGrid& b) {
    return a.shape == b.shape && a.channels == b.channels && a.bbox.lo == b.bbox.lo && a.bbox.hi == b.bbox.hi &&
           a.values == b.values;
  };
  if (!same(density, other.density) || !same(template_color, other.template_color)) return false;
  for (std::size_t k = 0; k < residuals.size(); ++k) {
    if (!same(residuals[k], other.residuals[k])) return false;
  }
  return true;
}

RadianceModel init_model(GridShape shape, const Aabb& bbox, std::size_t expressions, std::uint64_t seed,
                         double noise) {
  RadianceModel m;
  m.density = VoxelGrid(shape, bbox, 1, kInitialDensityRaw);
  m.template_color = VoxelGrid(shape, bbox, 3, 0.0);
  m.residuals.assign(expressions, VoxelGrid(shape, bbox, 3, 0.0));
  if (noise > 0.0) {
    std::uint64_t grid_id = 0;
    m.for_each_grid([&](VoxelGrid& g) {
      Rng rng = Rng::keyed(seed, 0x1217, grid_id++);
      for (double& v : g.values) v += noise * (2.0 * rng.uniform() - 1.0);
    });
  }
  return m;
}

RadianceModel zeros_like(const RadianceModel& model) {
  RadianceModel z = model;
  z.for_each_grid([](VoxelGrid& g) { std::fill(g.values.begin(), g.values.end(), 0.0); });
  return z;
}

double density_at(const RadianceModel& model, const std::optional<Vec3>& canonical) {
  if (!canonical) return 0.0;
  SampleEval s;
  eval_density(model, *canonical, s);
  return s.sigma;
}

void eval_density(const RadianceModel& model, const Vec3& canonical, SampleEval& out) {
  out.stencil = trilinear_stencil(model.shape(), model.bbox(), canonical);
  double raw = 0.0;
  const double* d = model.density.values.data();
  for (int c = 0; c < 8; ++c) raw += out.stencil.weight[c] * d[out.stencil.node[c]];
  out.density_raw = raw;
  out.sigma = softplus(raw);
}

void eval_sample(const RadianceModel& model, const Vec3& canonical, std::span<const double> alpha, SampleEval& out) {
  eval_density(model, canonical, out);
  double buf[3];
  sample_trilinear(model.template_color, out.stencil, buf);
  out.template_raw = Vec3(buf[0], buf[1], buf[2]);
  Vec3 pre(sigmoid(buf[0]), sigmoid(buf[1]), sigmoid(buf[2]));
  for (std::size_t k = 0; k < alpha.size() && k < model.residuals.size(); ++k) {
    if (alpha[k] == 0.0) continue;
    sample_trilinear(model.residuals[k], out.stencil, buf);
    pre += alpha[k] * Vec3(buf[0], buf[1], buf[2]);
  }
  out.color_pre = pre;
  out.color = pre.cwiseMax(0.0).cwiseMin(1.0);
}

Vec3 color_at(const RadianceModel& model, const Vec3& canonical, std::span<const double> alpha) {
  SampleEval s;
  eval_sample(model, canonical, alpha, s);
  return s.color;
}

}  // namespace blendfields
