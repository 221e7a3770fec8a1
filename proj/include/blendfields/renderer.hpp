// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "blendfields/blendfield.hpp"
#include "blendfields/common.hpp"
#include "blendfields/image.hpp"
#include "blendfields/radiance.hpp"
#include "blendfields/tetmesh.hpp"

namespace blendfields {

/// Pinhole camera. Camera frame: +x right, +y down, +z forward.
struct Camera {
  int width = 0;
  int height = 0;
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  Mat3 rotation = Mat3::Identity();  // world_from_camera
  Vec3 center = Vec3::Zero();

  Vec3 forward() const { return rotation.col(2); }
  /// Image coordinates of a world point (pixel centres at +0.5).
  Eigen::Vector2d project(const Vec3& world) const;

  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, int width, int height, double focal);
};

/// Throws DimensionMismatch on non-positive focals or a non-orthonormal rotation.
void validate_camera(const Camera& cam);

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double t_near = 0.0;
  double t_far = 1.0;

  Vec3 at(double t) const { return origin + t * direction; }
};

struct RayBounds {
  double t_near = 0.05;
  double t_far = 100.0;
};

/// Ray through continuous image coordinates (x, y).
Ray generate_ray(const Camera& cam, double x, double y, const RayBounds& bounds);
/// Ray through the centre of pixel (px, py).
Ray pixel_ray(const Camera& cam, int px, int py, const RayBounds& bounds);

struct Span {
  double t_enter = 0.0;
  double t_exit = 0.0;
};

/// Slab test clipped to the ray bounds.
std::optional<Span> ray_box(const Ray& ray, const Aabb& box);

/// Union of the intervals where the ray crosses any tet box, clipped to the
/// ray bounds.
std::optional<Span> ray_cage_span(const Ray& ray, const TetBVH& bvh);

/// Stratified samples: one per equal bin of the span. A null rng places each
/// sample at its bin midpoint.
std::vector<double> sample_coarse(const Span& span, int count, Rng* rng);

/// Inverse-CDF samples from the piecewise-constant distribution over the
/// coarse bins (equal bins of the span, one weight per bin; weights floored at
/// kImportanceFloor). Returns the merged, sorted, de-duplicated samples.
std::vector<double> sample_importance(const Span& span, std::span<const double> coarse_t,
                                      std::span<const double> bin_weights, int count, Rng* rng);

inline constexpr double kImportanceFloor = 1e-5;
inline constexpr double kEarlyStopTransmittance = 1e-4;

/// Interval lengths: t[i+1] - t[i], closing the last at t_end.
std::vector<double> sample_deltas(std::span<const double> t, double t_end);

struct CompositeResult {
  Vec3 rgb = Vec3::Zero();
  std::vector<double> weights;        // T_i (1 - exp(-sigma_i delta_i)) for used samples
  std::vector<double> transmittance;  // T_i for used samples
  double t_final = 1.0;               // transmittance left after the last used sample
  std::size_t used = 0;               // samples before early termination
};

/// Emission-absorption quadrature with background composited by the residual
/// transmittance. Stops once transmittance falls below kEarlyStopTransmittance.
CompositeResult composite(std::span<const double> sigma, std::span<const Vec3> color, std::span<const double> delta,
                          const Vec3& background);

struct CompositeGrad {
  std::vector<double> d_sigma;
  std::vector<Vec3> d_color;
};

/// Reverse-mode derivatives of the composite. Samples past early termination
/// get zero gradient.
CompositeGrad backprop_composite(std::span<const double> sigma, std::span<const Vec3> color,
                                 std::span<const double> delta, const CompositeResult& forward,
                                 const Vec3& background, const Vec3& pixel_grad);

// --- scene rendering ---------------------------------------------------------

struct RenderSettings {
  RayBounds bounds;
  int n_coarse = 128;
  int n_importance = 64;
  int n_inference = 192;
  Vec3 background = Vec3::Zero();
  std::uint64_t seed = 0;
  bool jitter_inference = false;
};

enum class RenderMode { kTrain, kInference };

/// Read-only scene state for rendering one deformed frame.
struct SceneView {
  const RadianceModel* model = nullptr;
  const TetCage* cage = nullptr;
  const DeformedVerts* deformed = nullptr;
  const TetBVH* bvh = nullptr;
  /// Either a blend state (inference) or a constant alpha (training).
  const BlendState* blend = nullptr;
  Eigen::VectorXd constant_alpha;
  /// When set, sample colours are replaced by sum_k alpha_k * palette[k].
  const std::vector<Vec3>* palette = nullptr;
};

struct TracedSample {
  double t = 0.0;
  double delta = 0.0;
  bool hit = false;
  SampleEval eval;
};

struct TracedRay {
  Vec3 rgb = Vec3::Zero();
  std::vector<TracedSample> samples;  // evaluated prefix (up to early termination)
  CompositeResult composite;
};

/// Renders one ray. Train mode: stratified coarse pass for density, then
/// importance samples merged in. Inference mode: single-stage stratified.
TracedRay trace_ray(const SceneView& view, const RenderSettings& settings, const Ray& ray, RenderMode mode, Rng& rng);

/// Gradient accumulator shaped like a model, tracking touched nodes per grid.
class ModelGradient {
 public:
  explicit ModelGradient(const RadianceModel& like);

  /// grid: 0 density, 1 template, 2 + k residual k.
  void add(std::size_t grid, const TrilinearStencil& st, const double* d, int channels);
  void merge_from(const ModelGradient& other);
  void clear();

  VoxelGrid& grid(std::size_t g) { return g == 0 ? grads_.density : g == 1 ? grads_.template_color : grads_.residuals[g - 2]; }
  const VoxelGrid& grid(std::size_t g) const {
    return g == 0 ? grads_.density : g == 1 ? grads_.template_color : grads_.residuals[g - 2];
  }
  std::size_t grid_count() const { return 2 + grads_.residuals.size(); }
  const std::vector<std::int64_t>& touched(std::size_t g) const { return touched_[g]; }
  const RadianceModel& values() const { return grads_; }

 private:
  RadianceModel grads_;
  std::vector<std::vector<std::int64_t>> touched_;
  std::vector<std::vector<std::uint8_t>> mark_;
};

/// Chains per-sample composite gradients into the grids for a ray traced with
/// constant alpha. `sigma_extra` is added to every hit sample's d_sigma.
void accumulate_ray_gradient(const SceneView& view, const TracedRay& ray, const Vec3& background,
                             const Vec3& pixel_grad, double sigma_extra, ModelGradient& grad);

/// Renders every pixel (rows split across workers; each pixel keyed by its
/// index so output is independent of the worker count).
Image render_image(const SceneView& view, const RenderSettings& settings, const Camera& cam, RenderMode mode,
                   int workers = 1, std::uint64_t step = 0);

}  // namespace blendfields
