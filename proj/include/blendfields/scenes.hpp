// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "blendfields/image.hpp"
#include "blendfields/renderer.hpp"
#include "blendfields/tetmesh.hpp"

namespace blendfields {

/// Procedural cylinder cage. The cylinder axis is z, the base sits at z = 0.
struct CylinderSpec {
  double radius = 0.5;
  double height = 2.0;
  int radial_segments = 16;
  int axial_segments = 12;
  int ring_layers = 2;
  double twist_max = 3.14159265358979323846;      // radians at e = 1
  double bend_max = 1.57079632679489661923;       // radians at e = 1
  double jitter = 0.0;  // interior-vertex perturbation, fraction of cell size
  std::uint64_t seed = 0;
};

/// Lattice of (ring, segment, level) cells split into tets along the cell
/// diagonal; cells touching the axis collapse to prisms of three tets.
TetCage make_cylinder_cage(const CylinderSpec& spec);

enum class DeformFamily { kTwist, kBend };

std::string to_string(DeformFamily f);
DeformFamily deform_family_from_string(const std::string& s);

/// Analytic deformation maps (rest -> deformed) and their inverses.
Vec3 twist_point(const CylinderSpec& spec, double e, const Vec3& p);
Vec3 bend_point(const CylinderSpec& spec, double e, const Vec3& p);
Vec3 deform_point(DeformFamily f, const CylinderSpec& spec, double e, const Vec3& p);
Vec3 undeform_point(DeformFamily f, const CylinderSpec& spec, double e, const Vec3& p);
/// Jacobian of deform_point at a rest point.
Mat3 deformation_jacobian(DeformFamily f, const CylinderSpec& spec, double e, const Vec3& rest);

DeformedVerts deform_twist(const TetCage& cage, const CylinderSpec& spec, double e);
DeformedVerts deform_bend(const TetCage& cage, const CylinderSpec& spec, double e);
DeformedVerts deform(DeformFamily f, const TetCage& cage, const CylinderSpec& spec, double e);

/// Ground-truth appearance of the rubber cylinder.
struct GTScene {
  DeformFamily family = DeformFamily::kTwist;
  CylinderSpec spec;
  double object_radius_scale = 0.9;  // of the inscribed cage radius
  double object_margin = 0.02;        // fraction of height trimmed at both caps
  double sigma_inside = 50.0;
  double wrinkle_amplitude = 0.22;
  double wrinkle_onset = 0.25;  // normalised compression where wrinkles start
  double wrinkle_full = 0.75;   // ... and reach full amplitude
  int wrinkle_angular_freq = 10;
  int wrinkle_axial_freq = 3;

  double object_radius() const;
  double object_z0() const { return object_margin * spec.height; }
  double object_z1() const { return (1.0 - object_margin) * spec.height; }
  /// Compression (1 - smallest principal stretch) at the rim for e = 1; the
  /// gate normalises by it.
  double reference_compression() const;
};

/// 1 - smallest singular value of the deformation Jacobian at a rest point.
double compression(const GTScene& scene, double e, const Vec3& rest);
/// Wrinkle amplitude gate in [0,1] at a rest point.
double wrinkle_gate(const GTScene& scene, double e, const Vec3& rest);
/// Base albedo at a rest point (no wrinkles).
Vec3 base_albedo(const GTScene& scene, const Vec3& rest);
/// Wrinkle pattern in [-1,1] at a rest point.
double wrinkle_pattern(const GTScene& scene, const Vec3& rest);

struct GTSample {
  double sigma = 0.0;
  Vec3 color = Vec3::Zero();
};

/// Density and colour at a deformed-space point for expression e.
GTSample gt_radiance(const GTScene& scene, const Vec3& deformed_point, double e);

struct GTRenderSettings {
  int samples = 1024;     // fixed steps across the ray/box overlap
  int supersampling = 1;  // s x s sub-pixel rays
  Vec3 background = Vec3::Zero();
  RayBounds bounds;
};

/// Reference image by dense fixed-step quadrature of gt_radiance.
Image render_gt(const GTScene& scene, double e, const Aabb& deformed_bounds, const Camera& cam,
                const GTRenderSettings& settings, int workers = 1);

struct RigSpec {
  int ring_cameras = 16;
  int elevated_cameras = 4;
  int width = 96;
  int height = 96;
  double distance = 4.5;
  double fov_degrees = 32.0;
  double elevation_degrees = 40.0;
};

/// Ring of cameras around the cylinder plus an elevated ring, all looking at
/// the cylinder's centre.
std::vector<Camera> make_rig(const RigSpec& rig, const CylinderSpec& spec);

// --- dataset -----------------------------------------------------------------

struct DatasetPose {
  std::string id;
  double e = 0.0;
  std::optional<int> expression;  // training poses: index k, or -1 for neutral
  std::string split;              // "train" or "eval"
  DeformedVerts deformed;
  std::vector<std::string> images;  // per camera, relative to the dataset root
};

struct Dataset {
  std::filesystem::path root;
  std::string scene_json;  // serialised GTScene and generation settings
  TetCage cage;
  std::vector<Camera> cameras;
  std::vector<DatasetPose> poses;

  std::size_t expression_count() const;
  std::vector<const DatasetPose*> split(const std::string& name) const;
  Image load_image(const DatasetPose& pose, std::size_t camera) const;
};

struct DatasetSpec {
  GTScene scene;
  RigSpec rig;
  GTRenderSettings gt;
  std::vector<double> train_expressions{0.0, 0.5, 1.0};
  bool neutral_rest = false;  // treat the e = 0 training pose as NEUTRAL
  int sequence_frames = 25;   // e = i / (sequence_frames - 1)
  int eval_stride = 4;
};

/// Expression codes of the evaluation split: every eval_stride-th frame of the
/// sequence, excluding training codes.
std::vector<double> eval_expressions(const DatasetSpec& spec);

/// Renders every (pose, camera) image and writes manifest.json, cage.tet and
/// images/ under `root`.
Dataset render_dataset(const DatasetSpec& spec, const std::filesystem::path& root, int workers = 1);

std::string manifest_to_string(const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& root);
void save_manifest(const Dataset& ds, const std::filesystem::path& path);

/// Scene description stored in the manifest.
std::string scene_to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const std::string& json);

// --- wrinkle detector ------------------------------------------------------------

/// Pixels of the object (differing from the background) eroded by `erosion` px.
std::vector<std::uint8_t> object_mask(const Image& reference, const Vec3& background, int erosion);

/// Mean squared band-pass (difference of Gaussians) response of the grey image
/// inside the mask.
double wrinkle_band_energy(const Image& img, const std::vector<std::uint8_t>& mask, double sigma_fine = 1.0,
                           double sigma_coarse = 2.0);

}  // namespace blendfields
