// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "blendfields/image.hpp"
#include "blendfields/radiance.hpp"
#include "blendfields/renderer.hpp"
#include "blendfields/tetmesh.hpp"

namespace blendfields {

inline constexpr int kNeutral = -1;

struct TrainConfig {
  int batch_rays = 1024;
  int n_coarse = 128;
  int n_importance = 64;
  double lr = 0.05;
  double lr_decay_factor = 0.1;
  int lr_decay_steps = 20000;
  bool lr_staircase = false;  // decay^floor(step / decay_steps) instead of decay^(step / decay_steps)
  int total_steps = 20000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double sparsity_weight = 0.0;
  double residual_lr_scale = 1.0;
  std::uint64_t seed = 0;
};

/// Throws ConfigError on non-positive counts or a negative learning rate.
/// lr == 0 is accepted here (frozen step); run configs require lr > 0.
void validate(const TrainConfig& config);

double learning_rate(const TrainConfig& config, std::int64_t step);

/// One multi-view training pose: all cameras at one expression code.
struct Frame {
  std::string id;
  int expression = kNeutral;  // k in [0, K) or kNeutral
  double e = 0.0;
  DeformedVerts deformed;
  std::vector<Camera> cameras;
  std::vector<Image> images;  // one per camera
};

/// Frames plus the acceleration structures built once per frame.
class TrainingSet {
 public:
  TrainingSet(const TetCage& cage, std::vector<Frame> frames, std::size_t expressions);

  const TetCage& cage() const { return *cage_; }
  std::size_t expression_count() const { return expressions_; }
  std::size_t size() const { return frames_.size(); }
  const Frame& frame(std::size_t i) const { return frames_[i]; }
  const TetBVH& bvh(std::size_t i) const { return *bvhs_[i]; }

 private:
  const TetCage* cage_;
  std::vector<Frame> frames_;
  std::vector<std::unique_ptr<TetBVH>> bvhs_;
  std::size_t expressions_;
};

/// Indicator of the frame's expression; zero vector for NEUTRAL.
Eigen::VectorXd training_alpha(const Frame& frame, std::size_t expressions);

/// Mean over the batch of the squared RGB error.
double rgb_loss(std::span<const Vec3> predicted, std::span<const Vec3> target);

/// Adam moments. Updates are lazy: only nodes touched by the batch move, with
/// bias correction from the global step.
struct AdamState {
  RadianceModel m;
  RadianceModel v;
};

AdamState init_adam(const RadianceModel& model);

/// Parameter box: the rest cage bounds grown by `padding` times their extent.
Aabb model_box(const TetCage& cage, double padding);

struct StepStats {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss_rgb = 0.0;
  double loss_sparsity = 0.0;
  double psnr_train = 0.0;
};

/// `step, lr, loss_rgb, loss_sparsity, psnr_train` as one comma-separated line.
std::string format_log_line(const StepStats& s);

class Trainer {
 public:
  Trainer(RadianceModel model, const TrainingSet& data, TrainConfig config, RenderSettings render, int workers = 1);

  /// Frame = step mod frame count; rays keyed by (seed, step, ray index).
  StepStats step(std::int64_t step);

  const RadianceModel& model() const { return model_; }
  RadianceModel& model() { return model_; }
  const AdamState& adam() const { return adam_; }
  AdamState& adam() { return adam_; }
  const TrainConfig& config() const { return config_; }

  /// Loss and analytic gradient of the step's batch, without updating.
  double batch_loss(std::int64_t step, ModelGradient* grad) const;

 private:
  struct Partial {
    double rgb = 0.0;
    double sparsity = 0.0;
  };
  Partial run_batch(std::int64_t step, std::vector<ModelGradient>* grads) const;
  void apply_adam(const ModelGradient& grad, double lr, std::int64_t step);

  RadianceModel model_;
  AdamState adam_;
  const TrainingSet* data_;
  TrainConfig config_;
  RenderSettings render_;
  int workers_;
  std::vector<ModelGradient> grads_;
};

// --- checkpoints ------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::int64_t step = 0;   // next step to run
  std::string metadata;    // free-form JSON (resolved config, dataset path)
  RadianceModel model;
  AdamState adam;
};

/// Binary container: magic, version, step, metadata, every grid with its Adam
/// moments, and a trailing CRC-32 of everything before it.
std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace blendfields
