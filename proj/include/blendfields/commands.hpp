// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "blendfields/config.hpp"
#include "blendfields/metrics.hpp"
#include "blendfields/scenes.hpp"
#include "blendfields/training.hpp"

namespace blendfields {

namespace fs = std::filesystem;

/// Renders the dataset described by config.scene into `out` and echoes the
/// resolved config next to the manifest.
Dataset cmd_gen_data(const RunConfig& config, const fs::path& out);

struct TrainResult {
  fs::path checkpoint;
  std::vector<StepStats> steps;  // steps run by this invocation
};

/// Trains from scratch, or from `resume`, up to config.train.total_steps.
/// Writes train.log, periodic checkpoint_<step>.bin, model.bin and
/// config.resolved.json under `out`.
TrainResult cmd_train(const RunConfig& config, const fs::path& data, const fs::path& out,
                      const std::optional<fs::path>& resume = std::nullopt, std::ostream* progress = nullptr);

/// A trained model with everything needed to drive it at a new expression.
class LoadedRun {
 public:
  /// Config comes from the checkpoint, with `overrides` applied on top.
  static LoadedRun open(const fs::path& checkpoint, const std::vector<std::string>& overrides = {},
                        const std::optional<fs::path>& data = std::nullopt);

  const RunConfig& config() const { return config_; }
  const Dataset& dataset() const { return dataset_; }
  const RadianceModel& model() const { return model_; }
  const DescriptorTable& table() const { return table_; }
  const SparseMatrix& laplacian() const { return laplacian_; }
  std::int64_t step() const { return step_; }

  DeformedVerts deformed_at(double e) const;
  BlendState blend_state(const DeformedVerts& deformed, const BlendParams& params) const;

  /// Inference render (single-stage sampling) at expression e.
  Image render(double e, const Camera& cam) const;
  /// Blend-weight visualisation: palette colours mixed by alpha under the
  /// model's density. `force` replaces alpha with a one-hot vector.
  Image render_weights(double e, const Camera& cam, const BlendParams& params,
                       std::optional<int> force = std::nullopt) const;

 private:
  LoadedRun(RunConfig config, Dataset dataset, RadianceModel model, std::int64_t step);

  RunConfig config_;
  Dataset dataset_;
  RadianceModel model_;
  DescriptorTable table_;
  SparseMatrix laplacian_;
  std::int64_t step_ = 0;
};

/// Fixed per-expression palette used by the weight visualisation.
const std::vector<Vec3>& weight_palette();

/// Writes render_e<e>_cam<NN>.ppm for one camera, or orbit_e<e>_<NNN>.ppm for
/// an orbit of `orbit` cameras. Returns the written paths.
std::vector<fs::path> cmd_render(const LoadedRun& run, double e, std::optional<int> camera, int orbit,
                                 const fs::path& out);

/// Renders every image of the split, writes eval_<split>.txt (and the renders
/// under eval_<split>/ when save_images is set).
MetricReport cmd_eval(const LoadedRun& run, const std::string& split, const fs::path& out, bool save_images = false);

struct WeightImages {
  Image unsmoothed;
  Image smoothed;
};

/// Writes weights_e<e>_cam<NN>_{raw,smoothed}.ppm.
WeightImages cmd_inspect_weights(const LoadedRun& run, double e, int camera, const fs::path& out);

}  // namespace blendfields
