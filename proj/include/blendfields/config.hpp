// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "blendfields/blendfield.hpp"
#include "blendfields/radiance.hpp"
#include "blendfields/renderer.hpp"
#include "blendfields/scenes.hpp"
#include "blendfields/training.hpp"

namespace blendfields {

/// Which appearance model to train.
///   blendfields: template plus K residuals under indicator weights.
///   template:    template only (no residual grids).
enum class ModelVariant { kBlendFields, kTemplate };

std::string to_string(ModelVariant v);

struct RunConfig {
  std::uint64_t seed = 0;
  int workers = 1;  // 0: hardware concurrency capped by BLENDFIELDS_THREADS
  DatasetSpec scene;
  GridShape grid{64, 64, 64};
  double grid_padding = 0.02;
  double init_noise = 0.0;
  RenderSettings render;  // n_coarse / n_importance come from `train`
  BlendParams blend;
  std::size_t neighborhood_size = 20;
  TrainConfig train;
  ModelVariant variant = ModelVariant::kBlendFields;
  std::vector<double> train_frames;  // expression codes to train on; empty = all training poses
  int log_every = 100;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  std::string data_dir = "data";
  std::string out_dir = "run";

  int resolved_workers() const;
};

/// Default configuration as a JSON document. Every accepted key appears here.
std::string default_config_json();

/// Parses a JSON document layered over the defaults. Unknown keys and type
/// mismatches throw ConfigError.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);

/// Applies `key.path=value` overrides; the value is parsed as JSON, falling
/// back to a plain string.
RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& assignments);

/// Full resolved document (all defaults applied), pretty-printed.
std::string config_to_json(const RunConfig& config);

}  // namespace blendfields
