// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#include "blendfields/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "json.hpp"

namespace blendfields {

using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::string fmt(const char* pattern, double e, int index) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), pattern, e, index);
  return buf;
}

bool listed(const std::vector<double>& codes, double e) {
  for (double c : codes)
    if (std::abs(c - e) < 1e-12) return true;
  return false;
}

}  // namespace

Dataset cmd_gen_data(const RunConfig& config, const fs::path& out) {
  make_dir(out);
  Dataset ds = render_dataset(config.scene, out, config.resolved_workers());
  write_text(out / "config.resolved.json", config_to_json(config));
  return ds;
}

TrainResult cmd_train(const RunConfig& config, const fs::path& data, const fs::path& out,
                      const std::optional<fs::path>& resume, std::ostream* progress) {
  const Dataset ds = load_dataset(data);
  const bool residuals = config.variant == ModelVariant::kBlendFields;
  const std::size_t k_count = residuals ? ds.expression_count() : 0;

  std::vector<Frame> frames;
  for (const DatasetPose* pose : ds.split("train")) {
    if (!config.train_frames.empty() && !listed(config.train_frames, pose->e)) continue;
    Frame f;
    f.id = pose->id;
    f.e = pose->e;
    f.expression = residuals && pose->expression ? *pose->expression : kNeutral;
    f.deformed = pose->deformed;
    f.cameras = ds.cameras;
    for (std::size_t c = 0; c < ds.cameras.size(); ++c) f.images.push_back(ds.load_image(*pose, c));
    frames.push_back(std::move(f));
  }
  if (frames.empty()) throw ConfigError("no training frames selected");
  const TrainingSet set(ds.cage, std::move(frames), k_count);

  RadianceModel model =
      init_model(config.grid, model_box(ds.cage, config.grid_padding), k_count, config.seed, config.init_noise);
  Trainer trainer(std::move(model), set, config.train, config.render, config.resolved_workers());
  std::int64_t start = 0;
  if (resume) {
    Checkpoint ck = load_checkpoint(*resume);
    if (ck.model.shape() != trainer.model().shape() || ck.model.expression_count() != k_count)
      throw ConfigError("checkpoint " + resume->string() + " does not match the configured model");
    trainer.model() = std::move(ck.model);
    trainer.adam() = std::move(ck.adam);
    start = ck.step;
  }

  make_dir(out);
  write_text(out / "config.resolved.json", config_to_json(config));
  const json meta{{"config", json::parse(config_to_json(config))}, {"data", fs::absolute(data).lexically_normal().string()}};
  const std::string metadata = meta.dump();
  auto checkpoint_at = [&](std::int64_t next) {
    return Checkpoint{next, metadata, trainer.model(), trainer.adam()};
  };

  std::ofstream log(out / "train.log", resume ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + (out / "train.log").string());
  if (!resume) log << "# step, lr, loss_rgb, loss_sparsity, psnr_train\n";

  TrainResult result;
  const std::int64_t total = config.train.total_steps;
  for (std::int64_t s = start; s < total; ++s) {
    const StepStats st = trainer.step(s);
    result.steps.push_back(st);
    if (s % config.log_every == 0 || s + 1 == total) {
      log << format_log_line(st) << '\n';
      log.flush();
      if (progress) *progress << format_log_line(st) << std::endl;
    }
    if (config.checkpoint_every > 0 && (s + 1) % config.checkpoint_every == 0 && s + 1 < total) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_%06lld.bin", static_cast<long long>(s + 1));
      save_checkpoint(out / name, checkpoint_at(s + 1));
    }
  }
  result.checkpoint = out / "model.bin";
  save_checkpoint(result.checkpoint, checkpoint_at(std::max(start, total)));
  return result;
}

// --- inference ------------------------------------------------------------------

LoadedRun LoadedRun::open(const fs::path& checkpoint, const std::vector<std::string>& overrides,
                          const std::optional<fs::path>& data) {
  Checkpoint ck = load_checkpoint(checkpoint);
  json meta;
  try {
    meta = json::parse(ck.metadata);
  } catch (const json::exception& ex) {
    throw CorruptFile("checkpoint metadata is not JSON: " + std::string(ex.what()));
  }
  if (!meta.contains("config") || !meta.contains("data")) throw CorruptFile("checkpoint metadata is incomplete");
  RunConfig config = apply_overrides(parse_config(meta["config"].dump()), overrides);
  Dataset dataset = load_dataset(data ? *data : fs::path(meta["data"].get<std::string>()));
  return LoadedRun(std::move(config), std::move(dataset), std::move(ck.model), ck.step);
}

LoadedRun::LoadedRun(RunConfig config, Dataset dataset, RadianceModel model, std::int64_t step)
    : config_(std::move(config)), dataset_(std::move(dataset)), model_(std::move(model)), step_(step) {
  const std::size_t k = model_.expression_count();
  if (k > 0) {
    if (k != dataset_.expression_count())
      throw DimensionMismatch("checkpoint expects " + std::to_string(k) + " expressions, dataset has " +
                              std::to_string(dataset_.expression_count()));
    std::vector<DeformedVerts> training(k);
    for (const DatasetPose* p : dataset_.split("train"))
      if (p->expression && *p->expression >= 0) training[static_cast<std::size_t>(*p->expression)] = p->deformed;
    table_ = build_descriptor_table(dataset_.cage, training, config_.neighborhood_size);
  }
  laplacian_ = assemble_laplacian(dataset_.cage);
}

DeformedVerts LoadedRun::deformed_at(double e) const {
  const DatasetSpec spec = dataset_spec_from_json(dataset_.scene_json);
  return deform(spec.scene.family, dataset_.cage, spec.scene.spec, e);
}

BlendState LoadedRun::blend_state(const DeformedVerts& deformed, const BlendParams& params) const {
  if (model_.expression_count() == 0) throw ConfigError("model has no residual expressions");
  return build_blend_state(dataset_.cage, laplacian_, table_, deformed, params);
}

Image LoadedRun::render(double e, const Camera& cam) const {
  const DeformedVerts deformed = deformed_at(e);
  const TetBVH bvh(dataset_.cage, deformed);
  SceneView view;
  view.model = &model_;
  view.cage = &dataset_.cage;
  view.deformed = &deformed;
  view.bvh = &bvh;
  std::optional<BlendState> blend;
  if (model_.expression_count() > 0) {
    blend = blend_state(deformed, config_.blend);
    view.blend = &*blend;
  }
  return render_image(view, config_.render, cam, RenderMode::kInference, config_.resolved_workers());
}

const std::vector<Vec3>& weight_palette() {
  static const std::vector<Vec3> palette{{0.9, 0.1, 0.1}, {0.1, 0.8, 0.1}, {0.1, 0.2, 0.9}, {0.9, 0.8, 0.1},
                                         {0.8, 0.1, 0.8}, {0.1, 0.8, 0.8}, {0.9, 0.5, 0.1}, {0.5, 0.5, 0.5}};
  return palette;
}

Image LoadedRun::render_weights(double e, const Camera& cam, const BlendParams& params, std::optional<int> force) const {
  const std::size_t k = model_.expression_count();
  if (k == 0) throw ConfigError("model has no residual expressions");
  if (k > weight_palette().size()) throw ConfigError("more expressions than palette colours");
  const DeformedVerts deformed = deformed_at(e);
  const TetBVH bvh(dataset_.cage, deformed);
  SceneView view;
  view.model = &model_;
  view.cage = &dataset_.cage;
  view.deformed = &deformed;
  view.bvh = &bvh;
  view.palette = &weight_palette();
  std::optional<BlendState> blend;
  if (force) {
    if (*force < 0 || static_cast<std::size_t>(*force) >= k) throw ConfigError("forced expression out of range");
    view.constant_alpha = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));
    view.constant_alpha[*force] = 1.0;
  } else {
    blend = blend_state(deformed, params);
    view.blend = &*blend;
  }
  return render_image(view, config_.render, cam, RenderMode::kInference, config_.resolved_workers());
}

std::vector<fs::path> cmd_render(const LoadedRun& run, double e, std::optional<int> camera, int orbit,
                                 const fs::path& out) {
  make_dir(out);
  std::vector<fs::path> written;
  if (camera) {
    if (*camera < 0 || static_cast<std::size_t>(*camera) >= run.dataset().cameras.size())
      throw ConfigError("camera index out of range");
    written.push_back(out / fmt("render_e%.6f_cam%02d.ppm", e, *camera));
    write_ppm(written.back(), run.render(e, run.dataset().cameras[static_cast<std::size_t>(*camera)]));
    return written;
  }
  if (orbit < 1) throw ConfigError("orbit needs at least one camera");
  RigSpec rig = run.config().scene.rig;
  rig.ring_cameras = orbit;
  rig.elevated_cameras = 0;
  const auto cams = make_rig(rig, run.config().scene.scene.spec);
  for (int i = 0; i < orbit; ++i) {
    written.push_back(out / fmt("orbit_e%.6f_%03d.ppm", e, i));
    write_ppm(written.back(), run.render(e, cams[static_cast<std::size_t>(i)]));
  }
  return written;
}

MetricReport cmd_eval(const LoadedRun& run, const std::string& split, const fs::path& out, bool save_images) {
  const auto poses = run.dataset().split(split);
  if (poses.empty()) throw ConfigError("dataset has no poses in split '" + split + "'");
  make_dir(out);
  const fs::path image_dir = out / ("eval_" + split);
  if (save_images) make_dir(image_dir);
  MetricReport report;
  for (const DatasetPose* pose : poses) {
    for (std::size_t c = 0; c < run.dataset().cameras.size(); ++c) {
      const Image pred = run.render(pose->e, run.dataset().cameras[c]);
      const Image target = run.dataset().load_image(*pose, c);
      char name[96];
      std::snprintf(name, sizeof(name), "%s_cam%02zu", pose->id.c_str(), c);
      report.add(name, quantized(pred), target);
      if (save_images) write_ppm(image_dir / (std::string(name) + ".ppm"), pred);
    }
  }
  write_text(out / ("eval_" + split + ".txt"), report.to_text());
  return report;
}

WeightImages cmd_inspect_weights(const LoadedRun& run, double e, int camera, const fs::path& out) {
  if (camera < 0 || static_cast<std::size_t>(camera) >= run.dataset().cameras.size())
    throw ConfigError("camera index out of range");
  const Camera& cam = run.dataset().cameras[static_cast<std::size_t>(camera)];
  BlendParams raw = run.config().blend;
  raw.smoothing_iters = 0;
  BlendParams smooth = run.config().blend;
  smooth.smoothing_iters = std::max(1, smooth.smoothing_iters);
  WeightImages imgs{run.render_weights(e, cam, raw), run.render_weights(e, cam, smooth)};
  make_dir(out);
  write_ppm(out / fmt("weights_e%.6f_cam%02d_raw.ppm", e, camera), imgs.unsmoothed);
  write_ppm(out / fmt("weights_e%.6f_cam%02d_smoothed.ppm", e, camera), imgs.smoothed);
  return imgs;
}

}  // namespace blendfields
