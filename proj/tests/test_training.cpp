// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "test_util.hpp"

using namespace bft;

namespace {

TrainConfig tiny_config(std::uint64_t seed) {
  TrainConfig c;
  c.batch_rays = 16;
  c.n_coarse = 16;
  c.n_importance = 8;
  c.lr = 0.05;
  c.lr_decay_steps = 1000;
  c.total_steps = 1000;
  c.seed = seed;
  return c;
}

RadianceModel tiny_model(const TinyScene& s, int res, double noise, std::uint64_t seed) {
  return init_model({res, res, res}, model_box(s.cage, 0.02), s.expressions, seed, noise);
}

// Small in-memory cylinder scene: 4 cameras, 24 px, expressions {0, .5, 1}.
struct CylinderFrames {
  GTScene scene;
  TetCage cage;
  std::vector<Frame> frames;
};

CylinderFrames cylinder_frames() {
  GTScene scene;
  scene.spec.radial_segments = 10;
  scene.spec.axial_segments = 6;
  CylinderFrames out{scene, make_cylinder_cage(scene.spec), {}};
  RigSpec rig;
  rig.ring_cameras = 4;
  rig.elevated_cameras = 0;
  rig.width = 24;
  rig.height = 24;
  const auto cams = make_rig(rig, scene.spec);
  GTRenderSettings gt;
  gt.samples = 256;
  int k = 0;
  for (double e : {0.0, 0.5, 1.0}) {
    Frame f;
    f.id = "e" + std::to_string(k);
    f.expression = k++;
    f.e = e;
    f.deformed = deform_twist(out.cage, scene.spec, e);
    f.cameras = cams;
    Aabb box;
    for (const Vec3& p : f.deformed.positions) box.expand(p);
    for (const Camera& c : cams) f.images.push_back(render_gt(scene, e, box, c, gt));
    out.frames.push_back(std::move(f));
  }
  return out;
}

}  // namespace

TEST(TrainingAlpha, IndicatorAndNeutral) {
  Frame f;
  f.expression = 2;
  const Eigen::VectorXd a = training_alpha(f, 5);
  ASSERT_EQ(a.size(), 5);
  EXPECT_EQ(a, (Eigen::VectorXd(5) << 0, 0, 1, 0, 0).finished());
  f.expression = kNeutral;
  EXPECT_EQ(training_alpha(f, 5), Eigen::VectorXd::Zero(5));
  EXPECT_EQ(training_alpha(f, 0).size(), 0);
}

TEST(RgbLoss, Examples) {
  Rng rng(61);
  std::vector<Vec3> a(50), b(50);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = random_vec(rng, 0, 1);
    b[i] = random_vec(rng, 0, 1);
  }
  EXPECT_EQ(rgb_loss(a, a), 0.0);
  std::vector<Vec3> shifted = a;
  for (Vec3& v : shifted) v.array() += 0.1;
  EXPECT_NEAR(rgb_loss(a, shifted), 0.03, 1e-12);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (int c = 0; c < 3; ++c) sum += (a[i][c] - b[i][c]) * (a[i][c] - b[i][c]);
  EXPECT_NEAR(rgb_loss(a, b), sum / 50.0, 1e-14);
}

TEST(Schedule, ContinuousAndStaircase) {
  TrainConfig c;
  c.lr = 0.05;
  c.lr_decay_factor = 0.1;
  c.lr_decay_steps = 1000;
  EXPECT_DOUBLE_EQ(learning_rate(c, 0), 0.05);
  EXPECT_NEAR(learning_rate(c, 1000), 0.005, 1e-15);
  EXPECT_NEAR(learning_rate(c, 500), 0.05 * std::pow(0.1, 0.5), 1e-15);
  c.lr_staircase = true;
  EXPECT_DOUBLE_EQ(learning_rate(c, 999), 0.05);
  EXPECT_NEAR(learning_rate(c, 2500), 0.0005, 1e-15);
}

TEST(Validate, RejectsBadConfigs) {
  TrainConfig c;
  EXPECT_NO_THROW(validate(c));
  c.lr = 0.0;
  EXPECT_NO_THROW(validate(c));
  c.lr = -1.0;
  EXPECT_THROW(validate(c), ConfigError);
  c = TrainConfig{};
  c.batch_rays = 0;
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(TrainStep, ZeroLearningRateKeepsModel) {
  const TinyScene s = tiny_scene(62, 4, 2, 2);
  const TrainingSet set(s.cage, s.frames, s.expressions);
  TrainConfig c = tiny_config(62);
  c.lr = 0.0;
  const RadianceModel init = tiny_model(s, 8, 0.3, 62);
  Trainer t(init, set, c, RenderSettings{});
  for (int i = 0; i < 3; ++i) t.step(i);
  EXPECT_TRUE(t.model() == init);
}

TEST(TrainStep, DeterministicCurves) {
  const TinyScene s = tiny_scene(63, 6, 2, 2);
  const TrainingSet set(s.cage, s.frames, s.expressions);
  const TrainConfig c = tiny_config(63);
  Trainer a(tiny_model(s, 8, 0.0, 1), set, c, RenderSettings{});
  Trainer b(tiny_model(s, 8, 0.0, 1), set, c, RenderSettings{});
  for (int i = 0; i < 20; ++i) {
    const StepStats x = a.step(i);
    const StepStats y = b.step(i);
    EXPECT_EQ(x.loss_rgb, y.loss_rgb);
    EXPECT_EQ(x.lr, y.lr);
  }
  EXPECT_TRUE(a.model() == b.model());
}

TEST(TrainStep, SinglePixelOverfits) {
  TinyScene s = tiny_scene(64, 1, 1, 1);
  s.frames[0].images[0].set(0, 0, Vec3(0.8, 0.3, 0.55));
  const TrainingSet set(s.cage, s.frames, s.expressions);
  TrainConfig c = tiny_config(64);
  c.batch_rays = 1;
  c.total_steps = 2000;
  c.lr_decay_steps = 2000;
  Trainer t(tiny_model(s, 8, 0.0, 1), set, c, RenderSettings{});
  double last = 1.0;
  for (int i = 0; i < 2000; ++i) last = t.step(i).loss_rgb;
  EXPECT_LT(last, 1e-4);
}

TEST(TrainStep, FrozenResidualsMatchTemplateOnly) {
  const TinyScene s = tiny_scene(65, 5, 2, 2);
  const TrainingSet with_k(s.cage, s.frames, 2);
  std::vector<Frame> neutral = s.frames;
  for (Frame& f : neutral) f.expression = kNeutral;
  const TrainingSet without(s.cage, neutral, 0);
  TrainConfig c = tiny_config(65);
  c.residual_lr_scale = 0.0;
  const Aabb box = model_box(s.cage, 0.02);
  Trainer a(init_model({8, 8, 8}, box, 2, 3), with_k, c, RenderSettings{});
  Trainer b(init_model({8, 8, 8}, box, 0, 3), without, c, RenderSettings{});
  for (int i = 0; i < 30; ++i) EXPECT_EQ(a.step(i).loss_rgb, b.step(i).loss_rgb);
  EXPECT_EQ(a.model().density.values, b.model().density.values);
  EXPECT_EQ(a.model().template_color.values, b.model().template_color.values);
  for (const VoxelGrid& r : a.model().residuals)
    for (double v : r.values) EXPECT_EQ(v, 0.0);
}

TEST(Gradient, EndToEndMatchesFiniteDifferences) {
  // 8^3 grids, 4x4 images. No importance pass, so sample positions do not
  // depend on the parameters; low density keeps early termination away.
  const TinyScene s = tiny_scene(66, 4, 2, 2);
  const TrainingSet set(s.cage, s.frames, s.expressions);
  TrainConfig c = tiny_config(66);
  c.batch_rays = 32;
  c.n_coarse = 32;
  c.n_importance = 0;
  c.sparsity_weight = 0.01;
  RadianceModel m = tiny_model(s, 8, 0.4, 66);
  for (auto& r : m.residuals)
    for (double& v : r.values) v *= 0.1;
  Trainer t(m, set, c, RenderSettings{});
  for (std::int64_t step : {0, 1}) {
    ModelGradient g(t.model());
    t.batch_loss(step, &g);
    Rng rng = Rng::keyed(66, static_cast<std::uint64_t>(step));
    int checked = 0;
    double worst = 0.0;
    for (std::size_t grid = 0; grid < g.grid_count(); ++grid) {
      std::vector<std::int64_t> nodes = g.touched(grid);
      std::sort(nodes.begin(), nodes.end());
      for (int pick = 0; pick < 16 && !nodes.empty(); ++pick) {
        const std::int64_t node = nodes[rng.below(nodes.size())];
        const int ch = g.grid(grid).channels;
        const std::size_t i = static_cast<std::size_t>(node * ch + static_cast<int>(rng.below(ch)));
        const double an = g.grid(grid).values[i];
        VoxelGrid& p = grid == 0 ? t.model().density
                       : grid == 1 ? t.model().template_color
                                   : t.model().residuals[grid - 2];
        const double v0 = p.values[i];
        const double h = 1e-4;
        p.values[i] = v0 + h;
        const double up = t.batch_loss(step, nullptr);
        p.values[i] = v0 - h;
        const double down = t.batch_loss(step, nullptr);
        p.values[i] = v0;
        const double fd = (up - down) / (2 * h);
        const double scale = std::max(std::abs(fd), std::abs(an));
        if (scale < 1e-7) continue;  // effectively untouched by this batch
        worst = std::max(worst, std::abs(fd - an) / scale);
        ++checked;
      }
    }
    EXPECT_GT(checked, 20);
    EXPECT_LE(worst, 1e-3);
  }
}

TEST(Training, CylinderLossTrendsDown) {
  const CylinderFrames cf = cylinder_frames();
  const TrainingSet set(cf.cage, cf.frames, 3);
  int pairs = 0;
  int increasing = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    TrainConfig c;
    c.batch_rays = 128;
    c.n_coarse = 48;
    c.n_importance = 24;
    c.total_steps = 2000;
    c.lr_decay_steps = 2000;
    c.seed = seed;
    Trainer t(init_model({24, 24, 24}, model_box(cf.cage, 0.02), 3, seed), set, c, RenderSettings{});
    // Window means carry minibatch noise; a rise counts only when it exceeds
    // two standard errors of the difference.
    std::vector<double> mean, se;
    std::vector<double> window;
    for (int i = 0; i < 2000; ++i) {
      window.push_back(t.step(i).loss_rgb);
      if (window.size() == 100) {
        double m = 0.0, v = 0.0;
        for (double x : window) m += x / 100.0;
        for (double x : window) v += (x - m) * (x - m) / 99.0;
        mean.push_back(m);
        se.push_back(std::sqrt(v / 100.0));
        window.clear();
      }
    }
    for (std::size_t w = 1; w < mean.size(); ++w) {
      ++pairs;
      if (mean[w] - mean[w - 1] > 2.0 * std::hypot(se[w], se[w - 1])) ++increasing;
    }
    EXPECT_LT(mean.back(), 0.5 * mean.front());
  }
  EXPECT_LE(increasing, pairs / 20);
}

TEST(Checkpoint, RoundTripAndErrors) {
  const TinyScene s = tiny_scene(67, 4, 2, 2);
  const TrainingSet set(s.cage, s.frames, s.expressions);
  Trainer t(tiny_model(s, 6, 0.1, 67), set, tiny_config(67), RenderSettings{});
  for (int i = 0; i < 3; ++i) t.step(i);
  const Checkpoint ck{3, R"({"note":"x"})", t.model(), t.adam()};
  const auto bytes = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(back.step, 3);
  EXPECT_EQ(back.metadata, ck.metadata);
  EXPECT_TRUE(back.model == ck.model);
  EXPECT_TRUE(back.adam.m == ck.adam.m);
  EXPECT_TRUE(back.adam.v == ck.adam.v);
  EXPECT_EQ(encode_checkpoint(back), bytes);

  const auto dir = scratch_dir("ckpt");
  save_checkpoint(dir / "a.bin", ck);
  save_checkpoint(dir / "b.bin", load_checkpoint(dir / "a.bin"));
  EXPECT_EQ(read_file(dir / "a.bin"), read_file(dir / "b.bin"));

  std::vector<unsigned char> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() / 2));
  EXPECT_THROW(decode_checkpoint(truncated), CorruptFile);
  std::vector<unsigned char> flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  EXPECT_THROW(decode_checkpoint(flipped), CorruptFile);
  std::vector<unsigned char> version = bytes;
  version[8] = 7;  // version field follows the 8-byte magic
  EXPECT_THROW(decode_checkpoint(version), VersionMismatch);
  std::vector<unsigned char> magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), CorruptFile);
  EXPECT_THROW(load_checkpoint(dir / "missing.bin"), IoError);
}

TEST(Checkpoint, ResumeMatchesUninterrupted) {
  const TinyScene s = tiny_scene(68, 5, 2, 2);
  const TrainingSet set(s.cage, s.frames, s.expressions);
  const TrainConfig c = tiny_config(68);
  Trainer full(tiny_model(s, 6, 0.0, 1), set, c, RenderSettings{});
  std::vector<double> losses;
  for (int i = 0; i < 10; ++i) losses.push_back(full.step(i).loss_rgb);

  Trainer first(tiny_model(s, 6, 0.0, 1), set, c, RenderSettings{});
  for (int i = 0; i < 4; ++i) first.step(i);
  const Checkpoint ck = decode_checkpoint(encode_checkpoint({4, "{}", first.model(), first.adam()}));
  Trainer second(ck.model, set, c, RenderSettings{});
  second.adam() = ck.adam;
  for (std::int64_t i = ck.step; i < 10; ++i) EXPECT_EQ(second.step(i).loss_rgb, losses[static_cast<std::size_t>(i)]);
  EXPECT_TRUE(second.model() == full.model());
}

TEST(TrainStep, NonFiniteLossThrows) {
  const TinyScene s = tiny_scene(69, 4, 1, 1);
  std::vector<Frame> frames = s.frames;
  frames[0].images[0].rgb.assign(frames[0].images[0].rgb.size(), std::nan(""));
  const TrainingSet set(s.cage, frames, 1);
  Trainer t(tiny_model(s, 6, 0.0, 1), set, tiny_config(69), RenderSettings{});
  EXPECT_THROW(t.step(0), NonFiniteLoss);
}

TEST(LogLine, Format) {
  const StepStats s{12, 0.05, 0.0125, 0.0, 23.8};
  EXPECT_EQ(format_log_line(s), "12, 0.05, 0.0125, 0, 23.800000");
}
