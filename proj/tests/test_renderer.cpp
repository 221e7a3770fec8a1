// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "blendfields/metrics.hpp"
#include "test_util.hpp"

using namespace bft;

namespace {

Camera test_camera(int side = 24) {
  return Camera::look_at(Vec3(2.2, -1.6, 0.9), Vec3(0, 0, 0), Vec3::UnitZ(), side, side, 1.1 * side);
}

// Homogeneous slab rendered with midpoint samples over [0, length].
Vec3 homogeneous(int n, double sigma, double length, const Vec3& c) {
  const Span span{0.0, length};
  const auto t = sample_coarse(span, n, nullptr);
  const auto d = sample_deltas(t, span.t_exit);
  const std::vector<double> s(t.size(), sigma);
  const std::vector<Vec3> col(t.size(), c);
  return composite(s, col, d, Vec3::Zero()).rgb;
}

RadianceModel smooth_model(const Aabb& box, std::size_t k) {
  RadianceModel m = init_model({12, 12, 12}, box, k, 0);
  for (int z = 0; z < 12; ++z)
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x) {
        const Vec3 p = m.density.node_position(x, y, z);
        m.density.at(x, y, z, 0) = 1.0 + 1.5 * std::sin(3 * p.x()) * std::cos(2 * p.y());
        m.template_color.at(x, y, z, 0) = std::sin(2 * p.z());
        m.template_color.at(x, y, z, 1) = std::cos(3 * p.x());
        m.template_color.at(x, y, z, 2) = p.y();
      }
  return m;
}

}  // namespace

TEST(Camera, PrincipalRaySymmetryReprojection) {
  const Camera cam = test_camera(40);
  EXPECT_NO_THROW(validate_camera(cam));
  const RayBounds b;
  EXPECT_LE((generate_ray(cam, cam.cx, cam.cy, b).direction - cam.forward()).norm(), 1e-15);

  const Vec3 l = cam.rotation.transpose() * generate_ray(cam, cam.cx - 7.3, cam.cy + 2.1, b).direction;
  const Vec3 r = cam.rotation.transpose() * generate_ray(cam, cam.cx + 7.3, cam.cy + 2.1, b).direction;
  EXPECT_NEAR(l.x(), -r.x(), 1e-15);
  EXPECT_NEAR(l.y(), r.y(), 1e-15);
  EXPECT_NEAR(l.z(), r.z(), 1e-15);

  Rng rng(41);
  for (int i = 0; i < 200; ++i) {
    const double x = uniform(rng, 0, 40);
    const double y = uniform(rng, 0, 40);
    const Ray ray = generate_ray(cam, x, y, b);
    EXPECT_NEAR(ray.direction.norm(), 1.0, 1e-12);
    const Eigen::Vector2d px = cam.project(ray.at(uniform(rng, 0.5, 10.0)));
    EXPECT_NEAR(px.x(), x, 1e-6);
    EXPECT_NEAR(px.y(), y, 1e-6);
  }
  Camera bad = cam;
  bad.rotation(0, 0) += 1e-6;
  EXPECT_THROW(validate_camera(bad), DimensionMismatch);
}

TEST(RaySpan, SlabExampleAndMiss) {
  const TetCage cube = box_cage(Vec3(0, 0, 0), 1.0);
  const DeformedVerts rest = rest_state(cube);
  const TetBVH bvh(cube, rest);
  Ray r;
  r.origin = Vec3(0.5, 0.5, -2.0);
  r.direction = Vec3::UnitZ();
  r.t_near = 0.0;
  r.t_far = 100.0;
  const auto slab = ray_box(r, cube.rest_bounds());
  ASSERT_TRUE(slab);
  EXPECT_DOUBLE_EQ(slab->t_enter, 2.0);
  EXPECT_DOUBLE_EQ(slab->t_exit, 3.0);
  // The cage span is conservative: tet boxes carry a tiny pad.
  const auto span = ray_cage_span(r, bvh);
  ASSERT_TRUE(span);
  EXPECT_LE(span->t_enter, 2.0);
  EXPECT_GE(span->t_exit, 3.0);
  EXPECT_NEAR(span->t_enter, 2.0, 1e-6);
  EXPECT_NEAR(span->t_exit, 3.0, 1e-6);
  r.origin = Vec3(5, 5, -2);
  EXPECT_FALSE(ray_cage_span(r, bvh));
}

TEST(RaySpan, ContainsEveryDenseHit) {
  const TetCage cage = jittered_cylinder(42);
  const DeformedVerts d = wobble(cage, 42, 0.05);
  const TetBVH bvh(cage, d);
  Rng rng(42);
  int hits = 0;
  for (int i = 0; i < 100; ++i) {
    Ray r;
    r.origin = random_vec(rng, -2, 2) + Vec3(0, 0, 1);
    r.direction = (random_vec(rng, -0.4, 0.4) + Vec3(0, 0, 1) - r.origin).normalized();
    r.t_near = 0.0;
    r.t_far = 8.0;
    const auto span = ray_cage_span(r, bvh);
    for (int s = 0; s <= 4000; ++s) {
      const double t = 8.0 * s / 4000;
      if (!locate_point(bvh, cage, d, r.at(t))) continue;
      ++hits;
      ASSERT_TRUE(span);
      EXPECT_GE(t, span->t_enter);
      EXPECT_LE(t, span->t_exit);
    }
  }
  EXPECT_GT(hits, 1000);
}

TEST(Sampling, CoarseLadderAndOrder) {
  const Span span{1.0, 3.0};
  const auto mid = sample_coarse(span, 4, nullptr);
  EXPECT_EQ(mid, (std::vector<double>{1.25, 1.75, 2.25, 2.75}));
  Rng rng(43);
  const auto one = sample_coarse(span, 1, &rng);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_GE(one[0], 1.0);
  EXPECT_LT(one[0], 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    const auto t = sample_coarse(span, 128, &rng);
    for (std::size_t i = 0; i < t.size(); ++i) {
      EXPECT_GE(t[i], span.t_enter);
      EXPECT_LT(t[i], span.t_exit);
      if (i) {
        EXPECT_GT(t[i], t[i - 1]);
      }
    }
  }
}

TEST(Sampling, ImportanceUniformAndSingleBin) {
  const Span span{0.0, 8.0};
  const std::vector<double> none;
  const std::vector<double> flat(8, 0.3);
  const auto u = sample_importance(span, none, flat, 16, nullptr);
  ASSERT_EQ(u.size(), 16u);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(u[i], 0.25 + 0.5 * static_cast<double>(i), 1e-12);

  std::vector<double> single(8, 0.0);
  single[5] = 1.0;
  Rng rng(44);
  const auto s = sample_importance(span, none, single, 64, &rng);
  for (double t : s) {
    EXPECT_GE(t, 5.0);
    EXPECT_LE(t, 6.0);
  }

  const auto coarse = sample_coarse(span, 8, &rng);
  const auto merged = sample_importance(span, coarse, flat, 16, &rng);
  EXPECT_EQ(merged.size(), 24u);
  for (std::size_t i = 1; i < merged.size(); ++i) EXPECT_GT(merged[i], merged[i - 1]);
}

TEST(Sampling, ImportanceHistogramMatchesCdf) {
  const Span span{0.0, 1.0};
  const std::vector<double> w{0.05, 0.3, 0.0, 0.1, 0.4, 0.02, 0.08, 0.05};
  double total = 0.0;
  for (double x : w) total += std::max(x, kImportanceFloor);
  Rng rng(45);
  const int n = 100000;
  const auto t = sample_importance(span, {}, w, n, &rng);
  std::vector<int> hist(8, 0);
  for (double x : t) ++hist[std::min<std::size_t>(7, static_cast<std::size_t>(x * 8))];
  for (int b = 0; b < 8; ++b) {
    const double p = std::max(w[b], kImportanceFloor) / total;
    // 1% relative, plus one draw of discretisation for the floored bins.
    EXPECT_LE(std::abs(hist[b] / static_cast<double>(n) - p), 0.01 * p + 1.0 / n);
  }
}

TEST(Composite, BackgroundOpaqueAndBudget) {
  const std::vector<double> zero(5, 0.0);
  const std::vector<Vec3> col(5, Vec3(0.2, 0.4, 0.6));
  const std::vector<double> d(5, 0.1);
  const auto bg = composite(zero, col, d, Vec3(0.1, 0.9, 0.3));
  EXPECT_EQ(bg.rgb, Vec3(0.1, 0.9, 0.3));
  EXPECT_EQ(bg.t_final, 1.0);

  const std::vector<double> opaque{400.0, 1.0, 1.0};
  const std::vector<Vec3> c3{Vec3(0.3, 0.2, 0.1), Vec3(1, 1, 1), Vec3(1, 1, 1)};
  const std::vector<double> d3{0.1, 0.1, 0.1};
  const auto o = composite(opaque, c3, d3, Vec3(1, 1, 1));
  EXPECT_LE((o.rgb - c3[0]).cwiseAbs().maxCoeff(), 1e-12);

  Rng rng(46);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(40));
    std::vector<double> s(n), dd(n);
    std::vector<Vec3> c(n);
    for (int i = 0; i < n; ++i) {
      s[i] = uniform(rng, 0, 5);
      dd[i] = uniform(rng, 0, 0.3);
      c[i] = random_vec(rng, 0, 1);
    }
    const auto r = composite(s, c, dd, Vec3::Zero());
    double sum = r.t_final;
    for (std::size_t i = 0; i < r.used; ++i) {
      sum += r.weights[i];
      EXPECT_GT(r.transmittance[i], 0.0);
      EXPECT_LE(r.transmittance[i], 1.0);
      if (i) {
        EXPECT_LE(r.transmittance[i], r.transmittance[i - 1]);
      }
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(Composite, HomogeneousClosedFormAndConvergence) {
  const double exact = 1.0 - std::exp(-1.0);
  const Vec3 c = homogeneous(1024, 1.0, 1.0, Vec3(1, 0, 0));
  EXPECT_NEAR(c.x(), 0.632121, 1e-3);
  EXPECT_NEAR(c.x(), exact, 1e-3);
  EXPECT_EQ(c.y(), 0.0);
  double prev = std::abs(homogeneous(64, 1.0, 1.0, Vec3(1, 0, 0)).x() - exact);
  for (int n : {128, 256, 512}) {
    const double err = std::abs(homogeneous(n, 1.0, 1.0, Vec3(1, 0, 0)).x() - exact);
    EXPECT_LE(err, 0.5 * prev);
    prev = err;
  }
}

TEST(Backprop, ZeroSingleAndFiniteDifferences) {
  const std::vector<double> s1{0.7};
  const std::vector<Vec3> c1{Vec3(0.2, 0.5, 0.9)};
  const std::vector<double> d1{0.4};
  const auto f1 = composite(s1, c1, d1, Vec3::Zero());
  const auto zero = backprop_composite(s1, c1, d1, f1, Vec3::Zero(), Vec3::Zero());
  EXPECT_EQ(zero.d_sigma[0], 0.0);
  EXPECT_EQ(zero.d_color[0], Vec3::Zero());
  const auto g1 = backprop_composite(s1, c1, d1, f1, Vec3::Zero(), Vec3(1, 0, 0));
  EXPECT_NEAR(g1.d_color[0].x(), 1.0 - std::exp(-0.7 * 0.4), 1e-15);

  Rng rng(47);
  const double h = 1e-5;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 8;
    std::vector<double> s(n), d(n);
    std::vector<Vec3> c(n);
    for (int i = 0; i < n; ++i) {
      s[i] = uniform(rng, 0.0, 3.0);
      d[i] = uniform(rng, 0.05, 0.3);
      c[i] = random_vec(rng, 0, 1);
    }
    const Vec3 bg = random_vec(rng, 0, 1);
    const Vec3 up = random_vec(rng, -1, 1);
    const auto fwd = composite(s, c, d, bg);
    ASSERT_EQ(fwd.used, static_cast<std::size_t>(n));
    const auto g = backprop_composite(s, c, d, fwd, bg, up);
    auto loss = [&](const std::vector<double>& ss, const std::vector<Vec3>& cc) {
      return up.dot(composite(ss, cc, d, bg).rgb);
    };
    auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1e-2, std::max(std::abs(a), std::abs(b))); };
    for (int i = 0; i < n; ++i) {
      auto sp = s, sm = s;
      sp[i] += h;
      sm[i] -= h;
      worst = std::max(worst, rel((loss(sp, c) - loss(sm, c)) / (2 * h), g.d_sigma[i]));
      for (int ch = 0; ch < 3; ++ch) {
        auto cp = c, cm = c;
        cp[i][ch] += h;
        cm[i][ch] -= h;
        worst = std::max(worst, rel((loss(s, cp) - loss(s, cm)) / (2 * h), g.d_color[i][ch]));
      }
    }
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(RenderImage, EmptyCageSpanIsBackground) {
  const TetCage cube = box_cage(Vec3(20, 20, 20), 1.0);
  const DeformedVerts rest = rest_state(cube);
  const TetBVH bvh(cube, rest);
  const RadianceModel m = init_model({4, 4, 4}, cube.rest_bounds(), 1, 0);
  SceneView v{&m, &cube, &rest, &bvh, nullptr, Eigen::VectorXd::Zero(1), nullptr};
  RenderSettings rs;
  rs.background = Vec3(0.3, 0.6, 0.9);
  const Image img = render_image(v, rs, test_camera(), RenderMode::kInference);
  EXPECT_EQ(img, Image(24, 24, rs.background));
}

TEST(RenderImage, OpaqueCageSilhouette) {
  const TetCage cube = box_cage(Vec3(-0.5, -0.5, -0.5), 1.0);
  const DeformedVerts rest = rest_state(cube);
  const TetBVH bvh(cube, rest);
  RadianceModel m = init_model({4, 4, 4}, cube.rest_bounds(), 2, 0);
  for (double& x : m.density.values) x = 200.0;
  for (double& x : m.template_color.values) x = 0.0;
  for (std::size_t i = 0; i < m.residuals[0].values.size(); i += 3) m.residuals[0].values[i] = 0.3;
  RenderSettings rs;
  rs.background = Vec3(0, 0, 1);
  const Camera cam = test_camera(32);
  for (const Eigen::VectorXd& alpha : {Eigen::VectorXd(Eigen::Vector2d(1, 0)), Eigen::VectorXd(Eigen::Vector2d(0.5, 0.5))}) {
    SceneView v{&m, &cube, &rest, &bvh, nullptr, alpha, nullptr};
    const Image img = render_image(v, rs, cam, RenderMode::kInference);
    const Vec3 expect(0.5 + 0.3 * alpha[0], 0.5, 0.5);
    int inside = 0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const Ray r = pixel_ray(cam, x, y, rs.bounds);
        const auto span = ray_box(r, cube.rest_bounds());
        if (!span) {
          EXPECT_EQ(img.at(x, y), rs.background);
        } else if (span->t_exit - span->t_enter > 0.1) {
          ++inside;
          // Early termination leaves up to kEarlyStopTransmittance of background.
          EXPECT_LE((img.at(x, y) - expect).cwiseAbs().maxCoeff(), kEarlyStopTransmittance);
        }
      }
    EXPECT_GT(inside, 100);
  }
}

TEST(RenderImage, TrainAndInferenceAgree) {
  const TetCage cube = box_cage(Vec3(-0.5, -0.5, -0.5), 1.0);
  const DeformedVerts d = wobble(cube, 48, 0.05);
  const TetBVH bvh(cube, d);
  const RadianceModel m = smooth_model(cube.rest_bounds(), 1);
  SceneView v{&m, &cube, &d, &bvh, nullptr, Eigen::VectorXd::Zero(1), nullptr};
  RenderSettings rs;
  rs.seed = 48;
  const Camera cam = test_camera(48);
  const Image train = render_image(v, rs, cam, RenderMode::kTrain);
  const Image infer = render_image(v, rs, cam, RenderMode::kInference);
  EXPECT_GE(psnr(train, infer), 35.0);
}

TEST(RenderImage, DeterministicAcrossRunsAndWorkers) {
  const TetCage cage = jittered_cylinder(49);
  const DeformedVerts d = wobble(cage, 49, 0.03);
  const TetBVH bvh(cage, d);
  const RadianceModel m = smooth_model(cage.rest_bounds(), 1);
  SceneView v{&m, &cage, &d, &bvh, nullptr, Eigen::VectorXd::Zero(1), nullptr};
  RenderSettings rs;
  rs.seed = 7;
  const Camera cam = Camera::look_at(Vec3(3, 0, 1), Vec3(0, 0, 1), Vec3::UnitZ(), 20, 20, 30);
  const Image a = render_image(v, rs, cam, RenderMode::kTrain, 1, 3);
  EXPECT_EQ(a, render_image(v, rs, cam, RenderMode::kTrain, 1, 3));
  EXPECT_EQ(a, render_image(v, rs, cam, RenderMode::kTrain, 3, 3));
  EXPECT_NE(a, render_image(v, rs, cam, RenderMode::kTrain, 1, 4));
}

TEST(RenderImage, MissSamplesContributeNothing) {
  // A model dense everywhere in its box still renders pure background on rays
  // that cross the box but not the cage.
  const TetCage cube = box_cage(Vec3(-0.5, -0.5, -0.5), 1.0);
  DeformedVerts shrunk = rest_state(cube);
  for (Vec3& p : shrunk.positions) p *= 0.5;
  const TetBVH bvh(cube, shrunk);
  RadianceModel m = init_model({4, 4, 4}, cube.rest_bounds(), 1, 0);
  for (double& x : m.density.values) x = 50.0;
  SceneView v{&m, &cube, &shrunk, &bvh, nullptr, Eigen::VectorXd::Zero(1), nullptr};
  RenderSettings rs;
  Ray r;
  r.origin = Vec3(0.4, 0.4, -3);
  r.direction = Vec3::UnitZ();
  r.t_near = 0.0;
  r.t_far = 10.0;
  Rng rng(50);
  EXPECT_EQ(trace_ray(v, rs, r, RenderMode::kInference, rng).rgb, Vec3::Zero());
  EXPECT_EQ(trace_ray(v, rs, r, RenderMode::kTrain, rng).rgb, Vec3::Zero());
}
