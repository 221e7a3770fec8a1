// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#include "blendfields/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Geometry>

#include "blendfields/parallel.hpp"

namespace blendfields {

Eigen::Vector2d Camera::project(const Vec3& world) const {
  const Vec3 p = rotation.transpose() * (world - center);
  return {fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy};
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, int width, int height, double focal) {
  Camera cam;
  cam.width = width;
  cam.height = height;
  cam.fx = focal;
  cam.fy = focal;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  const Vec3 f = (target - eye).normalized();
  const Vec3 r = f.cross(up).normalized();
  const Vec3 d = f.cross(r);
  cam.rotation.col(0) = r;
  cam.rotation.col(1) = d;
  cam.rotation.col(2) = f;
  cam.center = eye;
  return cam;
}

void validate_camera(const Camera& cam) {
  if (!(cam.fx > 0.0) || !(cam.fy > 0.0)) throw DimensionMismatch("camera focal lengths must be positive");
  if (cam.width <= 0 || cam.height <= 0) throw DimensionMismatch("camera image size must be positive");
  const double err = (cam.rotation.transpose() * cam.rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (!(err <= 1e-9)) throw DimensionMismatch("camera rotation is not orthonormal");
}

Ray generate_ray(const Camera& cam, double x, double y, const RayBounds& bounds) {
  const Vec3 d_cam((x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0);
  Ray ray;
  ray.origin = cam.center;
  ray.direction = (cam.rotation * d_cam).normalized();
  ray.t_near = bounds.t_near;
  ray.t_far = bounds.t_far;
  return ray;
}

Ray pixel_ray(const Camera& cam, int px, int py, const RayBounds& bounds) {
  return generate_ray(cam, px + 0.5, py + 0.5, bounds);
}

namespace {

bool slab(const Vec3& origin, const Vec3& inv_dir, const Aabb& box, double t0, double t1, double& enter,
          double& exit) {
  for (int a = 0; a < 3; ++a) {
    double ta = (box.lo[a] - origin[a]) * inv_dir[a];
    double tb = (box.hi[a] - origin[a]) * inv_dir[a];
    if (std::isnan(ta) || std::isnan(tb)) {
      // Ray parallel to and on the slab boundary.
      if (origin[a] < box.lo[a] || origin[a] > box.hi[a]) return false;
      continue;
    }
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  enter = t0;
  exit = t1;
  return true;
}

}  // namespace

std::optional<Span> ray_box(const Ray& ray, const Aabb& box) {
  const Vec3 inv = ray.direction.cwiseInverse();
  double enter = 0.0;
  double exit = 0.0;
  if (!slab(ray.origin, inv, box, ray.t_near, ray.t_far, enter, exit)) return std::nullopt;
  return Span{enter, exit};
}

std::optional<Span> ray_cage_span(const Ray& ray, const TetBVH& bvh) {
  const Vec3 inv = ray.direction.cwiseInverse();
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  const auto& nodes = bvh.nodes();
  std::int32_t stack[64];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const auto& n = nodes[stack[--top]];
    double enter = 0.0;
    double exit = 0.0;
    if (!slab(ray.origin, inv, n.box, ray.t_near, ray.t_far, enter, exit)) continue;
    // A subtree cannot widen the union if its box interval is already covered.
    if (enter >= lo && exit <= hi) continue;
    if (n.left < 0) {
      for (std::int32_t i = 0; i < n.count; ++i) {
        const std::int32_t t = bvh.order()[n.first + i];
        if (slab(ray.origin, inv, bvh.tet_box(t), ray.t_near, ray.t_far, enter, exit)) {
          lo = std::min(lo, enter);
          hi = std::max(hi, exit);
        }
      }
    } else {
      stack[top++] = n.left;
      stack[top++] = n.right;
    }
  }
  if (!(lo <= hi)) return std::nullopt;
  return Span{lo, hi};
}

std::vector<double> sample_coarse(const Span& span, int count, Rng* rng) {
  std::vector<double> t(static_cast<std::size_t>(std::max(count, 0)));
  const double width = (span.t_exit - span.t_enter) / count;
  for (int i = 0; i < count; ++i) {
    const double u = rng ? rng->uniform() : 0.5;
    t[i] = span.t_enter + (i + u) * width;
  }
  return t;
}

std::vector<double> sample_importance(const Span& span, std::span<const double> coarse_t,
                                      std::span<const double> bin_weights, int count, Rng* rng) {
  const std::size_t bins = bin_weights.size();
  std::vector<double> cdf(bins + 1, 0.0);
  for (std::size_t i = 0; i < bins; ++i) cdf[i + 1] = cdf[i] + std::max(bin_weights[i], kImportanceFloor);
  const double total = cdf[bins];
  for (double& c : cdf) c /= total;
  cdf[bins] = 1.0;

  const double width = (span.t_exit - span.t_enter) / static_cast<double>(bins);
  std::vector<double> out(coarse_t.begin(), coarse_t.end());
  out.reserve(coarse_t.size() + static_cast<std::size_t>(count));
  for (int j = 0; j < count; ++j) {
    const double u = (j + (rng ? rng->uniform() : 0.5)) / count;
    // First bin whose upper CDF edge exceeds u.
    auto it = std::upper_bound(cdf.begin() + 1, cdf.end(), u);
    std::size_t b = static_cast<std::size_t>(it - cdf.begin()) - 1;
    b = std::min(b, bins - 1);
    const double mass = cdf[b + 1] - cdf[b];
    const double frac = mass > 0.0 ? std::clamp((u - cdf[b]) / mass, 0.0, 1.0) : 0.5;
    out.push_back(span.t_enter + (static_cast<double>(b) + frac) * width);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<double> sample_deltas(std::span<const double> t, double t_end) {
  std::vector<double> d(t.size());
  for (std::size_t i = 0; i + 1 < t.size(); ++i) d[i] = t[i + 1] - t[i];
  if (!t.empty()) d.back() = std::max(0.0, t_end - t.back());
  return d;
}

CompositeResult composite(std::span<const double> sigma, std::span<const Vec3> color, std::span<const double> delta,
                          const Vec3& background) {
  CompositeResult r;
  const std::size_t n = sigma.size();
  r.weights.reserve(n);
  r.transmittance.reserve(n);
  double trans = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double absorb = std::exp(-sigma[i] * delta[i]);
    const double w = trans * (1.0 - absorb);
    r.weights.push_back(w);
    r.transmittance.push_back(trans);
    r.rgb += w * color[i];
    trans *= absorb;
    ++r.used;
    if (trans < kEarlyStopTransmittance) break;
  }
  r.t_final = trans;
  r.rgb += trans * background;
  return r;
}

CompositeGrad backprop_composite(std::span<const double> sigma, std::span<const Vec3> color,
                                 std::span<const double> delta, const CompositeResult& forward,
                                 const Vec3& background, const Vec3& pixel_grad) {
  CompositeGrad g;
  g.d_sigma.assign(sigma.size(), 0.0);
  g.d_color.assign(sigma.size(), Vec3::Zero());
  // suffix = sum_{j>i} w_j c_j + T_final * background
  Vec3 suffix = forward.t_final * background;
  for (std::size_t ii = forward.used; ii-- > 0;) {
    const double absorb = std::exp(-sigma[ii] * delta[ii]);
    g.d_color[ii] = forward.weights[ii] * pixel_grad;
    const Vec3 dc_dsigma = delta[ii] * (forward.transmittance[ii] * absorb * color[ii] - suffix);
    g.d_sigma[ii] = pixel_grad.dot(dc_dsigma);
    suffix += forward.weights[ii] * color[ii];
  }
  return g;
}

// --- scene rendering -----------------------------------------------------------

namespace {

struct Located {
  bool hit = false;
  Location loc;
  Vec3 canonical = Vec3::Zero();
};

Located locate(const SceneView& view, const Vec3& p) {
  Located out;
  if (auto loc = locate_point(*view.bvh, *view.cage, *view.deformed, p)) {
    out.hit = true;
    out.loc = *loc;
    out.canonical = canonical_point(*view.cage, *loc);
  }
  return out;
}

void shade(const SceneView& view, const Located& at, TracedSample& s) {
  if (view.blend || view.palette) {
    Eigen::VectorXd alpha =
        view.blend ? blend_at_location(*view.cage, *view.blend, at.loc) : Eigen::VectorXd(view.constant_alpha);
    if (view.palette) {
      eval_density(*view.model, at.canonical, s.eval);
      Vec3 c = Vec3::Zero();
      for (Eigen::Index k = 0; k < alpha.size() && k < static_cast<Eigen::Index>(view.palette->size()); ++k) {
        c += alpha[k] * (*view.palette)[k];
      }
      s.eval.color_pre = c;
      s.eval.color = c.cwiseMax(0.0).cwiseMin(1.0);
    } else {
      eval_sample(*view.model, at.canonical, std::span<const double>(alpha.data(), alpha.size()), s.eval);
    }
  } else {
    eval_sample(*view.model, at.canonical,
                std::span<const double>(view.constant_alpha.data(), view.constant_alpha.size()), s.eval);
  }
}

// Evaluates samples in order until transmittance drops below the cutoff, then
// composites the evaluated prefix.
template <typename EvalFn>
TracedRay march(const std::vector<double>& t, double t_end, const Vec3& background, EvalFn&& eval) {
  TracedRay out;
  const std::vector<double> deltas = sample_deltas(t, t_end);
  out.samples.reserve(t.size());
  double trans = 1.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    TracedSample& s = out.samples.emplace_back();
    s.t = t[i];
    s.delta = deltas[i];
    eval(i, s);
    trans *= std::exp(-s.eval.sigma * s.delta);
    if (trans < kEarlyStopTransmittance) break;
  }
  std::vector<double> sigma(out.samples.size());
  std::vector<Vec3> color(out.samples.size());
  std::vector<double> delta(out.samples.size());
  for (std::size_t i = 0; i < out.samples.size(); ++i) {
    sigma[i] = out.samples[i].eval.sigma;
    color[i] = out.samples[i].eval.color;
    delta[i] = out.samples[i].delta;
  }
  out.composite = composite(sigma, color, delta, background);
  out.rgb = out.composite.rgb;
  return out;
}

}  // namespace

TracedRay trace_ray(const SceneView& view, const RenderSettings& settings, const Ray& ray, RenderMode mode, Rng& rng) {
  const auto span = ray_cage_span(ray, *view.bvh);
  if (!span || !(span->t_exit > span->t_enter)) {
    TracedRay out;
    out.rgb = settings.background;
    out.composite.rgb = settings.background;
    return out;
  }

  if (mode == RenderMode::kInference) {
    const std::vector<double> t =
        sample_coarse(*span, settings.n_inference, settings.jitter_inference ? &rng : nullptr);
    return march(t, span->t_exit, settings.background, [&](std::size_t, TracedSample& s) {
      const Located at = locate(view, ray.at(s.t));
      s.hit = at.hit;
      if (at.hit) shade(view, at, s);
    });
  }

  // Coarse pass: density only, for the importance distribution.
  const std::vector<double> coarse_t = sample_coarse(*span, settings.n_coarse, &rng);
  std::vector<Located> coarse_loc(coarse_t.size());
  std::vector<double> coarse_sigma(coarse_t.size(), 0.0);
  const std::vector<double> coarse_delta = sample_deltas(coarse_t, span->t_exit);
  std::size_t located = 0;
  double trans = 1.0;
  for (std::size_t i = 0; i < coarse_t.size(); ++i) {
    coarse_loc[i] = locate(view, ray.at(coarse_t[i]));
    located = i + 1;
    if (coarse_loc[i].hit) {
      SampleEval e;
      eval_density(*view.model, coarse_loc[i].canonical, e);
      coarse_sigma[i] = e.sigma;
    }
    trans *= std::exp(-coarse_sigma[i] * coarse_delta[i]);
    if (trans < kEarlyStopTransmittance) break;
  }
  const std::vector<Vec3> zeros(coarse_t.size(), Vec3::Zero());
  const CompositeResult coarse = composite(coarse_sigma, zeros, coarse_delta, Vec3::Zero());
  std::vector<double> bin_weights(coarse_t.size(), 0.0);
  std::copy(coarse.weights.begin(), coarse.weights.end(), bin_weights.begin());
  const std::vector<double> merged = sample_importance(*span, coarse_t, bin_weights, settings.n_importance, &rng);

  return march(merged, span->t_exit, settings.background, [&](std::size_t, TracedSample& s) {
    const auto it = std::lower_bound(coarse_t.begin(), coarse_t.end(), s.t);
    const auto idx = static_cast<std::size_t>(it - coarse_t.begin());
    const Located at = (it != coarse_t.end() && *it == s.t && idx < located) ? coarse_loc[idx] : locate(view, ray.at(s.t));
    s.hit = at.hit;
    if (at.hit) shade(view, at, s);
  });
}

ModelGradient::ModelGradient(const RadianceModel& like) : grads_(zeros_like(like)) {
  touched_.resize(grid_count());
  mark_.resize(grid_count());
  for (std::size_t g = 0; g < grid_count(); ++g) mark_[g].assign(static_cast<std::size_t>(like.shape().nodes()), 0);
}

void ModelGradient::add(std::size_t g, const TrilinearStencil& st, const double* d, int channels) {
  VoxelGrid& grid_ref = grid(g);
  auto& mark = mark_[g];
  auto& touched = touched_[g];
  double* v = grid_ref.values.data();
  for (int c = 0; c < 8; ++c) {
    const std::int64_t node = st.node[c];
    if (!mark[node]) {
      mark[node] = 1;
      touched.push_back(node);
    }
    const double w = st.weight[c];
    double* dst = v + node * channels;
    for (int i = 0; i < channels; ++i) dst[i] += w * d[i];
  }
}

void ModelGradient::merge_from(const ModelGradient& other) {
  for (std::size_t g = 0; g < grid_count(); ++g) {
    VoxelGrid& dst = grid(g);
    const VoxelGrid& src = other.grid(g);
    const int ch = dst.channels;
    for (std::int64_t node : other.touched_[g]) {
      if (!mark_[g][node]) {
        mark_[g][node] = 1;
        touched_[g].push_back(node);
      }
      for (int i = 0; i < ch; ++i) dst.values[node * ch + i] += src.values[node * ch + i];
    }
  }
}

void ModelGradient::clear() {
  for (std::size_t g = 0; g < grid_count(); ++g) {
    VoxelGrid& grid_ref = grid(g);
    const int ch = grid_ref.channels;
    for (std::int64_t node : touched_[g]) {
      mark_[g][node] = 0;
      for (int i = 0; i < ch; ++i) grid_ref.values[node * ch + i] = 0.0;
    }
    touched_[g].clear();
  }
}

void accumulate_ray_gradient(const SceneView& view, const TracedRay& ray, const Vec3& background,
                             const Vec3& pixel_grad, double sigma_extra, ModelGradient& grad) {
  if (view.blend || view.palette) throw Error("gradients require a constant alpha");
  const std::size_t n = ray.samples.size();
  if (n == 0) return;
  std::vector<double> sigma(n);
  std::vector<Vec3> color(n);
  std::vector<double> delta(n);
  for (std::size_t i = 0; i < n; ++i) {
    sigma[i] = ray.samples[i].eval.sigma;
    color[i] = ray.samples[i].eval.color;
    delta[i] = ray.samples[i].delta;
  }
  const CompositeGrad cg = backprop_composite(sigma, color, delta, ray.composite, background, pixel_grad);
  const Eigen::VectorXd& alpha = view.constant_alpha;
  for (std::size_t i = 0; i < ray.composite.used; ++i) {
    const TracedSample& s = ray.samples[i];
    if (!s.hit) continue;
    const SampleEval& e = s.eval;
    const double d_density = (cg.d_sigma[i] + sigma_extra) * sigmoid(e.density_raw);
    grad.add(0, e.stencil, &d_density, 1);

    double d_pre[3];
    double d_template[3];
    bool any = false;
    for (int c = 0; c < 3; ++c) {
      // Clamped channels pass gradient only when descent moves them back
      // inside [0,1]; otherwise a saturated channel could never recover.
      const double pre = e.color_pre[c];
      const double d = cg.d_color[i][c];
      const bool open = (pre > 0.0 && pre < 1.0) || (pre >= 1.0 && d > 0.0) || (pre <= 0.0 && d < 0.0);
      d_pre[c] = open ? d : 0.0;
      const double sg = sigmoid(e.template_raw[c]);
      d_template[c] = d_pre[c] * sg * (1.0 - sg);
      any = any || d_pre[c] != 0.0;
    }
    grad.add(1, e.stencil, d_template, 3);
    if (!any) continue;
    for (Eigen::Index k = 0; k < alpha.size(); ++k) {
      if (alpha[k] == 0.0) continue;
      const double d_res[3] = {alpha[k] * d_pre[0], alpha[k] * d_pre[1], alpha[k] * d_pre[2]};
      grad.add(2 + static_cast<std::size_t>(k), e.stencil, d_res, 3);
    }
  }
}

Image render_image(const SceneView& view, const RenderSettings& settings, const Camera& cam, RenderMode mode,
                   int workers, std::uint64_t step) {
  Image img(cam.width, cam.height);
  parallel_chunks(static_cast<std::size_t>(cam.height), workers, [&](int, std::size_t y0, std::size_t y1) {
    for (std::size_t y = y0; y < y1; ++y) {
      for (int x = 0; x < cam.width; ++x) {
        const auto py = static_cast<int>(y);
        const Ray ray = pixel_ray(cam, x, py, settings.bounds);
        Rng rng = Rng::keyed(settings.seed, static_cast<std::uint64_t>(py) * cam.width + x, step, 0x5e);
        img.set(x, py, trace_ray(view, settings, ray, mode, rng).rgb);
      }
    }
  });
  return img;
}

}  // namespace blendfields
