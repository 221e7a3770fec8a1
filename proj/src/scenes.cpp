// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#include "blendfields/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include <Eigen/Eigenvalues>
#include "json.hpp"

#include "blendfields/parallel.hpp"

namespace blendfields {

using nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;

void check_spec(const CylinderSpec& s) {
  if (s.radial_segments < 3 || s.axial_segments < 2 || s.ring_layers < 1)
    throw DegenerateTet("cylinder spec needs >= 3 radial, >= 2 axial segments and >= 1 ring");
  if (!(s.radius > 0.0) || !(s.height > 0.0)) throw DegenerateTet("cylinder spec needs positive dimensions");
  if (!(s.jitter >= 0.0) || s.jitter >= 0.5) throw DegenerateTet("cylinder jitter must lie in [0, 0.5)");
}

double smoothstep(double a, double b, double x) {
  if (x <= a) return 0.0;
  if (x >= b) return 1.0;
  const double t = (x - a) / (b - a);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace

TetCage make_cylinder_cage(const CylinderSpec& spec) {
  check_spec(spec);
  const int n = spec.radial_segments;
  const int levels = spec.axial_segments + 1;
  const int rings = spec.ring_layers;
  auto vid = [&](int r, int j, int k) -> std::int32_t {
    if (r == 0) return k;
    return levels + ((r - 1) * n + ((j % n) + n) % n) * levels + k;
  };

  const double dr = spec.radius / rings;
  const double dth = 2.0 * kPi / n;
  const double dz = spec.height / spec.axial_segments;
  std::vector<Vec3> verts(static_cast<std::size_t>(levels) * (1 + rings * n));
  for (int k = 0; k < levels; ++k) {
    const double z = dz * k;
    const bool interior_z = k > 0 && k < levels - 1;
    {
      Vec3 p(0.0, 0.0, z);
      if (spec.jitter > 0.0 && interior_z) {
        Rng rng = Rng::keyed(spec.seed, static_cast<std::uint64_t>(vid(0, 0, k)), 0xc1);
        p.x() += spec.jitter * dr * (rng.uniform() - 0.5);
        p.y() += spec.jitter * dr * (rng.uniform() - 0.5);
        p.z() += spec.jitter * dz * (rng.uniform() - 0.5);
      }
      verts[vid(0, 0, k)] = p;
    }
    for (int r = 1; r <= rings; ++r) {
      for (int j = 0; j < n; ++j) {
        double rad = dr * r;
        double th = dth * j;
        double zz = z;
        if (spec.jitter > 0.0 && interior_z && r < rings) {
          Rng rng = Rng::keyed(spec.seed, static_cast<std::uint64_t>(vid(r, j, k)), 0xc1);
          rad += spec.jitter * dr * (rng.uniform() - 0.5);
          th += spec.jitter * dth * (rng.uniform() - 0.5);
          zz += spec.jitter * dz * (rng.uniform() - 0.5);
        }
        verts[vid(r, j, k)] = Vec3(rad * std::cos(th), rad * std::sin(th), zz);
      }
    }
  }

  // Every cell is split along its main diagonal into the six monotone paths
  // from corner (0,0,0) to (1,1,1); the split is translation invariant, so
  // shared faces match. Next to the axis the a = 0 corners coincide and
  // three of the six paths collapse.
  static constexpr int kPerms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  std::vector<Tet> tets;
  for (int r = 0; r < rings; ++r) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < spec.axial_segments; ++k) {
        for (const auto& perm : kPerms) {
          int c[3] = {0, 0, 0};
          Tet t{};
          t[0] = vid(r, j, k);
          for (int s = 0; s < 3; ++s) {
            ++c[perm[s]];
            t[s + 1] = vid(r + c[0], j + c[1], k + c[2]);
          }
          if (t[0] == t[1] || t[1] == t[2] || t[2] == t[3] || t[0] == t[2] || t[0] == t[3] || t[1] == t[3])
            continue;
          if (edge_matrix(verts, t).determinant() < 0.0) std::swap(t[1], t[2]);
          tets.push_back(t);
        }
      }
    }
  }
  return TetCage(std::move(verts), std::move(tets));
}

std::string to_string(DeformFamily f) { return f == DeformFamily::kTwist ? "twist" : "bend"; }

DeformFamily deform_family_from_string(const std::string& s) {
  if (s == "twist") return DeformFamily::kTwist;
  if (s == "bend") return DeformFamily::kBend;
  throw ConfigError("unknown deformation family: " + s);
}

Vec3 twist_point(const CylinderSpec& spec, double e, const Vec3& p) {
  const double a = e * spec.twist_max * p.z() / spec.height;
  const double c = std::cos(a);
  const double s = std::sin(a);
  return Vec3(c * p.x() - s * p.y(), s * p.x() + c * p.y(), p.z());
}

namespace {
double bend_curvature(const CylinderSpec& spec, double e) { return e * spec.bend_max / spec.height; }
}  // namespace

Vec3 bend_point(const CylinderSpec& spec, double e, const Vec3& p) {
  const double kappa = bend_curvature(spec, e);
  if (kappa == 0.0) return p;
  const double rho = 1.0 / kappa;
  const double phi = kappa * p.z();
  const double arm = rho - p.x();
  return Vec3(rho - arm * std::cos(phi), p.y(), arm * std::sin(phi));
}

Vec3 deform_point(DeformFamily f, const CylinderSpec& spec, double e, const Vec3& p) {
  return f == DeformFamily::kTwist ? twist_point(spec, e, p) : bend_point(spec, e, p);
}

Vec3 undeform_point(DeformFamily f, const CylinderSpec& spec, double e, const Vec3& p) {
  if (f == DeformFamily::kTwist) return twist_point(spec, -e, p);
  const double kappa = bend_curvature(spec, e);
  if (kappa == 0.0) return p;
  const double rho = 1.0 / kappa;
  const double u = rho - p.x();
  const double phi = std::atan2(p.z(), u);
  return Vec3(rho - std::hypot(u, p.z()), p.y(), phi / kappa);
}

Mat3 deformation_jacobian(DeformFamily f, const CylinderSpec& spec, double e, const Vec3& rest) {
  Mat3 j;
  if (f == DeformFamily::kTwist) {
    const double kappa = e * spec.twist_max / spec.height;
    const double a = kappa * rest.z();
    const double c = std::cos(a);
    const double s = std::sin(a);
    j << c, -s, kappa * (-s * rest.x() - c * rest.y()),  //
        s, c, kappa * (c * rest.x() - s * rest.y()),     //
        0.0, 0.0, 1.0;
  } else {
    const double kappa = bend_curvature(spec, e);
    const double phi = kappa * rest.z();
    const double stretch = 1.0 - kappa * rest.x();
    j << std::cos(phi), 0.0, stretch * std::sin(phi),  //
        0.0, 1.0, 0.0,                                 //
        -std::sin(phi), 0.0, stretch * std::cos(phi);
  }
  return j;
}

DeformedVerts deform(DeformFamily f, const TetCage& cage, const CylinderSpec& spec, double e) {
  DeformedVerts out;
  out.expression_code = e;
  out.positions.reserve(cage.vertex_count());
  for (const Vec3& p : cage.rest_vertices()) out.positions.push_back(deform_point(f, spec, e, p));
  return out;
}

DeformedVerts deform_twist(const TetCage& cage, const CylinderSpec& spec, double e) {
  return deform(DeformFamily::kTwist, cage, spec, e);
}

DeformedVerts deform_bend(const TetCage& cage, const CylinderSpec& spec, double e) {
  return deform(DeformFamily::kBend, cage, spec, e);
}

// --- ground truth ---------------------------------------------------------------

double GTScene::object_radius() const {
  return object_radius_scale * spec.radius * std::cos(kPi / spec.radial_segments);
}

double GTScene::reference_compression() const {
  const Vec3 rim(object_radius(), 0.0, 0.5 * spec.height);
  return compression(*this, 1.0, rim);
}

double compression(const GTScene& scene, double e, const Vec3& rest) {
  const Mat3 j = deformation_jacobian(scene.family, scene.spec, e, rest);
  Eigen::SelfAdjointEigenSolver<Mat3> eig;
  eig.computeDirect(j.transpose() * j, Eigen::EigenvaluesOnly);
  const double smallest = std::sqrt(std::max(eig.eigenvalues()[0], 0.0));
  return std::max(1.0 - smallest, 0.0);
}

double wrinkle_gate(const GTScene& scene, double e, const Vec3& rest) {
  const double ref = scene.reference_compression();
  if (!(ref > 0.0)) return 0.0;
  return smoothstep(scene.wrinkle_onset, scene.wrinkle_full, compression(scene, e, rest) / ref);
}

Vec3 base_albedo(const GTScene& scene, const Vec3& rest) {
  const double zn = rest.z() / scene.spec.height;
  const double ro = scene.object_radius();
  return Vec3(0.55 + 0.18 * std::cos(4.0 * kPi * zn), 0.45 + 0.15 * rest.y() / ro,
              0.5 + 0.15 * std::sin(2.0 * kPi * zn + 1.0) + 0.1 * rest.x() / ro);
}

double wrinkle_pattern(const GTScene& scene, const Vec3& rest) {
  const double th = std::atan2(rest.y(), rest.x());
  const double zn = rest.z() / scene.spec.height;
  return std::sin(scene.wrinkle_angular_freq * th + 2.0 * kPi * scene.wrinkle_axial_freq * zn);
}

namespace {

struct GTEval {
  const GTScene& scene;
  double e;
  double ref;
  double r2;

  GTEval(const GTScene& s, double code)
      : scene(s), e(code), ref(s.reference_compression()), r2(s.object_radius() * s.object_radius()) {}

  GTSample operator()(const Vec3& x) const {
    GTSample out;
    const Vec3 rest = undeform_point(scene.family, scene.spec, e, x);
    if (rest.x() * rest.x() + rest.y() * rest.y() > r2 || rest.z() < scene.object_z0() || rest.z() > scene.object_z1())
      return out;
    out.sigma = scene.sigma_inside;
    double gate = 0.0;
    if (ref > 0.0) gate = smoothstep(scene.wrinkle_onset, scene.wrinkle_full, compression(scene, e, rest) / ref);
    out.color = base_albedo(scene, rest);
    if (gate > 0.0) out.color.array() += gate * scene.wrinkle_amplitude * wrinkle_pattern(scene, rest);
    out.color = out.color.cwiseMax(0.0).cwiseMin(1.0);
    return out;
  }
};

}  // namespace

GTSample gt_radiance(const GTScene& scene, const Vec3& deformed_point, double e) {
  return GTEval(scene, e)(deformed_point);
}

Image render_gt(const GTScene& scene, double e, const Aabb& deformed_bounds, const Camera& cam,
                const GTRenderSettings& settings, int workers) {
  if (settings.samples < 1 || settings.supersampling < 1) throw ConfigError("GT render needs positive sample counts");
  const GTEval eval(scene, e);
  Image img(cam.width, cam.height);
  const int ss = settings.supersampling;
  parallel_chunks(static_cast<std::size_t>(cam.height), workers, [&](int, std::size_t y0, std::size_t y1) {
    for (std::size_t py = y0; py < y1; ++py) {
      for (int px = 0; px < cam.width; ++px) {
        Vec3 acc = Vec3::Zero();
        for (int sy = 0; sy < ss; ++sy) {
          for (int sx = 0; sx < ss; ++sx) {
            const Ray ray = generate_ray(cam, px + (sx + 0.5) / ss, static_cast<double>(py) + (sy + 0.5) / ss,
                                         settings.bounds);
            const auto span = ray_box(ray, deformed_bounds);
            if (!span) {
              acc += settings.background;
              continue;
            }
            const double dt = (span->t_exit - span->t_enter) / settings.samples;
            double trans = 1.0;
            Vec3 rgb = Vec3::Zero();
            for (int i = 0; i < settings.samples && trans >= kEarlyStopTransmittance; ++i) {
              const GTSample s = eval(ray.at(span->t_enter + (i + 0.5) * dt));
              if (s.sigma <= 0.0) continue;
              const double a = 1.0 - std::exp(-s.sigma * dt);
              rgb += trans * a * s.color;
              trans *= 1.0 - a;
            }
            acc += rgb + trans * settings.background;
          }
        }
        img.set(px, static_cast<int>(py), acc / (ss * ss));
      }
    }
  });
  return img;
}

std::vector<Camera> make_rig(const RigSpec& rig, const CylinderSpec& spec) {
  if (rig.width <= 0 || rig.height <= 0 || rig.ring_cameras < 0 || rig.elevated_cameras < 0 ||
      rig.ring_cameras + rig.elevated_cameras == 0 || !(rig.distance > 0.0) || !(rig.fov_degrees > 0.0) ||
      !(rig.fov_degrees < 180.0))
    throw ConfigError("invalid camera rig");
  const double focal = 0.5 * rig.width / std::tan(0.5 * rig.fov_degrees * kPi / 180.0);
  const Vec3 target(0.0, 0.0, 0.5 * spec.height);
  const Vec3 up = Vec3::UnitZ();
  std::vector<Camera> cams;
  for (int i = 0; i < rig.ring_cameras; ++i) {
    const double a = 2.0 * kPi * i / rig.ring_cameras;
    const Vec3 eye = target + rig.distance * Vec3(std::cos(a), std::sin(a), 0.0);
    cams.push_back(Camera::look_at(eye, target, up, rig.width, rig.height, focal));
  }
  const double el = rig.elevation_degrees * kPi / 180.0;
  for (int i = 0; i < rig.elevated_cameras; ++i) {
    const double a = 2.0 * kPi * (i + 0.5) / rig.elevated_cameras;
    const Vec3 eye = target + rig.distance * Vec3(std::cos(el) * std::cos(a), std::cos(el) * std::sin(a), std::sin(el));
    cams.push_back(Camera::look_at(eye, target, up, rig.width, rig.height, focal));
  }
  return cams;
}

// --- dataset --------------------------------------------------------------------

std::size_t Dataset::expression_count() const {
  int k = -1;
  for (const auto& p : poses)
    if (p.expression) k = std::max(k, *p.expression);
  return static_cast<std::size_t>(k + 1);
}

std::vector<const DatasetPose*> Dataset::split(const std::string& name) const {
  std::vector<const DatasetPose*> out;
  for (const auto& p : poses)
    if (p.split == name) out.push_back(&p);
  return out;
}

Image Dataset::load_image(const DatasetPose& pose, std::size_t camera) const {
  if (camera >= pose.images.size()) throw DimensionMismatch("camera index out of range for pose " + pose.id);
  Image img = read_ppm(root / pose.images[camera]);
  if (img.width != cameras[camera].width || img.height != cameras[camera].height)
    throw DimensionMismatch("image size does not match camera: " + (root / pose.images[camera]).string());
  return img;
}

std::vector<double> eval_expressions(const DatasetSpec& spec) {
  if (spec.sequence_frames < 2 || spec.eval_stride < 1) throw ConfigError("invalid sequence settings");
  std::vector<double> out;
  for (int i = 0; i < spec.sequence_frames; i += spec.eval_stride) {
    const double e = static_cast<double>(i) / (spec.sequence_frames - 1);
    const bool training = std::any_of(spec.train_expressions.begin(), spec.train_expressions.end(),
                                      [&](double t) { return std::abs(t - e) < 1e-12; });
    if (!training) out.push_back(e);
  }
  return out;
}

namespace {

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }
Vec3 json_vec(const json& j) {
  if (!j.is_array() || j.size() != 3) throw CorruptFile("expected a 3-vector");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

json camera_json(const Camera& c) {
  json rot = json::array();
  for (int r = 0; r < 3; ++r)
    for (int col = 0; col < 3; ++col) rot.push_back(c.rotation(r, col));
  return json{{"width", c.width}, {"height", c.height}, {"fx", c.fx},         {"fy", c.fy},
              {"cx", c.cx},       {"cy", c.cy},         {"rotation", rot}, {"center", vec_json(c.center)}};
}

Camera json_camera(const json& j) {
  Camera c;
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  const json& rot = j.at("rotation");
  if (!rot.is_array() || rot.size() != 9) throw CorruptFile("camera rotation needs 9 entries");
  for (int r = 0; r < 3; ++r)
    for (int col = 0; col < 3; ++col) c.rotation(r, col) = rot[3 * r + col].get<double>();
  c.center = json_vec(j.at("center"));
  validate_camera(c);
  return c;
}

json spec_to_json(const DatasetSpec& s) {
  const GTScene& g = s.scene;
  const CylinderSpec& c = g.spec;
  return json{
      {"family", to_string(g.family)},
      {"cylinder",
       {{"radius", c.radius},
        {"height", c.height},
        {"radial_segments", c.radial_segments},
        {"axial_segments", c.axial_segments},
        {"ring_layers", c.ring_layers},
        {"twist_max", c.twist_max},
        {"bend_max", c.bend_max},
        {"jitter", c.jitter},
        {"seed", c.seed}}},
      {"object",
       {{"radius_scale", g.object_radius_scale},
        {"margin", g.object_margin},
        {"sigma_inside", g.sigma_inside}}},
      {"wrinkle",
       {{"amplitude", g.wrinkle_amplitude},
        {"onset", g.wrinkle_onset},
        {"full", g.wrinkle_full},
        {"angular_freq", g.wrinkle_angular_freq},
        {"axial_freq", g.wrinkle_axial_freq}}},
      {"rig",
       {{"ring_cameras", s.rig.ring_cameras},
        {"elevated_cameras", s.rig.elevated_cameras},
        {"width", s.rig.width},
        {"height", s.rig.height},
        {"distance", s.rig.distance},
        {"fov_degrees", s.rig.fov_degrees},
        {"elevation_degrees", s.rig.elevation_degrees}}},
      {"gt",
       {{"samples", s.gt.samples},
        {"supersampling", s.gt.supersampling},
        {"background", vec_json(s.gt.background)},
        {"t_near", s.gt.bounds.t_near},
        {"t_far", s.gt.bounds.t_far}}},
      {"train_expressions", s.train_expressions},
      {"neutral_rest", s.neutral_rest},
      {"sequence_frames", s.sequence_frames},
      {"eval_stride", s.eval_stride},
  };
}

DatasetSpec json_to_spec(const json& j) {
  DatasetSpec s;
  GTScene& g = s.scene;
  CylinderSpec& c = g.spec;
  g.family = deform_family_from_string(j.at("family").get<std::string>());
  const json& cj = j.at("cylinder");
  c.radius = cj.at("radius").get<double>();
  c.height = cj.at("height").get<double>();
  c.radial_segments = cj.at("radial_segments").get<int>();
  c.axial_segments = cj.at("axial_segments").get<int>();
  c.ring_layers = cj.at("ring_layers").get<int>();
  c.twist_max = cj.at("twist_max").get<double>();
  c.bend_max = cj.at("bend_max").get<double>();
  c.jitter = cj.at("jitter").get<double>();
  c.seed = cj.at("seed").get<std::uint64_t>();
  const json& oj = j.at("object");
  g.object_radius_scale = oj.at("radius_scale").get<double>();
  g.object_margin = oj.at("margin").get<double>();
  g.sigma_inside = oj.at("sigma_inside").get<double>();
  const json& wj = j.at("wrinkle");
  g.wrinkle_amplitude = wj.at("amplitude").get<double>();
  g.wrinkle_onset = wj.at("onset").get<double>();
  g.wrinkle_full = wj.at("full").get<double>();
  g.wrinkle_angular_freq = wj.at("angular_freq").get<int>();
  g.wrinkle_axial_freq = wj.at("axial_freq").get<int>();
  const json& rj = j.at("rig");
  s.rig.ring_cameras = rj.at("ring_cameras").get<int>();
  s.rig.elevated_cameras = rj.at("elevated_cameras").get<int>();
  s.rig.width = rj.at("width").get<int>();
  s.rig.height = rj.at("height").get<int>();
  s.rig.distance = rj.at("distance").get<double>();
  s.rig.fov_degrees = rj.at("fov_degrees").get<double>();
  s.rig.elevation_degrees = rj.at("elevation_degrees").get<double>();
  const json& gj = j.at("gt");
  s.gt.samples = gj.at("samples").get<int>();
  s.gt.supersampling = gj.at("supersampling").get<int>();
  s.gt.background = json_vec(gj.at("background"));
  s.gt.bounds.t_near = gj.at("t_near").get<double>();
  s.gt.bounds.t_far = gj.at("t_far").get<double>();
  s.train_expressions = j.at("train_expressions").get<std::vector<double>>();
  s.neutral_rest = j.at("neutral_rest").get<bool>();
  s.sequence_frames = j.at("sequence_frames").get<int>();
  s.eval_stride = j.at("eval_stride").get<int>();
  return s;
}

}  // namespace

std::string scene_to_json(const DatasetSpec& spec) { return spec_to_json(spec).dump(); }

DatasetSpec dataset_spec_from_json(const std::string& text) {
  try {
    return json_to_spec(json::parse(text));
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("invalid scene description: ") + ex.what());
  }
}

std::string manifest_to_string(const Dataset& ds) {
  json cams = json::array();
  for (const Camera& c : ds.cameras) cams.push_back(camera_json(c));
  json poses = json::array();
  for (const DatasetPose& p : ds.poses) {
    json verts = json::array();
    for (const Vec3& v : p.deformed.positions) verts.push_back(vec_json(v));
    poses.push_back(json{{"id", p.id},
                         {"e", p.e},
                         {"expression", p.expression ? json(*p.expression) : json(nullptr)},
                         {"split", p.split},
                         {"images", p.images},
                         {"deformed", verts}});
  }
  const json doc{{"format", "blendfields-dataset"},
                 {"version", 1},
                 {"scene", json::parse(ds.scene_json)},
                 {"cage", "cage.tet"},
                 {"cameras", cams},
                 {"poses", poses}};
  return doc.dump(1) + "\n";
}

void save_manifest(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write manifest: " + path.string());
  os << manifest_to_string(ds);
  if (!os) throw IoError("failed writing manifest: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& root) {
  const auto manifest = root / "manifest.json";
  std::ifstream is(manifest, std::ios::binary);
  if (!is) throw IoError("cannot open dataset manifest: " + manifest.string());
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::exception& ex) {
    throw CorruptFile("unparsable manifest " + manifest.string() + ": " + ex.what());
  }
  try {
    if (doc.at("format").get<std::string>() != "blendfields-dataset") throw CorruptFile("not a dataset manifest");
    if (doc.at("version").get<int>() != 1) throw VersionMismatch("unsupported dataset version in " + manifest.string());
    Dataset ds{root, doc.at("scene").dump(), load_cage(root / doc.at("cage").get<std::string>()), {}, {}};
    for (const json& c : doc.at("cameras")) ds.cameras.push_back(json_camera(c));
    for (const json& pj : doc.at("poses")) {
      DatasetPose p;
      p.id = pj.at("id").get<std::string>();
      p.e = pj.at("e").get<double>();
      if (!pj.at("expression").is_null()) p.expression = pj.at("expression").get<int>();
      p.split = pj.at("split").get<std::string>();
      p.images = pj.at("images").get<std::vector<std::string>>();
      p.deformed.expression_code = p.e;
      for (const json& v : pj.at("deformed")) p.deformed.positions.push_back(json_vec(v));
      validate_deformed(ds.cage, p.deformed);
      if (p.images.size() != ds.cameras.size())
        throw CorruptFile("pose " + p.id + " lists " + std::to_string(p.images.size()) + " images for " +
                          std::to_string(ds.cameras.size()) + " cameras");
      ds.poses.push_back(std::move(p));
    }
    return ds;
  } catch (const json::exception& ex) {
    throw CorruptFile("malformed manifest " + manifest.string() + ": " + ex.what());
  }
}

Dataset render_dataset(const DatasetSpec& spec, const std::filesystem::path& root, int workers) {
  const GTScene& scene = spec.scene;
  TetCage cage = make_cylinder_cage(scene.spec);
  std::vector<Camera> cams = make_rig(spec.rig, scene.spec);
  if (spec.train_expressions.empty()) throw ConfigError("no training expressions");

  std::error_code ec;
  std::filesystem::create_directories(root / "images", ec);
  if (ec) throw IoError("cannot create dataset directory " + (root / "images").string() + ": " + ec.message());

  Dataset ds{root, scene_to_json(spec), cage, cams, {}};
  int next_k = 0;
  auto add_pose = [&](const std::string& id, double e, std::optional<int> k, const std::string& split) {
    DatasetPose p;
    p.id = id;
    p.e = e;
    p.expression = k;
    p.split = split;
    p.deformed = deform(scene.family, cage, scene.spec, e);
    Aabb box;
    for (const Vec3& v : p.deformed.positions) box.expand(v);
    for (std::size_t c = 0; c < cams.size(); ++c) {
      char name[64];
      std::snprintf(name, sizeof(name), "images/%s_cam%02zu.ppm", id.c_str(), c);
      p.images.emplace_back(name);
      write_ppm(root / p.images.back(), render_gt(scene, e, box, cams[c], spec.gt, workers));
    }
    ds.poses.push_back(std::move(p));
  };
  for (std::size_t i = 0; i < spec.train_expressions.size(); ++i) {
    const double e = spec.train_expressions[i];
    char id[32];
    std::snprintf(id, sizeof(id), "train_%02zu", i);
    const bool neutral = spec.neutral_rest && e == 0.0;
    add_pose(id, e, neutral ? -1 : next_k, "train");
    if (!neutral) ++next_k;
  }
  const auto evals = eval_expressions(spec);
  for (std::size_t i = 0; i < evals.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "eval_%02zu", i);
    add_pose(id, evals[i], std::nullopt, "eval");
  }
  save_cage(root / "cage.tet", cage);
  save_manifest(ds, root / "manifest.json");
  return ds;
}

// --- wrinkle detector --------------------------------------------------------------

std::vector<std::uint8_t> object_mask(const Image& reference, const Vec3& background, int erosion) {
  const int w = reference.width;
  const int h = reference.height;
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      raw[static_cast<std::size_t>(y) * w + x] = (reference.at(x, y) - background).cwiseAbs().maxCoeff() > 0.02;
  std::vector<std::uint8_t> out(raw.size(), 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      bool keep = true;
      for (int dy = -erosion; dy <= erosion && keep; ++dy) {
        for (int dx = -erosion; dx <= erosion && keep; ++dx) {
          const int xx = x + dx;
          const int yy = y + dy;
          keep = xx >= 0 && yy >= 0 && xx < w && yy < h && raw[static_cast<std::size_t>(yy) * w + xx];
        }
      }
      out[static_cast<std::size_t>(y) * w + x] = keep;
    }
  }
  return out;
}

namespace {

std::vector<double> gaussian_blur(const std::vector<double>& src, int w, int h, double sigma) {
  const int rad = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * rad + 1);
  double sum = 0.0;
  for (int i = -rad; i <= rad; ++i) sum += k[i + rad] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  std::vector<double> tmp(src.size());
  std::vector<double> out(src.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -rad; i <= rad; ++i) acc += k[i + rad] * src[static_cast<std::size_t>(y) * w + std::clamp(x + i, 0, w - 1)];
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -rad; i <= rad; ++i) acc += k[i + rad] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0, h - 1)) * w + x];
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  return out;
}

}  // namespace

double wrinkle_band_energy(const Image& img, const std::vector<std::uint8_t>& mask, double sigma_fine,
                           double sigma_coarse) {
  const int w = img.width;
  const int h = img.height;
  if (mask.size() != static_cast<std::size_t>(w) * h) throw DimensionMismatch("mask size does not match image");
  std::vector<double> gray(mask.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) gray[static_cast<std::size_t>(y) * w + x] = img.gray(x, y);
  const auto fine = gaussian_blur(gray, w, h, sigma_fine);
  const auto coarse = gaussian_blur(gray, w, h, sigma_coarse);
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const double d = fine[i] - coarse[i];
    acc += d * d;
    ++n;
  }
  return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

}  // namespace blendfields
